//! Adaptive scaling so that large objects and large background regions do not
//! dominate the imitation loss.

use crate::error::{invalid, Result};
use crate::geometry::{BevBox, GridSpec};
use crate::region::{Region, RegionPartition};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Box extent in cells, clamped below at one cell.
pub fn extent_in_cells<T: Scalar>(b: &BevBox<T>, grid: &GridSpec<T>) -> (T, T) {
    let cell = grid.cell_size();
    (
        (b.length / cell).max(T::one()),
        (b.width / cell).max(T::one()),
    )
}

/// Per-cell scale `S` (`H×W`):
///
/// * cells owned by box `k` get `1/√(h_k·w_k)` with the box extent in cells,
/// * FP cells get `1/N_FP`,
/// * TN cells get `1/N_TN`.
///
/// Regions without cells simply contribute nothing, so empty FP or TN sets
/// never divide by zero.
pub fn compute_scaling<T: Scalar>(
    partition: &RegionPartition,
    boxes: &[BevBox<T>],
    grid: &GridSpec<T>,
) -> Result<Tensor<T>> {
    if (partition.height, partition.width) != grid.shape() {
        return invalid("partition and grid differ in size");
    }
    let per_box: Vec<T> = boxes
        .iter()
        .map(|b| {
            let (h, w) = extent_in_cells(b, grid);
            T::one() / (h * w).sqrt()
        })
        .collect();
    let recip = |n: usize| {
        if n == 0 {
            T::zero()
        } else {
            T::one() / T::from_usize_lossy(n)
        }
    };
    let fp = recip(partition.count(Region::FalsePositive));
    let tn = recip(partition.count(Region::TrueNegative));
    let mut s = Vec::with_capacity(partition.label.len());
    for (label, owner) in partition.label.iter().zip(&partition.owner) {
        s.push(match label {
            Region::TruePositive | Region::FalseNegative => {
                let Some(&v) = owner.and_then(|k| per_box.get(k)) else {
                    return invalid("object cell without a valid owning box");
                };
                v
            }
            Region::FalsePositive => fp,
            Region::TrueNegative => tn,
        });
    }
    Ok(Tensor::from_raw(vec![partition.height, partition.width], s))
}
