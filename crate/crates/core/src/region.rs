//! Region decomposition of a BEV grid into TP / FN / FP / TN cells and the
//! resulting foreground mask.

use crate::error::{invalid, Result};
use crate::geometry::{Heatmap, OwnerGrid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    /// Inside a ground-truth box where the teacher responds.
    TruePositive,
    /// Inside a ground-truth box where the teacher is silent.
    FalseNegative,
    /// Teacher response outside every box where the ground truth is low.
    FalsePositive,
    TrueNegative,
}

impl Region {
    /// Small integer code used for label images: TN 0, FP 1, FN 2, TP 3.
    pub fn code(self) -> u8 {
        match self {
            Region::TrueNegative => 0,
            Region::FalsePositive => 1,
            Region::FalseNegative => 2,
            Region::TruePositive => 3,
        }
    }

    pub fn is_object(self) -> bool {
        matches!(self, Region::TruePositive | Region::FalseNegative)
    }
}

/// Per-cell region labels plus the owning box of every TP/FN cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    pub height: usize,
    pub width: usize,
    pub label: Vec<Region>,
    pub owner: Vec<Option<usize>>,
}

impl RegionPartition {
    pub fn count(&self, region: Region) -> usize {
        self.label.iter().filter(|&&l| l == region).count()
    }

    /// Fraction of cells not labelled TN.
    pub fn non_tn_fraction(&self) -> f64 {
        1.0 - self.count(Region::TrueNegative) as f64 / self.label.len().max(1) as f64
    }
}

/// The mask `M ∈ {0, η, 1}` and its complement `M̄ = [M = 0]`, both `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask<T> {
    pub m: Tensor<T>,
    pub m_bar: Tensor<T>,
    pub eta: T,
}

/// Cells where the teacher is confident (`max_k H^t > γ`) while the ground
/// truth is not (`max_k H^g < γ`). Both comparisons are strict.
pub fn compute_fp_cells<T: Scalar>(
    h_teacher: &Heatmap<T>,
    h_gt: &Heatmap<T>,
    gamma: T,
) -> Result<Vec<bool>> {
    if h_teacher.spatial() != h_gt.spatial() {
        return invalid(format!(
            "teacher heatmap {:?} and ground-truth heatmap {:?} differ in size",
            h_teacher.spatial(),
            h_gt.spatial()
        ));
    }
    if !(gamma > T::zero() && gamma < T::one()) {
        return invalid(format!("threshold must lie in (0, 1), got {gamma}"));
    }
    let t = h_teacher.max_over_classes();
    let g = h_gt.max_over_classes();
    Ok(t.data()
        .iter()
        .zip(g.data())
        .map(|(&a, &b)| a > gamma && b < gamma)
        .collect())
}

/// Labels each cell. Box membership wins over FP; inside a box the cell is TP
/// when the teacher's max-class response exceeds `gamma`, FN otherwise.
pub fn decompose<T: Scalar>(
    owners: &OwnerGrid,
    fp_cells: &[bool],
    h_teacher: &Heatmap<T>,
    gamma: T,
) -> Result<RegionPartition> {
    let n = owners.height * owners.width;
    if fp_cells.len() != n || h_teacher.spatial() != (owners.height, owners.width) {
        return invalid("owner grid, FP cells and teacher heatmap must share one shape");
    }
    let t = h_teacher.max_over_classes();
    let label = (0..n)
        .map(|i| match owners.owner[i] {
            Some(_) if t.data()[i] > gamma => Region::TruePositive,
            Some(_) => Region::FalseNegative,
            None if fp_cells[i] => Region::FalsePositive,
            None => Region::TrueNegative,
        })
        .collect();
    Ok(RegionPartition {
        height: owners.height,
        width: owners.width,
        label,
        owner: owners.owner.clone(),
    })
}

/// `M = 1` on TP∪FN, `η` on FP when `include_fp` (else 0), `0` on TN.
pub fn build_mask<T: Scalar>(
    partition: &RegionPartition,
    eta: T,
    include_fp: bool,
) -> Result<RegionMask<T>> {
    if !(eta >= T::zero()) {
        return invalid(format!("FP weight must be non-negative, got {eta}"));
    }
    let shape = [partition.height, partition.width];
    let m = Tensor::from_fn(&shape, |i| match partition.label[i] {
        Region::TruePositive | Region::FalseNegative => T::one(),
        Region::FalsePositive if include_fp => eta,
        _ => T::zero(),
    });
    let m_bar = m.map(|v| if v == T::zero() { T::one() } else { T::zero() });
    Ok(RegionMask { m, m_bar, eta })
}
