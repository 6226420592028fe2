//! Spatial attention maps and the student-side adaptation modules.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{bad_config, invalid, Result};
use crate::nn::{Bind, ConvBnRelu, State};
use crate::scalar::Scalar;
use crate::tensor::{pool_abs_mean_raw, softmax_scaled, Graph, NodeId, Tensor};

/// `P(F)_{ij} = (1/C) Σ_c |F_cij|`, returned as an `H×W` grid.
pub fn pool_abs_mean<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = f.dims3()?;
    if c == 0 {
        return invalid("feature map has no channels");
    }
    Ok(Tensor::from_raw(
        vec![h, w],
        pool_abs_mean_raw(f.data(), c, h * w),
    ))
}

/// `N = H·W · softmax(P / τ)` over all cells.
pub fn normalize_attention<T: Scalar>(p: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    let (h, w) = p.dims2()?;
    let flat = p.clone().reshape(&[h * w])?;
    let n = T::from_usize_lossy(h * w);
    softmax_scaled(&flat, tau)?.map(|v| v * n).reshape(&[h, w])
}

/// `A = (N_t + N_s) / 2`.
pub fn combine_attention<T: Scalar>(n_t: &Tensor<T>, n_s: &Tensor<T>) -> Result<Tensor<T>> {
    n_t.dims2()?;
    n_t.zip_map(n_s, |a, b| (a + b) / T::lit(2.0))
}

/// Pooled, normalized and combined attention for one teacher/student pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps<T> {
    pub p_teacher: Tensor<T>,
    pub p_student: Tensor<T>,
    pub n_teacher: Tensor<T>,
    pub n_student: Tensor<T>,
    pub a: Tensor<T>,
}

impl<T: Scalar> AttentionMaps<T> {
    pub fn compute(f_teacher: &Tensor<T>, f_student_adapted: &Tensor<T>, tau: T) -> Result<Self> {
        f_teacher.expect_same_shape(f_student_adapted)?;
        let p_teacher = pool_abs_mean(f_teacher)?;
        let p_student = pool_abs_mean(f_student_adapted)?;
        let n_teacher = normalize_attention(&p_teacher, tau)?;
        let n_student = normalize_attention(&p_student, tau)?;
        let a = combine_attention(&n_teacher, &n_student)?;
        Ok(Self {
            p_teacher,
            p_student,
            n_teacher,
            n_student,
            a,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdapterKind {
    /// Two blocks; paired with the pre-head layer.
    Prehead,
    /// Upsampling followed by three blocks; paired with encoder layers.
    Intermediate,
}

impl AdapterKind {
    pub fn blocks(self) -> usize {
        match self {
            AdapterKind::Prehead => 2,
            AdapterKind::Intermediate => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Prehead => "prehead",
            AdapterKind::Intermediate => "intermediate",
        }
    }
}

/// Nearest-neighbour upsampling by `factor` followed by 1×1 Conv-BN-ReLU
/// blocks mapping student channels to teacher channels.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationModule<T> {
    pub kind: AdapterKind,
    pub factor: usize,
    pub blocks: Vec<ConvBnRelu<T>>,
}

/// Integer upsampling factor taking a student grid to a teacher grid.
pub fn resolution_factor(student_hw: (usize, usize), teacher_hw: (usize, usize)) -> Result<usize> {
    let (sh, sw) = student_hw;
    let (th, tw) = teacher_hw;
    if sh == 0 || sw == 0 || th % sh != 0 || tw % sw != 0 || th / sh != tw / sw {
        return bad_config(format!(
            "teacher resolution {th}×{tw} is not an integer multiple of student resolution {sh}×{sw}"
        ));
    }
    Ok(th / sh)
}

impl<T: Scalar> AdaptationModule<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        kind: AdapterKind,
        c_student: usize,
        c_teacher: usize,
        factor: usize,
    ) -> Result<Self> {
        if factor == 0 {
            return bad_config("upsampling factor must be at least 1");
        }
        let blocks = (0..kind.blocks())
            .map(|i| {
                ConvBnRelu::new(
                    rng,
                    if i == 0 { c_student } else { c_teacher },
                    c_teacher,
                    1,
                )
            })
            .collect();
        Ok(Self {
            kind,
            factor,
            blocks,
        })
    }

    /// Builds a module sized for the given student and teacher feature shapes.
    pub fn for_shapes<R: Rng + ?Sized>(
        rng: &mut R,
        kind: AdapterKind,
        student: &[usize],
        teacher: &[usize],
    ) -> Result<Self> {
        let (&[cs, sh, sw], &[ct, th, tw]) = (student, teacher) else {
            return bad_config("adapter shapes must be C×H×W");
        };
        Self::new(rng, kind, cs, ct, resolution_factor((sh, sw), (th, tw))?)
    }

    /// Channel-identity blocks with identity statistics.
    pub fn identity(kind: AdapterKind, c_student: usize, c_teacher: usize, factor: usize) -> Self {
        let blocks = (0..kind.blocks())
            .map(|i| ConvBnRelu::identity(if i == 0 { c_student } else { c_teacher }, c_teacher))
            .collect();
        Self {
            kind,
            factor,
            blocks,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels())
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: NodeId, bind: &mut Bind) -> Result<NodeId> {
        let mut h = if self.factor == 1 {
            x
        } else {
            g.upsample_nearest(x, self.factor)?
        };
        for b in &mut self.blocks {
            h = b.forward(g, h, bind)?;
        }
        Ok(h)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect()
    }

    pub fn export(&self, prefix: &str, out: &mut State<T>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.export(&format!("{prefix}.block{i}"), out);
        }
    }

    pub fn import(&mut self, prefix: &str, state: &HashMap<String, Tensor<T>>) -> Result<()> {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.import(&format!("{prefix}.block{i}"), state)?;
        }
        Ok(())
    }
}

/// Runs the module in inference mode on a detached feature map.
pub fn adapt_student<T: Scalar>(
    f_s: &Tensor<T>,
    module: &AdaptationModule<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(f_s.clone());
    let mut m = module.clone();
    let y = m.forward(&mut g, x, &mut Bind::infer())?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(v: &[f64], h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(vec![h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn pool_examples() {
        let f = Tensor::new(vec![2, 1, 1], vec![3.0, -3.0]).unwrap();
        assert_eq!(pool_abs_mean(&f).unwrap().data(), &[3.0]);
        assert!(pool_abs_mean(&Tensor::<f64>::zeros(&[4, 3, 3]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let one = Tensor::new(vec![1, 1, 3], vec![-1.0, 2.0, -0.5]).unwrap();
        assert_eq!(pool_abs_mean(&one).unwrap().data(), &[1.0, 2.0, 0.5]);
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_attention(&grid(&[0.3; 6], 2, 3), 0.5).unwrap();
        assert!(n.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let n = normalize_attention(&grid(&[4f64.ln(), 0.0, 0.0, 0.0], 2, 2), 1.0).unwrap();
        let want = [16.0 / 7.0, 4.0 / 7.0, 4.0 / 7.0, 4.0 / 7.0];
        for (a, b) in n.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(normalize_attention(&grid(&[1.0], 1, 1), 0.0).is_err());
    }

    #[test]
    fn combine_examples() {
        let a = grid(&[0.5, 1.5], 1, 2);
        assert_eq!(combine_attention(&a, &a).unwrap(), a);
        assert!(combine_attention(&a, &grid(&[1.0], 1, 1)).is_err());
    }

    #[test]
    fn intermediate_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = AdaptationModule::<f64>::for_shapes(
            &mut rng,
            AdapterKind::Intermediate,
            &[16, 32, 32],
            &[64, 64, 64],
        )
        .unwrap();
        assert_eq!(m.blocks.len(), 3);
        assert_eq!(m.factor, 2);
        let f = Tensor::from_fn(&[16, 32, 32], |i| (i % 7) as f64 - 3.0);
        assert_eq!(adapt_student(&f, &m).unwrap().shape(), &[64, 64, 64]);
        assert!(AdaptationModule::<f64>::for_shapes(
            &mut rng,
            AdapterKind::Prehead,
            &[8, 12, 12],
            &[8, 32, 32]
        )
        .is_err());
        assert!(matches!(
            resolution_factor((3, 3), (4, 4)),
            Err(crate::Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn identity_prehead_passes_channels_through() {
        let m = AdaptationModule::<f64>::identity(AdapterKind::Prehead, 3, 2, 1);
        assert_eq!(m.blocks.len(), 2);
        let f = Tensor::from_fn(&[3, 2, 2], |i| i as f64 * 0.5);
        let out = adapt_student(&f, &m).unwrap();
        let eps_gain = 1.0 / (1.0 + 1e-5f64).sqrt();
        for (o, v) in out.data().iter().zip(&f.data()[..8]) {
            assert!((o - v * eps_gain * eps_gain).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = AdaptationModule::<f64>::new(&mut rng, AdapterKind::Intermediate, 2, 3, 2).unwrap();
        let f = Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let r = grad_check(
            |g, ids| {
                let mut m = m.clone();
                let mut bind = Bind::infer();
                let y = m.forward(g, ids[0], &mut bind)?;
                Ok(g.sum(y))
            },
            &[f],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }
}
