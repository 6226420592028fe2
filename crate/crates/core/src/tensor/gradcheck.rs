use super::{Graph, NodeId, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport<T> {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)` over checked coordinates.
    pub max_rel_error: T,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates within `10·h` of zero, skipped as potential kinks.
    pub skipped: usize,
}

/// Compares the tape gradient of the scalar built by `build` against central
/// differences with step `h`, for every coordinate of every input.
///
/// `build` receives one differentiable leaf per entry of `inputs` and must
/// return a one-element node. It is called once for the analytic pass and
/// twice per coordinate.
pub fn grad_check<T, F>(build: F, inputs: &[Tensor<T>], h: T) -> Result<GradCheckReport<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor<T>]| -> Result<T> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &ids)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<T>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, x)| grads.get_or_zeros(id, x))
        .collect();

    let floor = T::lit(1e-8);
    let kink = T::lit(10.0) * h;
    let two_h = h + h;
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            if x0.abs() < kink {
                report.skipped += 1;
                continue;
            }
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / two_h;
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((i, j));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cubic_polynomial() {
        let r = grad_check(
            |g, ids| {
                let sq = g.square(ids[0]);
                let cube = g.mul(sq, ids[0])?;
                Ok(g.sum(cube))
            },
            &[Tensor::new(vec![1], vec![2.0f64]).unwrap()],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error <= 1e-7, "{:?}", r);
    }

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::new(vec![3], vec![0.0f64, 1.5, -0.5]).unwrap();
        let r = grad_check(
            |g, ids| {
                let y = g.relu(ids[0]);
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error <= 1e-9);
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        // A bias directly before train-mode batchnorm has an identically zero
        // gradient, so biases only appear after normalization here.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..5 {
            let x = rand_t(&mut rng, &[2, 4, 4]);
            let w3 = rand_t(&mut rng, &[3, 2, 3, 3]);
            let gamma = rand_t(&mut rng, &[3]);
            let beta = rand_t(&mut rng, &[3]);
            let w1 = rand_t(&mut rng, &[2, 3, 1, 1]);
            let b1 = rand_t(&mut rng, &[2]);
            let target = rand_t(&mut rng, &[2, 8, 8]);
            let r = grad_check(
                |g, ids| {
                    let c = g.conv2d(ids[0], ids[1], None, 1)?;
                    let mut rs = crate::tensor::RunningStats::identity(3);
                    let n =
                        g.batchnorm(c, ids[2], ids[3], crate::tensor::BnMode::Train(&mut rs))?;
                    let r = g.relu(n);
                    let p = g.conv2d(r, ids[4], Some(ids[5]), 0)?;
                    let u = g.upsample_nearest(p, 2)?;
                    let t = g.constant(target.clone());
                    let d = g.sub(u, t)?;
                    let s = g.square(d);
                    Ok(g.sum(s))
                },
                &[x, w3, gamma, beta, w1, b1],
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-5, "trial {trial}: {r:?}");
        }
    }

    #[test]
    fn pooling_softmax_and_abs_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_t(&mut rng, &[3, 4, 4]);
        let wgt = Tensor::from_fn(&[2, 2], |i| 0.5 + i as f64);
        let r = grad_check(
            |g, ids| {
                let p = g.avg_pool(ids[0], 2)?;
                let m = g.pool_abs_mean(p)?;
                let flat = g.reshape(m, &[4])?;
                let s = g.softmax_scaled(flat, 0.5)?;
                let sq = g.square(s);
                let a = g.sum(sq);
                let ws = g.mul_spatial(p, &wgt)?;
                let wsq = g.square(ws);
                let b = g.mean(wsq);
                let cat = g.concat_channels(p, ws)?;
                let ab = g.abs(cat);
                let c = g.sum(ab);
                let c = g.scale(c, 0.1);
                let ab = g.add(a, b)?;
                g.add(ab, c)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }
}
