//! Forward and backward kernels on raw buffers.

use super::Tensor;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub(crate) fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<ConvGeom> {
    let (c_in, h, w) = input.dims3()?;
    let (c_out, wc_in, k) = match weight.shape() {
        &[o, i, kh, kw] if kh == kw => (o, i, kh),
        s => return invalid(format!("conv weight must be C_out×C_in×k×k, got {s:?}")),
    };
    if k != 1 && k != 3 {
        return invalid(format!("kernel size {k} not supported (1 or 3)"));
    }
    if padding != 0 && padding != (k - 1) / 2 {
        return invalid(format!("padding {padding} invalid for kernel {k}"));
    }
    if wc_in != c_in {
        return invalid(format!("conv expects {wc_in} input channels, got {c_in}"));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return invalid(format!(
                "conv bias must have shape [{c_out}], got {:?}",
                b.shape()
            ));
        }
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return invalid("input smaller than kernel");
    }
    Ok(ConvGeom {
        c_in,
        c_out,
        h,
        w,
        k,
        pad: padding,
        h_out: h + 2 * padding - k + 1,
        w_out: w + 2 * padding - k + 1,
    })
}

/// Valid output columns `x` for kernel tap `kx`: input column is `x + kx - pad`.
#[inline]
fn tap_range(k_off: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k_off);
    let hi = (n_in + pad).saturating_sub(k_off).min(n_out);
    (lo, hi.max(lo))
}

pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    wt: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.c_out * g.h_out * g.w_out];
    for co in 0..g.c_out {
        let o_plane = &mut out[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        if let Some(b) = bias {
            o_plane.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.c_in {
            let i_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.k {
                let (ylo, yhi) = tap_range(ky, g.pad, g.h, g.h_out);
                for kx in 0..g.k {
                    let wv = wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                    let (xlo, xhi) = tap_range(kx, g.pad, g.w, g.w_out);
                    for y in ylo..yhi {
                        let iy = y + ky - g.pad;
                        let o_row = &mut o_plane[y * g.w_out + xlo..y * g.w_out + xhi];
                        let i_row =
                            &i_plane[iy * g.w + xlo + kx - g.pad..iy * g.w + xhi + kx - g.pad];
                        for (o, &i) in o_row.iter_mut().zip(i_row) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for one convolution.
pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    wt: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let plane_out = g.h_out * g.w_out;
    if let Some(db) = db {
        for co in 0..g.c_out {
            db[co] += dout[co * plane_out..(co + 1) * plane_out]
                .iter()
                .copied()
                .sum();
        }
    }
    for co in 0..g.c_out {
        let d_plane = &dout[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let i_off = ci * g.h * g.w;
            for ky in 0..g.k {
                let (ylo, yhi) = tap_range(ky, g.pad, g.h, g.h_out);
                for kx in 0..g.k {
                    let widx = ((co * g.c_in + ci) * g.k + ky) * g.k + kx;
                    let wv = wt[widx];
                    let (xlo, xhi) = tap_range(kx, g.pad, g.w, g.w_out);
                    let mut acc = T::zero();
                    for y in ylo..yhi {
                        let iy = y + ky - g.pad;
                        let d_row = &d_plane[y * g.w_out + xlo..y * g.w_out + xhi];
                        let base = i_off + iy * g.w + xlo + kx - g.pad;
                        if dw.is_some() {
                            let i_row = &x[base..base + (xhi - xlo)];
                            for (&d, &i) in d_row.iter().zip(i_row) {
                                acc += d * i;
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dx_row = &mut dx[base..base + (xhi - xlo)];
                            for (o, &d) in dx_row.iter_mut().zip(d_row) {
                                *o += wv * d;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation of a `C_in×H×W` input with a `C_out×C_in×k×k`
/// kernel, `k ∈ {1, 3}`, zero padding `0` or `(k-1)/2`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, bias, padding)?;
    let out = conv_forward(&g, input.data(), weight.data(), bias.map(|b| b.data()));
    Ok(Tensor::from_raw(vec![g.c_out, g.h_out, g.w_out], out))
}

pub(crate) fn upsample_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            let row = &x[(ch * h + y / f) * w..(ch * h + y / f + 1) * w];
            for xo in 0..wo {
                out.push(row[xo / f]);
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(
    d: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
) {
    let (ho, wo) = (h * f, w * f);
    for ch in 0..c {
        for y in 0..ho {
            for xo in 0..wo {
                dx[(ch * h + y / f) * w + xo / f] += d[(ch * ho + y) * wo + xo];
            }
        }
    }
}

pub(crate) fn avgpool_forward<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
) -> Vec<T> {
    let (ho, wo) = (h / f, w / f);
    let norm = T::one() / T::from_usize_lossy(f * f);
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        for y in 0..h {
            for xi in 0..w {
                out[(ch * ho + y / f) * wo + xi / f] += x[(ch * h + y) * w + xi];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

pub(crate) fn avgpool_backward<T: Scalar>(
    d: &[T],
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
) {
    let (ho, wo) = (h / f, w / f);
    let norm = T::one() / T::from_usize_lossy(f * f);
    for ch in 0..c {
        for y in 0..h {
            for xi in 0..w {
                dx[(ch * h + y) * w + xi] += d[(ch * ho + y / f) * wo + xi / f] * norm;
            }
        }
    }
}

pub(crate) fn softmax_raw<T: Scalar>(values: &[T], tau: T) -> Vec<T> {
    let max = values.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = values.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let z: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Numerically stable `softmax(values / tau)` over a flat tensor.
pub fn softmax_scaled<T: Scalar>(values: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    if !(tau > T::zero()) {
        return invalid(format!("softmax temperature must be positive, got {tau}"));
    }
    if values.numel() == 0 {
        return invalid("softmax of an empty tensor");
    }
    Ok(Tensor::from_raw(
        values.shape().to_vec(),
        softmax_raw(values.data(), tau),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops, straight from the definition of cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (ci, h, wd) = x.dims3().unwrap();
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.data()[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * ci + i) * k + ky) * k + kx]
                                    * x.data()[(i * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(o * ho + y) * wo + xx] = acc;
                }
            }
        }
        Tensor::new(vec![co, ho, wo], out).unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_1x1_kernel_is_passthrough() {
        let x = Tensor::from_fn(&[3, 2, 2], |i| i as f64 - 4.0);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let b = Tensor::zeros(&[3]);
        assert_eq!(conv2d(&x, &w, Some(&b), 0).unwrap(), x);
    }

    #[test]
    fn all_ones_3x3_center_sums_nine() {
        let x = Tensor::full(&[1, 3, 3], 1.0f64);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, pad) in &[(3, 1), (3, 0), (1, 0)] {
            let x = rand_tensor(&mut rng, &[2, 4, 4]);
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let b = rand_tensor(&mut rng, &[3]);
            let fast = conv2d(&x, &w, Some(&b), pad).unwrap();
            let slow = naive_conv(&x, &w, &b, pad);
            assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 5, 5]), None, 2).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), None, 2).is_err());
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[1, 2, 3, 3]),
            Some(&Tensor::zeros(&[2])),
            1
        )
        .is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_scaled(&Tensor::full(&[5], 2.5f64), 0.3).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let x = Tensor::new(vec![4], vec![4f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        let s = softmax_scaled(&x, 1.0).unwrap();
        let expect = [4.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        let big = Tensor::new(vec![3], vec![0.0, 1e6, 0.0]).unwrap();
        let s = softmax_scaled(&big, 1.0).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 0.0]);
        assert!(softmax_scaled(&big, 0.0).is_err());
        assert!(softmax_scaled(&big, -1.0).is_err());
    }
}
