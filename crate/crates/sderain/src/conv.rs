//! 2-D cross-correlation with replicate (edge-clamp) padding.
//!
//! Replicate padding keeps the output the same spatial size as the input
//! without introducing dark borders in the predicted residual. The inner
//! loops are written as shifted row slices so the hot path is a contiguous
//! fused multiply-add the compiler can vectorize.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    /// True when the input was rank-3 `[C,H,W]` rather than `[B,C,H,W]`.
    pub unbatched: bool,
}

pub(crate) fn check_dims(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<ConvDims> {
    let ks = kernel.shape();
    if ks.len() != 4 || ks[2] != ks[3] {
        return Err(Error::contract(format!(
            "kernel must be [c_out,c_in,k,k], got {ks:?}"
        )));
    }
    let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
    if k % 2 == 0 {
        return Err(Error::contract(format!("kernel size {k} must be odd")));
    }
    if bias.shape() != [c_out] {
        return Err(Error::contract(format!(
            "bias shape {:?} must be [{c_out}]",
            bias.shape()
        )));
    }
    let is = input.shape();
    let (batch, ci, h, w, unbatched) = match is.len() {
        3 => (1, is[0], is[1], is[2], true),
        4 => (is[0], is[1], is[2], is[3], false),
        _ => {
            return Err(Error::contract(format!(
                "input must be [c_in,h,w] or [b,c_in,h,w], got {is:?}"
            )))
        }
    };
    if ci != c_in {
        return Err(Error::contract(format!(
            "input has {ci} channels but kernel expects {c_in}"
        )));
    }
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        h,
        w,
        k,
        unbatched,
    })
}

/// `out[co,y,x] = bias[co] + sum_{ci,dy,dx} in[ci, clamp(y+dy-p), clamp(x+dx-p)] * ker[co,ci,dy,dx]`
///
/// Accepts `[c_in,h,w]` or `[b,c_in,h,w]` input and preserves the rank.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = check_dims(input, kernel, bias)?;
    let mut out = vec![0.0; d.batch * d.c_out * d.h * d.w];
    forward_into(input.data(), kernel.data(), bias.data(), &d, &mut out);
    let shape = if d.unbatched {
        vec![d.c_out, d.h, d.w]
    } else {
        vec![d.batch, d.c_out, d.h, d.w]
    };
    Tensor::from_vec(shape, out)
}

/// The contiguous range of `x` positions whose source column `x + shift`
/// needs no clamping, or `None` when every position clamps (kernel wider
/// than the image).
#[inline]
fn x_ranges(w: usize, shift: isize) -> Option<(usize, usize)> {
    let x0 = (-shift).max(0);
    let x1 = (w as isize - 1 - shift).min(w as isize - 1);
    if x0 <= x1 {
        Some((x0 as usize, x1 as usize))
    } else {
        None
    }
}

#[inline]
fn clamp_col(x: usize, shift: isize, w: usize) -> usize {
    (x as isize + shift).clamp(0, w as isize - 1) as usize
}

fn forward_into(input: &[f64], kernel: &[f64], bias: &[f64], d: &ConvDims, out: &mut [f64]) {
    let (h, w, k) = (d.h, d.w, d.k);
    let p = (k - 1) / 2;
    let plane = h * w;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let out_plane = &mut out[(b * d.c_out + co) * plane..][..plane];
            out_plane.fill(bias[co]);
            for ci in 0..d.c_in {
                let in_plane = &input[(b * d.c_in + ci) * plane..][..plane];
                for dy in 0..k {
                    for dx in 0..k {
                        let weight = kernel[((co * d.c_in + ci) * k + dy) * k + dx];
                        let shift = dx as isize - p as isize;
                        let mid = x_ranges(w, shift);
                        for y in 0..h {
                            let sy = (y + dy).saturating_sub(p).min(h - 1);
                            let in_row = &in_plane[sy * w..sy * w + w];
                            let out_row = &mut out_plane[y * w..y * w + w];
                            let Some((x0, x1)) = mid else {
                                for x in 0..w {
                                    out_row[x] += weight * in_row[clamp_col(x, shift, w)];
                                }
                                continue;
                            };
                            for x in 0..x0 {
                                out_row[x] += weight * in_row[0];
                            }
                            let src = &in_row[(x0 as isize + shift) as usize..][..x1 - x0 + 1];
                            for (o, s) in out_row[x0..=x1].iter_mut().zip(src) {
                                *o += weight * *s;
                            }
                            for x in x1 + 1..w {
                                out_row[x] += weight * in_row[w - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of `conv2d` w.r.t. input, kernel, and bias given the output
/// gradient. The clamped border taps accumulate back into the edge pixels,
/// which is the exact adjoint of replicate padding. When `need_input` is
/// false the (often unneeded) input gradient is skipped entirely.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    d: &ConvDims,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (h, w, k) = (d.h, d.w, d.k);
    let p = (k - 1) / 2;
    let plane = h * w;
    let input = input.data();
    let kernel_data = kernel.data();
    let mut g_in = vec![0.0; if need_input { input.len() } else { 0 }];
    let mut g_ker = vec![0.0; kernel_data.len()];
    let mut g_bias = vec![0.0; d.c_out];

    for b in 0..d.batch {
        for co in 0..d.c_out {
            let go_plane = &grad_out[(b * d.c_out + co) * plane..][..plane];
            g_bias[co] += go_plane.iter().sum::<f64>();
            for ci in 0..d.c_in {
                let in_plane = &input[(b * d.c_in + ci) * plane..][..plane];
                let gi_plane = if need_input {
                    &mut g_in[(b * d.c_in + ci) * plane..]
                } else {
                    &mut g_in[..]
                };
                for dy in 0..k {
                    for dx in 0..k {
                        let kidx = ((co * d.c_in + ci) * k + dy) * k + dx;
                        let weight = kernel_data[kidx];
                        let shift = dx as isize - p as isize;
                        let mid = x_ranges(w, shift);
                        let mut acc = 0.0;
                        for y in 0..h {
                            let sy = (y + dy).saturating_sub(p).min(h - 1);
                            let in_row = &in_plane[sy * w..sy * w + w];
                            let go_row = &go_plane[y * w..y * w + w];

                            let Some((x0, x1)) = mid else {
                                if need_input {
                                    let gi_row = &mut gi_plane[sy * w..sy * w + w];
                                    for x in 0..w {
                                        let sx = clamp_col(x, shift, w);
                                        gi_row[sx] += weight * go_row[x];
                                        acc += in_row[sx] * go_row[x];
                                    }
                                } else {
                                    for x in 0..w {
                                        acc += in_row[clamp_col(x, shift, w)] * go_row[x];
                                    }
                                }
                                continue;
                            };

                            let left: f64 = go_row[..x0].iter().sum();
                            let right: f64 = go_row[x1 + 1..].iter().sum();
                            acc += in_row[0] * left + in_row[w - 1] * right;

                            let off = (x0 as isize + shift) as usize;
                            let n = x1 - x0 + 1;
                            let mut dot = 0.0;
                            for (go, s) in go_row[x0..=x1].iter().zip(&in_row[off..off + n]) {
                                dot += *go * *s;
                            }
                            acc += dot;

                            if need_input {
                                let gi_row = &mut gi_plane[sy * w..sy * w + w];
                                gi_row[0] += weight * left;
                                gi_row[w - 1] += weight * right;
                                for (gi, go) in
                                    gi_row[off..off + n].iter_mut().zip(&go_row[x0..=x1])
                                {
                                    *gi += weight * *go;
                                }
                            }
                        }
                        g_ker[kidx] += acc;
                    }
                }
            }
        }
    }

    let in_shape = if d.unbatched {
        vec![d.c_in, h, w]
    } else {
        vec![d.batch, d.c_in, h, w]
    };
    let g_in = if need_input {
        Some(Tensor::from_vec(in_shape, g_in).expect("input grad shape"))
    } else {
        None
    };
    (
        g_in,
        Tensor::from_vec(kernel.shape().to_vec(), g_ker).expect("kernel grad shape"),
        Tensor::from_vec(vec![d.c_out], g_bias).expect("bias grad shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Direct nested-loop cross-correlation over the replicate-padded input.
    fn conv_oracle(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Tensor {
        let d = check_dims(input, kernel, bias).unwrap();
        let p = (d.k - 1) / 2;
        let plane = d.h * d.w;
        let mut out = vec![0.0; d.batch * d.c_out * plane];
        let clamp = |v: isize, hi: usize| -> usize { v.clamp(0, hi as isize - 1) as usize };
        for b in 0..d.batch {
            for co in 0..d.c_out {
                for y in 0..d.h {
                    for x in 0..d.w {
                        let mut acc = bias.data()[co];
                        for ci in 0..d.c_in {
                            for dy in 0..d.k {
                                for dx in 0..d.k {
                                    let sy = clamp(y as isize + dy as isize - p as isize, d.h);
                                    let sx = clamp(x as isize + dx as isize - p as isize, d.w);
                                    acc += input.data()[(b * d.c_in + ci) * plane + sy * d.w + sx]
                                        * kernel.data()
                                            [((co * d.c_in + ci) * d.k + dy) * d.k + dx];
                                }
                            }
                        }
                        out[(b * d.c_out + co) * plane + y * d.w + x] = acc;
                    }
                }
            }
        }
        let shape = if d.unbatched {
            vec![d.c_out, d.h, d.w]
        } else {
            vec![d.batch, d.c_out, d.h, d.w]
        };
        Tensor::from_vec(shape, out).unwrap()
    }

    fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn all_ones_window_sums_to_nine() {
        let input = Tensor::filled(&[1, 3, 3], 1.0);
        let kernel = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &kernel, &bias).unwrap();
        // Replicate padding makes every 3x3 window all ones.
        assert!(out.data().iter().all(|&v| (v - 9.0).abs() < 1e-15));
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let mut rng = crate::rng::stream(1, "conv-test", 0);
        let input = random_tensor(&mut rng, &[2, 4, 5]);
        let kernel = Tensor::zeros(&[3, 2, 3, 3]);
        let bias = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv2d(&input, &kernel, &bias).unwrap();
        for co in 0..3 {
            for v in &out.data()[co * 20..(co + 1) * 20] {
                assert_eq!(*v, bias.data()[co]);
            }
        }
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = crate::rng::stream(2, "conv-test", 0);
        let input = random_tensor(&mut rng, &[1, 5, 5]);
        let kernel = random_tensor(&mut rng, &[2, 1, 3, 3]);
        let bias = random_tensor(&mut rng, &[2]);
        let fast = conv2d(&input, &kernel, &bias).unwrap();
        let slow = conv_oracle(&input, &kernel, &bias);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn batched_matches_oracle_and_larger_kernel() {
        let mut rng = crate::rng::stream(3, "conv-test", 0);
        for &k in &[1usize, 3, 5] {
            let input = random_tensor(&mut rng, &[2, 3, 6, 7]);
            let kernel = random_tensor(&mut rng, &[4, 3, k, k]);
            let bias = random_tensor(&mut rng, &[4]);
            let fast = conv2d(&input, &kernel, &bias).unwrap();
            let slow = conv_oracle(&input, &kernel, &bias);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_smaller_than_kernel_matches_oracle() {
        let mut rng = crate::rng::stream(5, "conv-test", 0);
        for &(h, w) in &[(1usize, 1usize), (1, 4), (2, 2)] {
            let input = random_tensor(&mut rng, &[1, h, w]);
            let kernel = random_tensor(&mut rng, &[1, 1, 5, 5]);
            let bias = random_tensor(&mut rng, &[1]);
            let fast = conv2d(&input, &kernel, &bias).unwrap();
            let slow = conv_oracle(&input, &kernel, &bias);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_even_kernel() {
        let input = Tensor::zeros(&[2, 4, 4]);
        let bias = Tensor::zeros(&[1]);
        assert!(conv2d(&input, &Tensor::zeros(&[1, 3, 3, 3]), &bias).is_err());
        assert!(conv2d(&input, &Tensor::zeros(&[1, 2, 2, 2]), &bias).is_err());
        assert!(conv2d(&input, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::rng::stream(4, "conv-test", 0);
        let input = random_tensor(&mut rng, &[1, 2, 4, 4]);
        let kernel = random_tensor(&mut rng, &[2, 2, 3, 3]);
        let bias = random_tensor(&mut rng, &[2]);
        let d = check_dims(&input, &kernel, &bias).unwrap();

        // Loss = weighted sum of outputs so every output position matters.
        let out = conv2d(&input, &kernel, &bias).unwrap();
        let weights: Vec<f64> = (0..out.numel()).map(|i| ((i % 7) as f64) - 3.0).collect();
        let loss = |t: &Tensor| -> f64 {
            t.data().iter().zip(&weights).map(|(a, w)| a * w).sum()
        };
        let (g_in, g_ker, g_bias) = conv2d_backward(&input, &kernel, &weights, &d, true);
        let g_in = g_in.unwrap();

        let h = 1e-6;
        let check = |t: &Tensor, grads: &Tensor, rebuild: &dyn Fn(Tensor) -> Tensor| {
            for i in (0..t.numel()).step_by(3) {
                let mut plus = t.data().to_vec();
                plus[i] += h;
                let mut minus = t.data().to_vec();
                minus[i] -= h;
                let lp = loss(&rebuild(Tensor::from_vec(t.shape().to_vec(), plus).unwrap()));
                let lm = loss(&rebuild(Tensor::from_vec(t.shape().to_vec(), minus).unwrap()));
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.data()[i];
                assert!(
                    (fd - an).abs() < 1e-6 * fd.abs().max(an.abs()).max(1.0),
                    "index {i}: fd {fd} vs analytic {an}"
                );
            }
        };
        check(&input, &g_in, &|t| conv2d(&t, &kernel, &bias).unwrap());
        check(&kernel, &g_ker, &|t| conv2d(&input, &t, &bias).unwrap());
        check(&bias, &g_bias, &|t| conv2d(&input, &kernel, &t).unwrap());
    }
}
