//! Forward and backward kernels.
//!
//! Image tensors are single samples laid out `[channels, height, width]`.
//! Backward kernels accumulate into the gradient buffers they are handed so
//! several samples can share one parameter gradient.

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }
}

fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvShape {
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_shape<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<ConvShape> {
    if spec.stride == 0 {
        return Err(TensorError::InvalidArgument(
            "conv2d stride must be >= 1".into(),
        ));
    }
    let (&[c_in, h_in, w_in], &[c_out, wc, kh, kw]) = (input.dims(), weights.dims()) else {
        return shape_err(
            "conv2d",
            format!("input {:?} / weights {:?}", input.dims(), weights.dims()),
        );
    };
    if wc != c_in {
        return shape_err(
            "conv2d",
            format!("input has {c_in} channels, weights expect {wc}"),
        );
    }
    if bias.dims() != [c_out] {
        return shape_err(
            "conv2d",
            format!("bias {:?} for {c_out} outputs", bias.dims()),
        );
    }
    let (Some(h_out), Some(w_out)) = (
        conv_out_len(h_in, kh, spec.stride, spec.padding),
        conv_out_len(w_in, kw, spec.stride, spec.padding),
    ) else {
        return shape_err("conv2d", "kernel larger than padded input");
    };
    Ok(ConvShape {
        c_in,
        h_in,
        w_in,
        c_out,
        kh,
        kw,
        h_out,
        w_out,
    })
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + k - pad`
/// falls inside `[0, len_in)`.
fn valid_range(
    len_in: usize,
    len_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi = if len_in + pad > k {
        ((len_in + pad - k - 1) / stride + 1).min(len_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfold `input` into a `[C*kh*kw, h_out*w_out]` patch matrix, zero where the
/// kernel overhangs the padding.
fn im2col<T: Scalar>(x: &[T], s: &ConvShape, spec: Conv2dSpec) -> Vec<T> {
    let (stride, pad) = (spec.stride, spec.padding);
    let plane = s.h_out * s.w_out;
    let mut col = vec![T::zero(); s.c_in * s.kh * s.kw * plane];
    for c in 0..s.c_in {
        let in_plane = &x[c * s.h_in * s.w_in..(c + 1) * s.h_in * s.w_in];
        for ky in 0..s.kh {
            let (oy_lo, oy_hi) = valid_range(s.h_in, s.h_out, ky, stride, pad);
            for kx in 0..s.kw {
                let (ox_lo, ox_hi) = valid_range(s.w_in, s.w_out, kx, stride, pad);
                let r = (c * s.kh + ky) * s.kw + kx;
                let col_row = &mut col[r * plane..(r + 1) * plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let in_row = &in_plane[iy * s.w_in..(iy + 1) * s.w_in];
                    let dst = &mut col_row[oy * s.w_out + ox_lo..oy * s.w_out + ox_hi];
                    let ix0 = ox_lo * stride + kx - pad;
                    if stride == 1 {
                        dst.copy_from_slice(&in_row[ix0..ix0 + dst.len()]);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = in_row[ix0 + j * stride];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a patch-matrix gradient back onto the input grid.
fn col2im<T: Scalar>(col: &[T], s: &ConvShape, spec: Conv2dSpec, grad_in: &mut [T]) {
    let (stride, pad) = (spec.stride, spec.padding);
    let plane = s.h_out * s.w_out;
    for c in 0..s.c_in {
        let gi_plane = &mut grad_in[c * s.h_in * s.w_in..(c + 1) * s.h_in * s.w_in];
        for ky in 0..s.kh {
            let (oy_lo, oy_hi) = valid_range(s.h_in, s.h_out, ky, stride, pad);
            for kx in 0..s.kw {
                let (ox_lo, ox_hi) = valid_range(s.w_in, s.w_out, kx, stride, pad);
                let r = (c * s.kh + ky) * s.kw + kx;
                let col_row = &col[r * plane..(r + 1) * plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ky - pad;
                    let gi_row = &mut gi_plane[iy * s.w_in..(iy + 1) * s.w_in];
                    let src = &col_row[oy * s.w_out + ox_lo..oy * s.w_out + ox_hi];
                    let ix0 = ox_lo * stride + kx - pad;
                    if stride == 1 {
                        for (d, &v) in gi_row[ix0..ix0 + src.len()].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            gi_row[ix0 + j * stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(s: &ConvShape, spec: Conv2dSpec) -> bool {
    s.kh == 1 && s.kw == 1 && spec.stride == 1 && spec.padding == 0
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], a: T, x: &[T]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Dot product with eight independent partial sums (fixed order, so deterministic).
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] += a[i * 8 + l] * b[i * 8 + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Cross-correlation of `input [C,H,W]` with `weights [O,C,kh,kw]` plus `bias [O]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let s = conv_shape(input, weights, bias, spec)?;
    let plane = s.h_out * s.w_out;
    let k = s.c_in * s.kh * s.kw;
    let unfolded;
    let col: &[T] = if is_pointwise(&s, spec) {
        input.data()
    } else {
        unfolded = im2col(input.data(), &s, spec);
        &unfolded
    };
    let w = weights.data();
    let mut out = Tensor::zeros(&[s.c_out, s.h_out, s.w_out]);
    let out_data = out.data_mut();
    // Four output rows per pass so each patch row is loaded once per block.
    for (blk, out_blk) in out_data.chunks_mut(4 * plane).enumerate() {
        let o0 = blk * 4;
        let rows = out_blk.len() / plane;
        for (i, row) in out_blk.chunks_exact_mut(plane).enumerate() {
            row.fill(bias.data()[o0 + i]);
        }
        if rows == 4 {
            let (r0, rest) = out_blk.split_at_mut(plane);
            let (r1, rest) = rest.split_at_mut(plane);
            let (r2, r3) = rest.split_at_mut(plane);
            for r in 0..k {
                let c = &col[r * plane..(r + 1) * plane];
                let (w0, w1, w2, w3) = (
                    w[o0 * k + r],
                    w[(o0 + 1) * k + r],
                    w[(o0 + 2) * k + r],
                    w[(o0 + 3) * k + r],
                );
                for j in 0..plane {
                    let v = c[j];
                    r0[j] += w0 * v;
                    r1[j] += w1 * v;
                    r2[j] += w2 * v;
                    r3[j] += w3 * v;
                }
            }
        } else {
            for (i, row) in out_blk.chunks_exact_mut(plane).enumerate() {
                let wrow = &w[(o0 + i) * k..(o0 + i + 1) * k];
                for (r, &wv) in wrow.iter().enumerate() {
                    axpy(row, wv, &col[r * plane..(r + 1) * plane]);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`]. Accumulates into `grad_weights` and `grad_bias`;
/// returns the gradient with respect to the input when `want_input` is set.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: Conv2dSpec,
    grad_weights: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let bias_shape = Tensor::zeros(&[weights.dims().first().copied().unwrap_or(0)]);
    let s = conv_shape(input, weights, &bias_shape, spec)?;
    if grad_out.dims() != [s.c_out, s.h_out, s.w_out] {
        return shape_err("conv2d_backward", format!("grad_out {:?}", grad_out.dims()));
    }
    if grad_weights.dims() != weights.dims() || grad_bias.dims() != [s.c_out] {
        return shape_err(
            "conv2d_backward",
            "gradient buffers do not match parameters",
        );
    }
    let plane = s.h_out * s.w_out;
    let k = s.c_in * s.kh * s.kw;
    let pointwise = is_pointwise(&s, spec);
    let unfolded;
    let col: &[T] = if pointwise {
        input.data()
    } else {
        unfolded = im2col(input.data(), &s, spec);
        &unfolded
    };
    let w = weights.data();
    let g = grad_out.data();
    let gw = grad_weights.data_mut();
    for o in 0..s.c_out {
        let g_plane = &g[o * plane..(o + 1) * plane];
        grad_bias.data_mut()[o] += g_plane.iter().copied().sum::<T>();
        for r in 0..k {
            gw[o * k + r] += dot(g_plane, &col[r * plane..(r + 1) * plane]);
        }
    }
    if !want_input {
        return Ok(None);
    }
    let mut grad_col = vec![T::zero(); k * plane];
    for (r, gc) in grad_col.chunks_exact_mut(plane).enumerate() {
        for o in 0..s.c_out {
            let wv = w[o * k + r];
            if wv != T::zero() {
                axpy(gc, wv, &g[o * plane..(o + 1) * plane]);
            }
        }
    }
    if pointwise {
        return Ok(Some(Tensor::from_vec(input.dims(), grad_col)?));
    }
    let mut grad_in = Tensor::zeros(input.dims());
    col2im(&grad_col, &s, spec, grad_in.data_mut());
    Ok(Some(grad_in))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] given the forward *output*.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.dims() != grad_out.dims() {
        return shape_err(
            "relu_backward",
            format!("{:?} vs {:?}", output.dims(), grad_out.dims()),
        );
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(output.dims(), data)
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Source taps for one output coordinate of half-pixel-centred bilinear upsampling.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn upsample_taps<T: Scalar>(len_in: usize, factor: usize) -> Vec<Tap<T>> {
    let scale = 1.0 / factor as f64;
    (0..len_in * factor)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            Tap {
                i0,
                i1,
                frac: T::of_f64(src - i0 as f64),
            }
        })
        .collect()
}

fn check_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<(usize, usize, usize)> {
    if factor < 2 {
        return Err(TensorError::InvalidArgument(format!(
            "upsample factor must be >= 2, got {factor}"
        )));
    }
    match *input.dims() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => shape_err("bilinear_upsample", format!("input {:?}", input.dims())),
    }
}

/// Bilinear upsampling of `[C,H,W]` by an integer factor (align-corners off).
pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = check_upsample(input, factor)?;
    let rows = upsample_taps::<T>(h, factor);
    let cols = upsample_taps::<T>(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let x = input.data();
    for (ch, out_plane) in out.data_mut().chunks_exact_mut(ho * wo).enumerate() {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, ry) in rows.iter().enumerate() {
            let r0 = &src[ry.i0 * w..(ry.i0 + 1) * w];
            let r1 = &src[ry.i1 * w..(ry.i1 + 1) * w];
            let fy = ry.frac;
            for (ox, cx) in cols.iter().enumerate() {
                let fx = cx.frac;
                let top = r0[cx.i0] * (T::one() - fx) + r0[cx.i1] * fx;
                let bot = r1[cx.i0] * (T::one() - fx) + r1[cx.i1] * fx;
                out_plane[oy * wo + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Gradient of [`bilinear_upsample`] with respect to its input.
pub fn bilinear_upsample_backward<T: Scalar>(
    input_dims: &[usize],
    grad_out: &Tensor<T>,
    factor: usize,
) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(input_dims);
    let (c, h, w) = check_upsample(&probe, factor)?;
    let (ho, wo) = (h * factor, w * factor);
    if grad_out.dims() != [c, ho, wo] {
        return shape_err(
            "bilinear_upsample_backward",
            format!("{:?}", grad_out.dims()),
        );
    }
    let rows = upsample_taps::<T>(h, factor);
    let cols = upsample_taps::<T>(w, factor);
    let mut grad_in = probe;
    let g = grad_out.data();
    for (ch, gi) in grad_in.data_mut().chunks_exact_mut(h * w).enumerate() {
        let g_plane = &g[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, ry) in rows.iter().enumerate() {
            let fy = ry.frac;
            for (ox, cx) in cols.iter().enumerate() {
                let gv = g_plane[oy * wo + ox];
                if gv == T::zero() {
                    continue;
                }
                let fx = cx.frac;
                gi[ry.i0 * w + cx.i0] += gv * (T::one() - fy) * (T::one() - fx);
                gi[ry.i0 * w + cx.i1] += gv * (T::one() - fy) * fx;
                gi[ry.i1 * w + cx.i0] += gv * fy * (T::one() - fx);
                gi[ry.i1 * w + cx.i1] += gv * fy * fx;
            }
        }
    }
    Ok(grad_in)
}

/// `weights [out,in] · input [in] + bias [out]`.
pub fn linear<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (&[n_in], &[n_out, w_in]) = (input.dims(), weights.dims()) else {
        return shape_err(
            "linear",
            format!("input {:?} / weights {:?}", input.dims(), weights.dims()),
        );
    };
    if w_in != n_in || bias.dims() != [n_out] {
        return shape_err(
            "linear",
            format!("weights {:?} bias {:?}", weights.dims(), bias.dims()),
        );
    }
    let x = input.data();
    let data = weights
        .data()
        .chunks_exact(n_in)
        .zip(bias.data())
        .map(|(row, &b)| b + row.iter().zip(x).map(|(&a, &v)| a * v).sum::<T>())
        .collect();
    Tensor::from_vec(&[n_out], data)
}

/// Gradients of [`linear`]; accumulates parameter gradients, returns input gradient.
pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    grad_weights: &mut Tensor<T>,
    grad_bias: &mut Tensor<T>,
) -> Result<Tensor<T>> {
    let (&[n_in], &[n_out, _]) = (input.dims(), weights.dims()) else {
        return shape_err("linear_backward", format!("{:?}", input.dims()));
    };
    if grad_out.dims() != [n_out] || grad_weights.dims() != weights.dims() {
        return shape_err("linear_backward", format!("grad_out {:?}", grad_out.dims()));
    }
    let x = input.data();
    let mut grad_in = vec![T::zero(); n_in];
    for (o, &g) in grad_out.data().iter().enumerate() {
        grad_bias.data_mut()[o] += g;
        let w_row = &weights.data()[o * n_in..(o + 1) * n_in];
        let gw_row = &mut grad_weights.data_mut()[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            gw_row[i] += g * x[i];
            grad_in[i] += g * w_row[i];
        }
    }
    Tensor::from_vec(&[n_in], grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-loop evaluation of the cross-correlation definition.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let [c_in, h, wd] = *x.dims() else {
            unreachable!()
        };
        let [c_out, _, kh, kw] = *w.dims() else {
            unreachable!()
        };
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[c_out, ho, wo]);
        for o in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.at(&[o]);
                    for c in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[o, c, ky, kx]) * x.at(&[c, iy as usize, ix as usize]);
                            }
                        }
                    }
                    out.set(&[o, oy, ox], acc);
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 5, 6], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.set(&[c, c, 0, 0], 1.0);
        }
        let y = conv2d(&x, &w, &Tensor::zeros(&[3]), Conv2dSpec::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 7, 7], &mut rng);
        let w = Tensor::zeros(&[4, 2, 3, 3]);
        let b = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y = conv2d(&x, &w, &b, Conv2dSpec::new(2, 1)).unwrap();
        assert_eq!(y.dims(), &[4, 4, 4]);
        for o in 0..4 {
            for i in 0..16 {
                assert_eq!(y.data()[o * 16 + i], b.data()[o]);
            }
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad, k) in [
            (1, 1, 3),
            (2, 1, 3),
            (1, 0, 3),
            (2, 0, 1),
            (1, 2, 5),
            (2, 2, 3),
        ] {
            let x = random(&[5, 8, 8], &mut rng);
            let w = random(&[4, 5, k, k], &mut rng);
            let b = random(&[4], &mut rng);
            let fast = conv2d(&x, &w, &b, Conv2dSpec::new(stride, pad)).unwrap();
            let slow = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(fast.dims(), slow.dims());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!(
                    (a - e).abs() < 1e-5,
                    "stride {stride} pad {pad}: {a} vs {e}"
                );
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[3, 4, 4]);
        let w = Tensor::zeros(&[2, 4, 3, 3]);
        assert!(conv2d(&x, &w, &Tensor::zeros(&[2]), Conv2dSpec::new(1, 1)).is_err());
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[2, 3, 3, 3]),
            &Tensor::zeros(&[2]),
            Conv2dSpec::new(0, 1)
        )
        .is_err());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 3], 1.25);
        let y = bilinear_upsample(&x, 4).unwrap();
        assert_eq!(y.dims(), &[2, 12, 12]);
        assert!(y.data().iter().all(|&v| (v - 1.25).abs() < 1e-12));
        assert!((y.sum() - 16.0 * x.sum()).abs() < 1e-9);
    }

    #[test]
    fn upsample_ramp_by_hand() {
        // [[0, 1], [2, 3]] at factor 2. Source coordinates for the four output
        // positions along an axis are -0.25 (clamped to 0), 0.25, 0.75, 1.25
        // (clamped tap 1), so the per-axis weights on element 1 are 0, .25, .75, 1.
        let x = Tensor::<f64>::from_vec(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_upsample(&x, 2).unwrap();
        let axis = [0.0, 0.25, 0.75, 1.0];
        for oy in 0..4 {
            for ox in 0..4 {
                let expect = axis[ox] * 1.0 + axis[oy] * 2.0;
                assert!((y.at(&[0, oy, ox]) - expect).abs() < 1e-12);
            }
        }
        assert!(bilinear_upsample(&x, 1).is_err());
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 4], &mut rng);
        let g = random(&[2, 9, 12], &mut rng);
        let y = bilinear_upsample(&x, 3).unwrap();
        let gx = bilinear_upsample_backward(x.dims(), &g, 3).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f32), 0.5);
        assert!(sigmoid(-200.0f64) >= 0.0);
        assert!(sigmoid(200.0f32) <= 1.0);
        assert!(sigmoid(-50.0f32).is_finite());
    }

    #[test]
    fn linear_backward_matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3], &mut rng);
        let w = random(&[2, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let y = linear(&x, &w, &b).unwrap();
        let expect0 = b.at(&[0]) + (0..3).map(|i| w.at(&[0, i]) * x.at(&[i])).sum::<f64>();
        assert!((y.at(&[0]) - expect0).abs() < 1e-12);
        let mut gw = Tensor::zeros(&[2, 3]);
        let mut gb = Tensor::zeros(&[2]);
        let g = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let gx = linear_backward(&x, &w, &g, &mut gw, &mut gb).unwrap();
        assert!((gw.at(&[1, 2]) + 2.0 * x.at(&[2])).abs() < 1e-12);
        assert!((gx.at(&[0]) - (w.at(&[0, 0]) - 2.0 * w.at(&[1, 0]))).abs() < 1e-12);
        assert_eq!(gb.data(), &[1.0, -2.0]);
    }
}
