//! Raw convolution / pooling kernels on plain arrays (no tape).
//!
//! Dense convolution goes through im2col + GEMM so the matrix multiply
//! backend does the heavy lifting; the depthwise (cheap-operation) kernels
//! and pooling are direct loops over contiguous rows. All arrays are NCHW
//! and standard layout.

use ndarray::{Array2, Array4, Axis};

use super::Real;
use crate::error::{Error, Result};

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < kernel {
        return Err(Error::config(format!(
            "spatial dim {input} too small for kernel {kernel} with padding {pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

fn flat<T: Real>(a: &Array4<T>) -> &[T] {
    a.as_slice().expect("tensor must be standard layout")
}

/// Gather `(C*kh*kw, ho*wo)` patch columns for one batch element.
/// `cols` must be zero-filled by the caller (padding stays zero).
fn im2col<T: Real>(
    x: &[T],
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    cols: &mut Array2<T>,
) {
    let cols_s = cols.as_slice_mut().expect("cols layout");
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let (ow_lo, ow_hi) = valid_range(w, kx, stride, pad, wo);
                for oh in 0..ho {
                    let ih = oh * stride + ky;
                    if ih < pad || ih - pad >= h {
                        continue;
                    }
                    let x_row = &x[(c * h + (ih - pad)) * w..][..w];
                    let c_row = &mut cols_s[row * (ho * wo) + oh * wo..][..wo];
                    for ow in ow_lo..ow_hi {
                        c_row[ow] = x_row[ow * stride + kx - pad];
                    }
                }
            }
        }
    }
}

/// Scatter-add the im2col transpose: accumulate patch-column gradients
/// back into the input gradient for one batch element.
fn col2im_add<T: Real>(
    cols: &Array2<T>,
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let cols_s = cols.as_slice().expect("cols layout");
    for c in 0..c_in {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let (ow_lo, ow_hi) = valid_range(w, kx, stride, pad, wo);
                for oh in 0..ho {
                    let ih = oh * stride + ky;
                    if ih < pad || ih - pad >= h {
                        continue;
                    }
                    let dx_row = &mut dx[(c * h + (ih - pad)) * w..][..w];
                    let c_row = &cols_s[row * (ho * wo) + oh * wo..][..wo];
                    for ow in ow_lo..ow_hi {
                        dx_row[ow * stride + kx - pad] += c_row[ow];
                    }
                }
            }
        }
    }
}

/// Output columns `ow` for which `ow*stride + k - pad` lands inside `[0, dim)`.
fn valid_range(dim: usize, k: usize, stride: usize, pad: usize, out_dim: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if dim + pad > k { ((dim + pad - k - 1) / stride + 1).min(out_dim) } else { 0 };
    (lo.min(hi), hi)
}

/// Dense NCHW convolution, no bias. `w` is `(c_out, c_in, kh, kw)`.
pub fn conv2d_forward<T: Real>(
    x: &Array4<T>,
    w: &Array4<T>,
    stride: usize,
    pad: usize,
) -> Result<Array4<T>> {
    let (b, c_in, h, wd) = x.dim();
    let (c_out, wc_in, kh, kw) = w.dim();
    if c_in != wc_in {
        return Err(Error::config(format!(
            "conv input has {c_in} channels but kernel expects {wc_in}"
        )));
    }
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(wd, kw, stride, pad)?;
    let mut out = Array4::<T>::zeros((b, c_out, ho, wo));
    let k = c_in * kh * kw;
    let w2 = w.to_shape((c_out, k)).expect("weight layout");

    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        // 1x1 convolution: columns are the input itself.
        for bi in 0..b {
            let xb = x.index_axis(Axis(0), bi);
            let xm = xb.to_shape((c_in, h * wd)).expect("input layout");
            let mut ob = out.index_axis_mut(Axis(0), bi);
            let mut om = ob.view_mut().into_shape_with_order((c_out, ho * wo)).unwrap();
            ndarray::linalg::general_mat_mul(T::one(), &w2, &xm, T::zero(), &mut om);
        }
        return Ok(out);
    }

    let xs = flat(x);
    let mut cols = Array2::<T>::zeros((k, ho * wo));
    for bi in 0..b {
        cols.fill(T::zero());
        im2col(
            &xs[bi * c_in * h * wd..][..c_in * h * wd],
            (c_in, h, wd),
            (kh, kw),
            stride,
            pad,
            (ho, wo),
            &mut cols,
        );
        let mut ob = out.index_axis_mut(Axis(0), bi);
        let mut om = ob.view_mut().into_shape_with_order((c_out, ho * wo)).unwrap();
        ndarray::linalg::general_mat_mul(T::one(), &w2, &cols, T::zero(), &mut om);
    }
    Ok(out)
}

/// Gradient of a dense convolution w.r.t. its input.
pub fn conv2d_backward_input<T: Real>(
    w: &Array4<T>,
    grad_out: &Array4<T>,
    stride: usize,
    pad: usize,
    input_dim: (usize, usize, usize, usize),
) -> Array4<T> {
    let (b, c_in, h, wd) = input_dim;
    let (c_out, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = grad_out.dim();
    let k = c_in * kh * kw;
    let w2 = w.to_shape((c_out, k)).expect("weight layout");
    let mut dx = Array4::<T>::zeros(input_dim);
    let dxs = dx.as_slice_mut().unwrap();

    let mut dcols = Array2::<T>::zeros((k, ho * wo));
    for bi in 0..b {
        let gb = grad_out.index_axis(Axis(0), bi);
        let gm = gb.to_shape((c_out, ho * wo)).expect("grad layout");
        ndarray::linalg::general_mat_mul(T::one(), &w2.t(), &gm, T::zero(), &mut dcols);
        if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
            let dst = &mut dxs[bi * c_in * h * wd..][..c_in * h * wd];
            for (d, s) in dst.iter_mut().zip(dcols.as_slice().unwrap()) {
                *d += *s;
            }
        } else {
            col2im_add(
                &dcols,
                (c_in, h, wd),
                (kh, kw),
                stride,
                pad,
                (ho, wo),
                &mut dxs[bi * c_in * h * wd..][..c_in * h * wd],
            );
        }
    }
    dx
}

/// Gradient of a dense convolution w.r.t. its kernel.
pub fn conv2d_backward_weights<T: Real>(
    x: &Array4<T>,
    grad_out: &Array4<T>,
    stride: usize,
    pad: usize,
    weight_dim: (usize, usize, usize, usize),
) -> Array4<T> {
    let (b, c_in, h, wd) = x.dim();
    let (c_out, _, kh, kw) = weight_dim;
    let (_, _, ho, wo) = grad_out.dim();
    let k = c_in * kh * kw;
    let mut dw2 = Array2::<T>::zeros((c_out, k));

    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        for bi in 0..b {
            let gb = grad_out.index_axis(Axis(0), bi);
            let gm = gb.to_shape((c_out, ho * wo)).expect("grad layout");
            let xb = x.index_axis(Axis(0), bi);
            let xm = xb.to_shape((c_in, h * wd)).expect("input layout");
            ndarray::linalg::general_mat_mul(T::one(), &gm, &xm.t(), T::one(), &mut dw2);
        }
    } else {
        let xs = flat(x);
        let mut cols = Array2::<T>::zeros((k, ho * wo));
        for bi in 0..b {
            cols.fill(T::zero());
            im2col(
                &xs[bi * c_in * h * wd..][..c_in * h * wd],
                (c_in, h, wd),
                (kh, kw),
                stride,
                pad,
                (ho, wo),
                &mut cols,
            );
            let gb = grad_out.index_axis(Axis(0), bi);
            let gm = gb.to_shape((c_out, ho * wo)).expect("grad layout");
            ndarray::linalg::general_mat_mul(T::one(), &gm, &cols.t(), T::one(), &mut dw2);
        }
    }
    dw2.into_shape_with_order(weight_dim).unwrap()
}

/// Depthwise convolution with channel multiplier. `w` is `(c_in, mult, kh, kw)`;
/// output channel `c*mult + m` is produced from input channel `c` alone.
pub fn depthwise_forward<T: Real>(
    x: &Array4<T>,
    w: &Array4<T>,
    stride: usize,
    pad: usize,
) -> Result<Array4<T>> {
    let (b, c_in, h, wd) = x.dim();
    let (wc, mult, kh, kw) = w.dim();
    if c_in != wc {
        return Err(Error::config(format!(
            "depthwise input has {c_in} channels but kernel expects {wc}"
        )));
    }
    let ho = conv_out_dim(h, kh, stride, pad)?;
    let wo = conv_out_dim(wd, kw, stride, pad)?;
    let mut out = Array4::<T>::zeros((b, c_in * mult, ho, wo));
    let xs = flat(x);
    let os = out.as_slice_mut().unwrap();
    let ws = flat(w);

    for bi in 0..b {
        for c in 0..c_in {
            let x_ch = &xs[(bi * c_in + c) * h * wd..][..h * wd];
            for m in 0..mult {
                let co = c * mult + m;
                let o_ch = &mut os[(bi * c_in * mult + co) * ho * wo..][..ho * wo];
                let w_k = &ws[(c * mult + m) * kh * kw..][..kh * kw];
                for oh in 0..ho {
                    let o_row = &mut o_ch[oh * wo..][..wo];
                    for ky in 0..kh {
                        let ih = oh * stride + ky;
                        if ih < pad || ih - pad >= h {
                            continue;
                        }
                        let x_row = &x_ch[(ih - pad) * wd..][..wd];
                        for kx in 0..kw {
                            let wv = w_k[ky * kw + kx];
                            let (lo, hi) = valid_range(wd, kx, stride, pad, wo);
                            for ow in lo..hi {
                                o_row[ow] += wv * x_row[ow * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_backward_input<T: Real>(
    w: &Array4<T>,
    grad_out: &Array4<T>,
    stride: usize,
    pad: usize,
    input_dim: (usize, usize, usize, usize),
) -> Array4<T> {
    let (b, c_in, h, wd) = input_dim;
    let (_, mult, kh, kw) = w.dim();
    let (_, _, ho, wo) = grad_out.dim();
    let mut dx = Array4::<T>::zeros(input_dim);
    let dxs = dx.as_slice_mut().unwrap();
    let gs = flat(grad_out);
    let ws = flat(w);

    for bi in 0..b {
        for c in 0..c_in {
            let dx_ch = &mut dxs[(bi * c_in + c) * h * wd..][..h * wd];
            for m in 0..mult {
                let co = c * mult + m;
                let g_ch = &gs[(bi * c_in * mult + co) * ho * wo..][..ho * wo];
                let w_k = &ws[(c * mult + m) * kh * kw..][..kh * kw];
                for oh in 0..ho {
                    let g_row = &g_ch[oh * wo..][..wo];
                    for ky in 0..kh {
                        let ih = oh * stride + ky;
                        if ih < pad || ih - pad >= h {
                            continue;
                        }
                        let dx_row = &mut dx_ch[(ih - pad) * wd..][..wd];
                        for kx in 0..kw {
                            let wv = w_k[ky * kw + kx];
                            let (lo, hi) = valid_range(wd, kx, stride, pad, wo);
                            for ow in lo..hi {
                                dx_row[ow * stride + kx - pad] += wv * g_row[ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn depthwise_backward_weights<T: Real>(
    x: &Array4<T>,
    grad_out: &Array4<T>,
    stride: usize,
    pad: usize,
    weight_dim: (usize, usize, usize, usize),
) -> Array4<T> {
    let (b, c_in, h, wd) = x.dim();
    let (_, mult, kh, kw) = weight_dim;
    let (_, _, ho, wo) = grad_out.dim();
    let mut dw = Array4::<T>::zeros(weight_dim);
    let dws = dw.as_slice_mut().unwrap();
    let xs = flat(x);
    let gs = flat(grad_out);

    for bi in 0..b {
        for c in 0..c_in {
            let x_ch = &xs[(bi * c_in + c) * h * wd..][..h * wd];
            for m in 0..mult {
                let co = c * mult + m;
                let g_ch = &gs[(bi * c_in * mult + co) * ho * wo..][..ho * wo];
                let dw_k = &mut dws[(c * mult + m) * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let (lo, hi) = valid_range(wd, kx, stride, pad, wo);
                        let mut acc = T::zero();
                        for oh in 0..ho {
                            let ih = oh * stride + ky;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let x_row = &x_ch[(ih - pad) * wd..][..wd];
                            let g_row = &g_ch[oh * wo..][..wo];
                            for ow in lo..hi {
                                acc += x_row[ow * stride + kx - pad] * g_row[ow];
                            }
                        }
                        dw_k[ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the flat
/// input index of each selected element (first maximum wins on ties).
pub fn maxpool2_forward<T: Real>(x: &Array4<T>) -> Result<(Array4<T>, Vec<u32>)> {
    let (b, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::usage(format!("max pooling needs even spatial dims, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Array4::<T>::zeros((b, c, ho, wo));
    let mut idx = vec![0u32; b * c * ho * wo];
    let xs = flat(x);
    let os = out.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let x_ch = &xs[bc * h * w..][..h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let base = (2 * oh) * w + 2 * ow;
                let cands = [base, base + 1, base + w, base + w + 1];
                let mut best = cands[0];
                for &cand in &cands[1..] {
                    if x_ch[cand] > x_ch[best] {
                        best = cand;
                    }
                }
                let o = (bc * ho + oh) * wo + ow;
                os[o] = x_ch[best];
                idx[o] = (bc * h * w + best) as u32;
            }
        }
    }
    Ok((out, idx))
}

pub fn maxpool2_backward<T: Real>(
    grad_out: &Array4<T>,
    idx: &[u32],
    input_dim: (usize, usize, usize, usize),
) -> Array4<T> {
    let mut dx = Array4::<T>::zeros(input_dim);
    let dxs = dx.as_slice_mut().unwrap();
    for (g, &i) in flat(grad_out).iter().zip(idx) {
        dxs[i as usize] += *g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::<T>::zeros((b, c, 2 * h, 2 * w));
    let xs = flat(x);
    let os = out.as_slice_mut().unwrap();
    for bc in 0..b * c {
        for ih in 0..h {
            let x_row = &xs[(bc * h + ih) * w..][..w];
            for dy in 0..2 {
                let o_row = &mut os[(bc * 2 * h + 2 * ih + dy) * 2 * w..][..2 * w];
                for iw in 0..w {
                    o_row[2 * iw] = x_row[iw];
                    o_row[2 * iw + 1] = x_row[iw];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(grad_out: &Array4<T>) -> Array4<T> {
    let (b, c, h2, w2) = grad_out.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    let gs = flat(grad_out);
    let dxs = dx.as_slice_mut().unwrap();
    for bc in 0..b * c {
        for ih in 0..h {
            let dx_row = &mut dxs[(bc * h + ih) * w..][..w];
            for dy in 0..2 {
                let g_row = &gs[(bc * h2 + 2 * ih + dy) * w2..][..w2];
                for iw in 0..w {
                    dx_row[iw] += g_row[2 * iw] + g_row[2 * iw + 1];
                }
            }
        }
    }
    dx
}
