//! Direct 2D convolution kernels.
//!
//! All three kernels share one geometry: input `[N, Ci, H, W]`, weight
//! `[Co, Ci, KH, KW]`, symmetric zero padding `pad` and stride `stride`.
//! A transposed convolution is expressed through the same three kernels with
//! the roles of input and output swapped.
//!
//! An optional spatial tap mask (`KH * KW` booleans) removes kernel taps
//! entirely: masked taps are skipped rather than multiplied by zero, so
//! masked inputs can never perturb an output bit.

use crate::Tensor;

/// Output extent of a strided convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "kernel {kernel} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Output extent of a strided transposed convolution along one axis.
pub fn conv_transpose_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    ((input - 1) * stride + kernel)
        .checked_sub(2 * pad)
        .expect("transposed convolution padding exceeds output")
}

/// Range of output positions `o` with `0 <= o * stride + tap - pad < in_len`.
#[inline]
fn valid_range(
    tap: usize,
    pad: usize,
    stride: usize,
    in_len: usize,
    out_len: usize,
) -> (usize, usize) {
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    if in_len + pad <= tap {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - tap) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[inline]
fn tap_active(mask: Option<&[bool]>, idx: usize) -> bool {
    mask.is_none_or(|m| m[idx])
}

pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    mask: Option<&[bool]>,
) -> Tensor {
    let (n, ci, h, wd) = x.dims4();
    let (co, wci, kh, kw) = w.dims4();
    assert_eq!(
        ci, wci,
        "conv2d: input has {ci} channels, weight expects {wci}"
    );
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wd, kw, stride, pad);
    let xd = x.data();
    let wdata = w.data();
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            let plane = &mut out[(b * co + o) * ho * wo..(b * co + o + 1) * ho * wo];
            if let Some(bias) = bias {
                plane.fill(bias.data()[o]);
            }
            for c in 0..ci {
                let xin = &xd[(b * ci + c) * h * wd..(b * ci + c + 1) * h * wd];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, ho);
                    for kx in 0..kw {
                        if !tap_active(mask, ky * kw + kx) {
                            continue;
                        }
                        let wv = wdata[((o * ci + c) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, wd, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let row_out = &mut plane[oy * wo..(oy + 1) * wo];
                            let row_in = &xin[iy * wd..(iy + 1) * wd];
                            if stride == 1 {
                                let off = ox_lo + kx - pad;
                                let n_ox = ox_hi - ox_lo;
                                for (dst, src) in row_out[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(&row_in[off..off + n_ox])
                                {
                                    *dst += wv * src;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    row_out[ox] += wv * row_in[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out)
}

/// Gradient of `conv2d_forward` with respect to its input; equivalently the
/// forward pass of a transposed convolution with weight `[Co, Ci, KH, KW]`
/// mapping `Co` channels to `Ci` channels.
pub fn conv2d_backward_input(
    gy: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    mask: Option<&[bool]>,
    in_h: usize,
    in_w: usize,
) -> Tensor {
    let (n, co, ho, wo) = gy.dims4();
    let (wco, ci, kh, kw) = w.dims4();
    assert_eq!(
        co, wco,
        "conv2d_backward_input: gradient has {co} channels, weight expects {wco}"
    );
    let gyd = gy.data();
    let wdata = w.data();
    let mut gx = vec![0.0; n * ci * in_h * in_w];
    for b in 0..n {
        for c in 0..ci {
            let plane = &mut gx[(b * ci + c) * in_h * in_w..(b * ci + c + 1) * in_h * in_w];
            for o in 0..co {
                let g = &gyd[(b * co + o) * ho * wo..(b * co + o + 1) * ho * wo];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, in_h, ho);
                    for kx in 0..kw {
                        if !tap_active(mask, ky * kw + kx) {
                            continue;
                        }
                        let wv = wdata[((o * ci + c) * kh + ky) * kw + kx];
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, in_w, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let row_in = &mut plane[iy * in_w..(iy + 1) * in_w];
                            let row_g = &g[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                let off = ox_lo + kx - pad;
                                let n_ox = ox_hi - ox_lo;
                                for (dst, src) in
                                    row_in[off..off + n_ox].iter_mut().zip(&row_g[ox_lo..ox_hi])
                                {
                                    *dst += wv * src;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    row_in[ox * stride + kx - pad] += wv * row_g[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, ci, in_h, in_w], gx)
}

/// Gradient of `conv2d_forward` with respect to its weight.
pub fn conv2d_backward_weight(
    gy: &Tensor,
    x: &Tensor,
    stride: usize,
    pad: usize,
    mask: Option<&[bool]>,
    kh: usize,
    kw: usize,
) -> Tensor {
    let (n, co, ho, wo) = gy.dims4();
    let (xn, ci, h, wd) = x.dims4();
    assert_eq!(n, xn, "conv2d_backward_weight: batch mismatch");
    let gyd = gy.data();
    let xd = x.data();
    let mut gw = vec![0.0; co * ci * kh * kw];
    for o in 0..co {
        for c in 0..ci {
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, ho);
                for kx in 0..kw {
                    if !tap_active(mask, ky * kw + kx) {
                        continue;
                    }
                    let (ox_lo, ox_hi) = valid_range(kx, pad, stride, wd, wo);
                    let mut acc = 0.0;
                    for b in 0..n {
                        let g = &gyd[(b * co + o) * ho * wo..(b * co + o + 1) * ho * wo];
                        let xin = &xd[(b * ci + c) * h * wd..(b * ci + c + 1) * h * wd];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let row_g = &g[oy * wo..(oy + 1) * wo];
                            let row_in = &xin[iy * wd..(iy + 1) * wd];
                            for ox in ox_lo..ox_hi {
                                acc += row_g[ox] * row_in[ox * stride + kx - pad];
                            }
                        }
                    }
                    gw[((o * ci + c) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    Tensor::new(&[co, ci, kh, kw], gw)
}

/// Per-channel sum of a `[N, C, H, W]` tensor (the bias gradient).
pub fn channel_sums(gy: &Tensor) -> Tensor {
    let (n, c, h, w) = gy.dims4();
    let mut out = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            out[ch] += gy.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w]
                .iter()
                .sum::<f64>();
        }
    }
    Tensor::new(&[c], out)
}
