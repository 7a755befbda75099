//! Raw numeric kernels over row-major slices. Shapes are validated by the
//! tape before these are called.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// `floor((size + 2·padding − kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv2d_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || size + 2 * padding < kernel {
        return None;
    }
    Some((size + 2 * padding - kernel) / stride + 1)
}

/// Input row/column range touched by kernel offsets, as `(k_lo, k_hi)` such
/// that `o·stride + k − padding` stays in `[0, size)`.
#[inline]
fn kernel_range(o: usize, stride: usize, padding: usize, k: usize, size: usize) -> (usize, usize) {
    let base = (o * stride) as isize - padding as isize;
    let lo = (-base).max(0) as usize;
    let hi = ((size as isize - base).min(k as isize)).max(0) as usize;
    (lo.min(hi), hi)
}

/// Cross-correlation. Each output accumulates over `(c_in, kh, kw)` in that
/// order starting from zero, then adds the bias.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c_out * g.h_out * g.w_out];
    let in_plane = g.h * g.w;
    let k_plane = g.kh * g.kw;
    let out_plane = g.h_out * g.w_out;
    for n in 0..g.n {
        let xn = &x[n * g.c_in * in_plane..(n + 1) * g.c_in * in_plane];
        for co in 0..g.c_out {
            let wco = &wt[co * g.c_in * k_plane..(co + 1) * g.c_in * k_plane];
            let dst = &mut out[(n * g.c_out + co) * out_plane..(n * g.c_out + co + 1) * out_plane];
            for oh in 0..g.h_out {
                let (kh_lo, kh_hi) = kernel_range(oh, g.stride, g.padding, g.kh, g.h);
                for ow in 0..g.w_out {
                    let (kw_lo, kw_hi) = kernel_range(ow, g.stride, g.padding, g.kw, g.w);
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        let xc = &xn[ci * in_plane..(ci + 1) * in_plane];
                        let wc = &wco[ci * k_plane..(ci + 1) * k_plane];
                        for kh in kh_lo..kh_hi {
                            let ih = oh * g.stride + kh - g.padding;
                            let xrow = &xc[ih * g.w..(ih + 1) * g.w];
                            let wrow = &wc[kh * g.kw..(kh + 1) * g.kw];
                            for kw in kw_lo..kw_hi {
                                let iw = ow * g.stride + kw - g.padding;
                                acc += xrow[iw] * wrow[kw];
                            }
                        }
                    }
                    dst[oh * g.w_out + ow] = acc + bias[co];
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    wt: &[f64],
    grad_out: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let in_plane = g.h * g.w;
    let k_plane = g.kh * g.kw;
    let out_plane = g.h_out * g.w_out;
    let mut gx = need.0.then(|| vec![0.0; x.len()]);
    let mut gw = need.1.then(|| vec![0.0; wt.len()]);
    let mut gb = need.2.then(|| vec![0.0; g.c_out]);

    for n in 0..g.n {
        for co in 0..g.c_out {
            let go = &grad_out[(n * g.c_out + co) * out_plane..(n * g.c_out + co + 1) * out_plane];
            if let Some(gb) = gb.as_mut() {
                gb[co] += go.iter().sum::<f64>();
            }
            if gx.is_none() && gw.is_none() {
                continue;
            }
            for oh in 0..g.h_out {
                let (kh_lo, kh_hi) = kernel_range(oh, g.stride, g.padding, g.kh, g.h);
                for ow in 0..g.w_out {
                    let gval = go[oh * g.w_out + ow];
                    if gval == 0.0 {
                        continue;
                    }
                    let (kw_lo, kw_hi) = kernel_range(ow, g.stride, g.padding, g.kw, g.w);
                    for ci in 0..g.c_in {
                        let xbase = (n * g.c_in + ci) * in_plane;
                        let wbase = (co * g.c_in + ci) * k_plane;
                        for kh in kh_lo..kh_hi {
                            let ih = oh * g.stride + kh - g.padding;
                            for kw in kw_lo..kw_hi {
                                let iw = ow * g.stride + kw - g.padding;
                                let xi = xbase + ih * g.w + iw;
                                let wi = wbase + kh * g.kw + kw;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += gval * wt[wi];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[wi] += gval * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - m).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    out
}
