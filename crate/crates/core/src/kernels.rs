//! Raw forward/backward loops over flat buffers. Shapes are validated by the
//! callers in `autodiff`; everything here assumes consistent dimensions.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Output index range `[lo, hi)` along one axis for kernel offset `k` such
    /// that the sampled input coordinate `o * stride + k - padding` is in bounds.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = k as isize - self.padding as isize;
        // smallest o with o*s + shift >= 0
        let lo = if shift >= 0 {
            0
        } else {
            ((-shift) + s - 1) / s
        };
        // largest o with o*s + shift <= extent - 1
        let top = extent as isize - 1 - shift;
        if top < 0 {
            return (0, 0);
        }
        let hi = (top / s + 1).min(out_extent as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }
}

/// Cross-correlation, no kernel flip.
pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.height * g.width;
    let mut out = vec![0.0; g.out_channels * out_plane];
    for o in 0..g.out_channels {
        let dst = &mut out[o * out_plane..(o + 1) * out_plane];
        dst.fill(bias[o]);
        for c in 0..g.in_channels {
            let src = &input[c * in_plane..(c + 1) * in_plane];
            for ky in 0..g.kernel_h {
                let (y0, y1) = g.valid_range(ky, g.height, g.out_h);
                for kx in 0..g.kernel_w {
                    let (x0, x1) = g.valid_range(kx, g.width, g.out_w);
                    if x0 >= x1 {
                        continue;
                    }
                    let w = kernels[((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx];
                    for y in y0..y1 {
                        let iy = y * g.stride + ky - g.padding;
                        let row = &src[iy * g.width..(iy + 1) * g.width];
                        let out_row = &mut dst[y * g.out_w..(y + 1) * g.out_w];
                        if g.stride == 1 {
                            let ix0 = x0 + kx - g.padding;
                            let src_seg = &row[ix0..ix0 + (x1 - x0)];
                            for (d, s) in out_row[x0..x1].iter_mut().zip(src_seg) {
                                *d += w * s;
                            }
                        } else {
                            for x in x0..x1 {
                                out_row[x] += w * row[x * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a convolution. Each output is only computed when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    upstream: &[f64],
    want: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.height * g.width;
    let mut grad_in = want[0].then(|| vec![0.0; input.len()]);
    let mut grad_k = want[1].then(|| vec![0.0; kernels.len()]);
    let grad_b = want[2].then(|| {
        (0..g.out_channels)
            .map(|o| upstream[o * out_plane..(o + 1) * out_plane].iter().sum())
            .collect()
    });
    if grad_in.is_none() && grad_k.is_none() {
        return (None, None, grad_b);
    }
    for o in 0..g.out_channels {
        let up = &upstream[o * out_plane..(o + 1) * out_plane];
        for c in 0..g.in_channels {
            for ky in 0..g.kernel_h {
                let (y0, y1) = g.valid_range(ky, g.height, g.out_h);
                for kx in 0..g.kernel_w {
                    let (x0, x1) = g.valid_range(kx, g.width, g.out_w);
                    if x0 >= x1 {
                        continue;
                    }
                    let k_idx = ((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx;
                    let w = kernels[k_idx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y * g.stride + ky - g.padding;
                        let up_row = &up[y * g.out_w..(y + 1) * g.out_w];
                        let base = c * in_plane + iy * g.width;
                        if g.stride == 1 {
                            let ix0 = x0 + kx - g.padding;
                            let n = x1 - x0;
                            let up_seg = &up_row[x0..x1];
                            if grad_k.is_some() {
                                let src = &input[base + ix0..base + ix0 + n];
                                acc += src.iter().zip(up_seg).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gi) = grad_in.as_mut() {
                                for (d, u) in gi[base + ix0..base + ix0 + n].iter_mut().zip(up_seg)
                                {
                                    *d += w * u;
                                }
                            }
                        } else {
                            for x in x0..x1 {
                                let ix = x * g.stride + kx - g.padding;
                                acc += input[base + ix] * up_row[x];
                                if let Some(gi) = grad_in.as_mut() {
                                    gi[base + ix] += w * up_row[x];
                                }
                            }
                        }
                    }
                    if let Some(gk) = grad_k.as_mut() {
                        gk[k_idx] += acc;
                    }
                }
            }
        }
    }
    (grad_in, grad_k, grad_b)
}

/// 2x2 max-pool with stride 2. Returns the output and, per output cell, the
/// flat input index of the winning cell (first in row-major scan on ties).
pub(crate) fn max_pool2d_forward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best_idx = ch * h * w + (2 * y) * w + 2 * x;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn upsample2d_forward(input: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = input[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2d_backward(upstream: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                grad[(ch * h + y / 2) * w + x / 2] += upstream[(ch * oh + y) * ow + x];
            }
        }
    }
    grad
}

/// `weights` is `[m, n]` row-major.
pub(crate) fn dense_forward(input: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = input.len();
    bias.iter()
        .enumerate()
        .map(|(i, b)| {
            let row = &weights[i * n..(i + 1) * n];
            row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_with_stride_and_padding() {
        let g = ConvGeometry {
            in_channels: 1,
            height: 5,
            width: 5,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            padding: 1,
            out_h: 3,
            out_w: 3,
        };
        // offset 0 samples o*2 - 1: valid for o in 1..3
        assert_eq!(g.valid_range(0, 5, 3), (1, 3));
        // offset 2 samples o*2 + 1: valid for o in 0..2 (o=2 -> 5 out of range)
        assert_eq!(g.valid_range(2, 5, 3), (0, 2));
    }
}
