//! Slice-level kernels: convolution, ReLU, nearest upsampling, softmax
//! cross-entropy. Tensors are channel-major `(c, h, w)` buffers.

use crate::grid::IGNORE_LABEL;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output positions `o` in `[lo, hi)` for which `o * stride + tap - padding`
    /// lands inside `[0, len)`.
    fn valid(&self, tap: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = tap as isize - self.padding as isize;
        // o * s + shift >= 0  and  o * s + shift <= len - 1
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi_incl = (len as isize - 1 - shift).div_euclid(s);
        let hi = (hi_incl + 1).clamp(0, out_len as isize);
        (lo as usize, (hi as usize).max(lo as usize))
    }

    fn source(&self, o: usize, tap: usize) -> usize {
        o * self.stride + tap - self.padding
    }
}

pub fn conv_forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w, k) = (g.in_h, g.in_w, g.kernel);
    let mut out = vec![0.0; g.out_channels * oh * ow];
    for co in 0..g.out_channels {
        let out_plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        out_plane.fill(bias[co]);
        for ci in 0..g.in_channels {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = g.valid(ky, h, oh);
                for kx in 0..k {
                    let wv = weight[((co * g.in_channels + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid(kx, w, ow);
                    if x0 >= x1 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = g.source(oy, ky);
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        let out_row = &mut out_plane[oy * ow + x0..oy * ow + x1];
                        if g.stride == 1 {
                            let ix0 = x0 + kx - g.padding;
                            for (o, i) in out_row.iter_mut().zip(&in_row[ix0..ix0 + (x1 - x0)]) {
                                *o += wv * i;
                            }
                        } else {
                            for (j, o) in out_row.iter_mut().enumerate() {
                                *o += wv * in_row[g.source(x0 + j, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`. `grad_input` is skipped
/// (`None`) when `need_input` is false.
pub fn conv_backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w, k) = (g.in_h, g.in_w, g.kernel);
    let mut grad_in = need_input.then(|| vec![0.0; g.in_channels * h * w]);
    let mut grad_w = vec![0.0; weight.len()];
    let mut grad_b = vec![0.0; g.out_channels];
    for co in 0..g.out_channels {
        let go_plane = &grad_out[co * oh * ow..(co + 1) * oh * ow];
        grad_b[co] = go_plane.iter().sum();
        for ci in 0..g.in_channels {
            let in_plane = &input[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = g.valid(ky, h, oh);
                for kx in 0..k {
                    let widx = ((co * g.in_channels + ci) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (x0, x1) = g.valid(kx, w, ow);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = g.source(oy, ky);
                        let go_row = &go_plane[oy * ow + x0..oy * ow + x1];
                        if g.stride == 1 {
                            let ix0 = x0 + kx - g.padding;
                            let in_row = &in_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            acc += go_row.iter().zip(in_row).map(|(a, b)| a * b).sum::<f64>();
                            if let Some(gi) = grad_in.as_mut() {
                                let gi_row = &mut gi[ci * h * w + iy * w + ix0..ci * h * w + iy * w + ix0 + (x1 - x0)];
                                for (d, go) in gi_row.iter_mut().zip(go_row) {
                                    *d += wv * go;
                                }
                            }
                        } else {
                            for (j, go) in go_row.iter().enumerate() {
                                let ix = g.source(x0 + j, kx);
                                acc += go * in_plane[iy * w + ix];
                                if let Some(gi) = grad_in.as_mut() {
                                    gi[ci * h * w + iy * w + ix] += wv * go;
                                }
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

pub fn relu_forward(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&v| v.max(0.0)).collect()
}

/// Subgradient 0 at the kink.
pub fn relu_backward(input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

pub fn upsample_forward(input: &[f64], (c, h, w): (usize, usize, usize), factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            let row = &input[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
            for x in 0..ow {
                out.push(row[x / factor]);
            }
        }
    }
    out
}

pub fn upsample_backward(grad_out: &[f64], (c, h, w): (usize, usize, usize), factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let mut grad = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                grad[(ch * h + y / factor) * w + x / factor] += grad_out[(ch * oh + y) * ow + x];
            }
        }
    }
    grad
}

/// Per-pixel softmax cross-entropy over `k` class planes, averaged over the
/// pixels whose label is not [`IGNORE_LABEL`].
///
/// Returns `(mean loss, gradient w.r.t. logits, counted pixels)`.
pub fn softmax_cross_entropy(logits: &[f64], k: usize, labels: &[u32]) -> (f64, Vec<f64>, usize) {
    let plane = labels.len();
    debug_assert_eq!(logits.len(), k * plane);
    let mut grad = vec![0.0; logits.len()];
    let counted = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if counted == 0 {
        return (0.0, grad, 0);
    }
    let scale = 1.0 / counted as f64;
    let mut loss = 0.0;
    let mut probs = vec![0.0; k];
    for (p, &label) in labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let max = (0..k).map(|c| logits[c * plane + p]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (c, prob) in probs.iter_mut().enumerate() {
            *prob = (logits[c * plane + p] - max).exp();
            total += *prob;
        }
        loss += total.ln() + max - logits[label as usize * plane + p];
        for (c, prob) in probs.iter().enumerate() {
            let onehot = if c == label as usize { 1.0 } else { 0.0 };
            grad[c * plane + p] = (prob / total - onehot) * scale;
        }
    }
    (loss * scale, grad, counted)
}

/// Class with the largest logit per pixel; ties go to the lower class id.
pub fn argmax_classes(logits: &[f64], k: usize) -> Vec<u32> {
    let plane = logits.len() / k;
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if logits[c * plane + p] > logits[best * plane + p] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}
