//! Reference implementations used only by tests. Each one is written from the
//! defining formula with plain loops and shares no code path with the crate.

#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

use std::collections::HashSet;

use geopool::micronet::layers::softmax_cross_entropy;
use geopool::micronet::{backward, forward, Architecture, ForwardCache, LayerSpec, ModelParams};
use geopool::pooling::Provenance;
use geopool::{FeatureMap, Rng};

/// Gi* for a row-major `side × side` window, transcribed term by term:
/// centroid, distance weights, mean, population std, then the ratio.
pub fn gi_star_oracle(values: &[f64], side: usize) -> f64 {
    let n = side * side;
    assert_eq!(values.len(), n);
    let mut px = vec![0.0; n];
    let mut py = vec![0.0; n];
    for row in 0..side {
        for col in 0..side {
            px[row * side + col] = col as f64;
            py[row * side + col] = row as f64;
        }
    }
    let cx = px.iter().sum::<f64>() / n as f64;
    let cy = py.iter().sum::<f64>() / n as f64;
    let mut w = vec![0.0; n];
    for j in 0..n {
        w[j] = ((cx - px[j]) * (cx - px[j]) + (cy - py[j]) * (cy - py[j])).sqrt();
    }
    let nf = n as f64;
    let mut sum_x = 0.0;
    for j in 0..n {
        sum_x += values[j];
    }
    let x_bar = sum_x / nf;
    let mut sum_x2 = 0.0;
    for j in 0..n {
        sum_x2 += values[j] * values[j];
    }
    let radicand = sum_x2 / nf - x_bar * x_bar;
    let s = if radicand > 0.0 { radicand.sqrt() } else { 0.0 };
    if values.iter().all(|&v| v == values[0]) || s == 0.0 {
        return 0.0;
    }
    let mut sum_wx = 0.0;
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    for j in 0..n {
        sum_wx += w[j] * values[j];
        sum_w += w[j];
        sum_w2 += w[j] * w[j];
    }
    let numerator = sum_wx - x_bar * sum_w;
    let geometric = (nf * sum_w2 - sum_w * sum_w) / (nf - 1.0);
    if geometric <= 0.0 {
        return 0.0;
    }
    numerator / (s * geometric.sqrt())
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / got.abs().max(want.abs())
    }
}

pub fn random_map(rng: &mut Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.normal()).unwrap()
}

/// Window values at output cell `(oy, ox)` of channel `c`, row-major.
pub fn window_at(map: &FeatureMap, c: usize, oy: usize, ox: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            out.push(map.get(c, oy * k + dy, ox * k + dx));
        }
    }
    out
}

pub fn max_pool_oracle(map: &FeatureMap, k: usize) -> Vec<f64> {
    let (c, h, w) = map.shape();
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..h / k {
            for ox in 0..w / k {
                let vals = window_at(map, ch, oy, ox, k);
                out.push(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    out
}

pub fn avg_pool_oracle(map: &FeatureMap, k: usize) -> Vec<f64> {
    let (c, h, w) = map.shape();
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..h / k {
            for ox in 0..w / k {
                let vals = window_at(map, ch, oy, ox, k);
                let mut s = 0.0;
                for v in &vals {
                    s += v;
                }
                out.push(s / vals.len() as f64);
            }
        }
    }
    out
}

/// Mean of the central 2×2 block of every 4×4 window.
pub fn center_map_oracle(map: &FeatureMap) -> Vec<f64> {
    let (c, h, w) = map.shape();
    let mut out = Vec::new();
    for ch in 0..c {
        for oy in 0..h / 4 {
            for ox in 0..w / 4 {
                let v = window_at(map, ch, oy, ox, 4);
                out.push((v[5] + v[6] + v[9] + v[10]) / 4.0);
            }
        }
    }
    out
}

/// IoU per class from explicit pixel-index sets; `None` for classes absent
/// from both.
pub fn iou_oracle(pred: &[u32], truth: &[u32], k: usize) -> (Vec<Option<f64>>, f64) {
    let mut ious = Vec::new();
    for class in 0..k as u32 {
        let p: HashSet<usize> = pred
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let t: HashSet<usize> = truth
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let union = p.union(&t).count();
        if union == 0 {
            ious.push(None);
        } else {
            ious.push(Some(p.intersection(&t).count() as f64 / union as f64));
        }
    }
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    (ious, correct as f64 / pred.len() as f64)
}

/// Direct 2-D convolution (cross-correlation) with zero padding.
pub fn conv_oracle(
    input: &[f64],
    (cin, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                            acc += wv * input[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

/// Central difference of `f` at `x` along every coordinate.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Every discrete choice made by a forward pass: the sign of each ReLU
/// input and the provenance of each pooled cell.
pub fn decisions(arch: &Architecture, cache: &ForwardCache) -> (Vec<bool>, Vec<Provenance>) {
    let mut signs = Vec::new();
    let mut prov = Vec::new();
    for (i, layer) in arch.layers().iter().enumerate() {
        match layer {
            LayerSpec::Relu => signs.extend(cache.layer_input(i).unwrap().data().iter().map(|&v| v > 0.0)),
            LayerSpec::Pool { .. } => prov.extend_from_slice(cache.pool_result(i).unwrap().provenance()),
            _ => {}
        }
    }
    (signs, prov)
}

/// Summed pixel cross-entropy, so gradients are not shrunk by the pixel count.
pub fn summed_loss(
    params: &ModelParams,
    arch: &Architecture,
    image: &FeatureMap,
    labels: &[u32],
) -> (f64, FeatureMap, ForwardCache) {
    let (logits, cache) = forward(params, arch, image).unwrap();
    let (c, h, w) = logits.shape();
    let (loss, grad, n) = softmax_cross_entropy(logits.data(), c, labels);
    let grad = FeatureMap::from_vec(c, h, w, grad.iter().map(|g| g * n as f64).collect()).unwrap();
    (loss * n as f64, grad, cache)
}

/// Cross-entropy of every pixel, by log-sum-exp on the raw logits.
pub fn pixel_losses(
    params: &ModelParams,
    arch: &Architecture,
    image: &FeatureMap,
    labels: &[u32],
) -> (Vec<f64>, ForwardCache) {
    let (logits, cache) = forward(params, arch, image).unwrap();
    let (k, h, w) = logits.shape();
    let n = h * w;
    let losses = (0..n)
        .map(|i| {
            let z: Vec<f64> = (0..k).map(|c| logits.data()[c * n + i]).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - z[labels[i] as usize]
        })
        .collect();
    (losses, cache)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdAudit {
    pub checked: usize,
    /// Coordinates whose ±h probes changed a ReLU sign or pool decision.
    pub rejected: usize,
    pub max_rel_err: f64,
}

/// Central differences of the summed loss for the chosen `(tensor, index)`
/// coordinates, compared against `backward`. Differences are taken per pixel
/// before summing; subtracting two totals of a few hundred loses about three
/// digits on small gradients.
pub fn network_fd_audit(
    arch: &Architecture,
    params: &ModelParams,
    image: &FeatureMap,
    labels: &[u32],
    coords: &[(usize, usize)],
    h: f64,
) -> FdAudit {
    let (_, grad_logits, cache) = summed_loss(params, arch, image, labels);
    let base = decisions(arch, &cache);
    let analytic = backward(params, arch, &cache, &grad_logits).unwrap();
    let mut audit = FdAudit::default();
    let mut probe = params.clone();
    for &(t, i) in coords {
        let orig = probe.tensors()[t].data[i];
        let mut eval = |v: f64| {
            probe.tensors_mut()[t].data[i] = v;
            let (losses, cache) = pixel_losses(&probe, arch, image, labels);
            (losses, decisions(arch, &cache) == base)
        };
        let (up, same_up) = eval(orig + h);
        let (down, same_down) = eval(orig - h);
        probe.tensors_mut()[t].data[i] = orig;
        if !(same_up && same_down) {
            audit.rejected += 1;
            continue;
        }
        let numeric = up.iter().zip(&down).map(|(u, d)| u - d).sum::<f64>() / (2.0 * h);
        let err = rel_err(analytic.tensors[t][i], numeric);
        audit.max_rel_err = audit.max_rel_err.max(err);
        audit.checked += 1;
    }
    audit
}

/// All coordinates of every tensor.
pub fn all_coords(params: &ModelParams) -> Vec<(usize, usize)> {
    params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.data.len()).map(move |i| (t, i)))
        .collect()
}

/// `per_tensor` random coordinates from each tensor (all of a smaller one).
pub fn sampled_coords(params: &ModelParams, per_tensor: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, p) in params.tensors().iter().enumerate() {
        let mut idx: Vec<usize> = (0..p.data.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(per_tensor);
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| (t, i)));
    }
    out
}

pub fn random_labels(rng: &mut Rng, n: usize, k: usize) -> Vec<u32> {
    (0..n).map(|_| rng.below(k) as u32).collect()
}
