//! Straight-line reference implementations used as test oracles. None of
//! these call into the code paths they check.

#![allow(dead_code, clippy::needless_range_loop)]

use dam_core::{DepthMap, FeatureMap, SparsityMap, WeightTensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_weights(
    rng: &mut ChaCha8Rng,
    t: usize,
    c: usize,
    kh: usize,
    kw: usize,
) -> WeightTensor {
    let values = (0..t * c * kh * kw)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    WeightTensor::from_vec(t, c, kh, kw, values).unwrap()
}

pub fn random_bias(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    (0..t).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

pub fn random_sparsity(
    rng: &mut ChaCha8Rng,
    c: usize,
    h: usize,
    w: usize,
    max: usize,
) -> SparsityMap {
    let s = (0..c * h * w).map(|_| rng.gen_range(1..=max)).collect();
    SparsityMap::from_vec(c, h, w, s).unwrap()
}

pub fn random_depth(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> DepthMap {
    DepthMap::from_vec(h, w, (0..h * w).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn read(x: &FeatureMap, r: usize, m: i64, n: i64) -> Option<f64> {
    let (_, h, w) = x.dims();
    if m < 0 || n < 0 || m >= h as i64 || n >= w as i64 {
        None
    } else {
        Some(x.values()[(r * h + m as usize) * w + n as usize])
    }
}

fn weight(w: &WeightTensor, t: usize, r: usize, i: usize, j: usize) -> f64 {
    let (c, kh, kw) = (w.in_channels(), w.kernel_h(), w.kernel_w());
    w.values()[((t * c + r) * kh + i) * kw + j]
}

/// Textbook dilated convolution with zero padding and no activation.
pub fn dense_conv(x: &FeatureMap, w: &WeightTensor, b: &[f64], dilation: usize) -> FeatureMap {
    let (c, h, wd) = x.dims();
    let (kh, kw) = (w.kernel_h(), w.kernel_w());
    let (ch, cw) = ((kh / 2) as i64, (kw / 2) as i64);
    let d = dilation as i64;
    let mut out = Vec::new();
    for t in 0..w.out_channels() {
        for m in 0..h as i64 {
            for n in 0..wd as i64 {
                let mut acc = b[t];
                for r in 0..c {
                    for i in 0..kh {
                        for j in 0..kw {
                            let mm = m + d * (i as i64 - ch);
                            let nn = n + d * (j as i64 - cw);
                            acc += weight(w, t, r, i, j) * read(x, r, mm, nn).unwrap_or(0.0);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    FeatureMap::from_vec(w.out_channels(), h, wd, out).unwrap()
}

/// Per-pixel, per-channel spacing convolution. In difference mode each tap
/// reads `x[tap] − x[center]`, and a tap outside the map contributes zero.
/// Returns pre-activations.
pub fn adaptive_conv(
    x: &FeatureMap,
    w: &WeightTensor,
    b: &[f64],
    s: &SparsityMap,
    diff: bool,
) -> FeatureMap {
    let (c, h, wd) = x.dims();
    let (kh, kw) = (w.kernel_h(), w.kernel_w());
    let (ch, cw) = ((kh / 2) as i64, (kw / 2) as i64);
    let mut out = Vec::new();
    for t in 0..w.out_channels() {
        for m in 0..h {
            for n in 0..wd {
                let mut acc = b[t];
                for r in 0..c {
                    let sp = s.get(r, m, n) as i64;
                    let center = read(x, r, m as i64, n as i64).unwrap();
                    for i in 0..kh {
                        for j in 0..kw {
                            let mm = m as i64 + sp * (i as i64 - ch);
                            let nn = n as i64 + sp * (j as i64 - cw);
                            let v = match read(x, r, mm, nn) {
                                Some(v) if diff => v - center,
                                Some(v) => v,
                                None => 0.0,
                            };
                            acc += weight(w, t, r, i, j) * v;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    FeatureMap::from_vec(w.out_channels(), h, wd, out).unwrap()
}

/// Central difference of `f` at `x` along one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// The seven segmentation scores from a row-major confusion matrix (rows
/// are true classes), evaluated term by term.
pub struct BruteMetrics {
    pub pixel_accuracy: f64,
    pub mean_accuracy: f64,
    pub mean_iou: f64,
    pub fw_iou: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn brute_metrics(counts: &[u64], c: usize) -> BruteMetrics {
    let n = |i: usize, j: usize| counts[i * c + j] as f64;
    let t: Vec<f64> = (0..c).map(|i| (0..c).map(|j| n(i, j)).sum()).collect();
    let total: f64 = t.iter().sum();
    let pa = (0..c).map(|i| n(i, i)).sum::<f64>() / total;
    let present: Vec<usize> = (0..c).filter(|&i| t[i] > 0.0).collect();
    let ma = present.iter().map(|&i| n(i, i) / t[i]).sum::<f64>() / present.len() as f64;
    let mut ious = Vec::new();
    let mut fw = 0.0;
    for i in 0..c {
        let predicted_i: f64 = (0..c).map(|j| n(j, i)).sum();
        let denom = t[i] + predicted_i - n(i, i);
        if denom > 0.0 {
            ious.push(n(i, i) / denom);
            fw += t[i] * n(i, i) / denom;
        }
    }
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    let (mut precision, mut recall, mut f1) = (None, None, None);
    if c == 2 {
        let (tp, fp, fn_) = (n(1, 1), n(0, 1), n(1, 0));
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        precision = Some(p);
        recall = Some(r);
        f1 = Some(if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        });
    }
    BruteMetrics {
        pixel_accuracy: pa,
        mean_accuracy: ma,
        mean_iou: miou,
        fw_iou: fw / total,
        precision,
        recall,
        f1,
    }
}

/// Momentum SGD written out per scalar: `W ← W + μ·Δ − γ·g`, `Δ ← W_new − W_old`.
pub fn sgd_replay(w0: &[f64], grads: &[Vec<f64>], mu: f64, lrs: &[f64]) -> Vec<f64> {
    let mut w = w0.to_vec();
    let mut delta = vec![0.0; w.len()];
    for (g, &lr) in grads.iter().zip(lrs) {
        for k in 0..w.len() {
            let next = w[k] + mu * delta[k] - lr * g[k];
            delta[k] = next - w[k];
            w[k] = next;
        }
    }
    w
}
