//! Non-convolution layers: ReLU, max pooling, softmax and the multinomial
//! logistic loss, plus the L2 weight penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pooled_extent, DepthMap, FeatureMap, LabelMap};

pub fn relu_forward(x: &FeatureMap) -> FeatureMap {
    x.map(|v| v.max(0.0))
}

/// Masks `grad` wherever the cached input was not strictly positive.
pub fn relu_backward(grad: &FeatureMap, cached_input: &FeatureMap) -> Result<FeatureMap> {
    if grad.dims() != cached_input.dims() {
        return Err(Error::Shape(format!(
            "relu gradient {:?} vs cached input {:?}",
            grad.dims(),
            cached_input.dims()
        )));
    }
    let values = grad
        .values()
        .iter()
        .zip(cached_input.values())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    FeatureMap::from_vec(grad.channels(), grad.height(), grad.width(), values)
}

/// Winning input offset for every pooled output, used to route gradients.
#[derive(Debug, Clone)]
pub struct PoolCache {
    input_dims: (usize, usize, usize),
    argmax: Vec<usize>,
    min_gap: f64,
}

impl PoolCache {
    /// Smallest difference between a window's winner and its runner-up.
    pub fn min_gap(&self) -> f64 {
        self.min_gap
    }

    /// `(row, col)` of the input pixel that won output `(r, m, n)`.
    pub fn winner(
        &self,
        r: usize,
        m: usize,
        n: usize,
        out_h: usize,
        out_w: usize,
    ) -> (usize, usize) {
        let (_, h, w) = self.input_dims;
        let idx = self.argmax[(r * out_h + m) * out_w + n] - r * h * w;
        (idx / w, idx % w)
    }
}

/// Per-channel window max, with the depth map pooled on the same grid.
///
/// Ties go to the first pixel in row-major order.
pub fn maxpool_forward(
    x: &FeatureMap,
    depth: &DepthMap,
    window: usize,
    stride: usize,
) -> Result<(FeatureMap, DepthMap, PoolCache)> {
    let (c, h, w) = x.dims();
    if (depth.height(), depth.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "depth map {}x{} does not match pooling input {h}x{w}",
            depth.height(),
            depth.width()
        )));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Config(
            "pooling window and stride must be at least 1".into(),
        ));
    }
    let out_h = pooled_extent(h, window, stride)?;
    let out_w = pooled_extent(w, window, stride)?;
    let mut out = FeatureMap::zeros(c, out_h, out_w);
    let mut argmax = Vec::with_capacity(c * out_h * out_w);
    let mut min_gap = f64::INFINITY;
    for r in 0..c {
        for om in 0..out_h {
            for on in 0..out_w {
                let (m0, n0) = (om * stride, on * stride);
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for m in m0..(m0 + window).min(h) {
                    for n in n0..(n0 + window).min(w) {
                        let v = x.get(r, m, n);
                        if v > best {
                            second = best;
                            best = v;
                            best_idx = x.offset(r, m, n);
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                min_gap = min_gap.min(best - second);
                out.set(r, om, on, best);
                argmax.push(best_idx);
            }
        }
    }
    let pooled_depth = depth.pool(window, stride)?;
    Ok((
        out,
        pooled_depth,
        PoolCache {
            input_dims: (c, h, w),
            argmax,
            min_gap,
        },
    ))
}

/// Sends each pooled gradient back to the input pixel that won its window.
pub fn maxpool_backward(grad: &FeatureMap, cache: &PoolCache) -> Result<FeatureMap> {
    if grad.values().len() != cache.argmax.len() {
        return Err(Error::Shape(format!(
            "pool gradient has {} values, cache expects {}",
            grad.values().len(),
            cache.argmax.len()
        )));
    }
    let (c, h, w) = cache.input_dims;
    let mut out = FeatureMap::zeros(c, h, w);
    let values = out.values_mut();
    for (&idx, &g) in cache.argmax.iter().zip(grad.values()) {
        values[idx] += g;
    }
    Ok(out)
}

/// Per-pixel softmax over channels, computed after subtracting the pixel's
/// maximum logit.
pub fn softmax(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = x.dims();
    let mut out = FeatureMap::zeros(c, h, w);
    for m in 0..h {
        for n in 0..w {
            let max = (0..c)
                .map(|r| x.get(r, m, n))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for r in 0..c {
                let e = (x.get(r, m, n) - max).exp();
                out.set(r, m, n, e);
                denom += e;
            }
            for r in 0..c {
                out.set(r, m, n, out.get(r, m, n) / denom);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Divide the summed log loss by `h · w`.
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Weight decay factor on the L2 penalty.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub ignore_label: Option<usize>,
}

fn default_true() -> bool {
    true
}

fn default_lambda() -> f64 {
    0.0005
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            normalize: true,
            lambda: default_lambda(),
            ignore_label: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda {} must be non-negative",
                self.lambda
            )));
        }
        Ok(())
    }

    fn ignores(&self, labels: &LabelMap, label: usize) -> bool {
        labels.is_ignored(label) || self.ignore_label == Some(label)
    }
}

/// Multinomial logistic loss of softmax output `prob` against `labels`.
///
/// Returns the loss and its gradient with respect to the pre-softmax logits,
/// `(prob − onehot) / N` on counted pixels and zero on ignored ones, where
/// `N` is `h · w` when normalizing and 1 otherwise.
pub fn logistic_loss(
    prob: &FeatureMap,
    labels: &LabelMap,
    cfg: &LossConfig,
) -> Result<(f64, FeatureMap)> {
    let (c, h, w) = prob.dims();
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "labels {}x{} do not match predictions {h}x{w}",
            labels.height(),
            labels.width()
        )));
    }
    let scale = if cfg.normalize {
        1.0 / (h * w) as f64
    } else {
        1.0
    };
    let mut loss = 0.0;
    let mut grad = FeatureMap::zeros(c, h, w);
    for m in 0..h {
        for n in 0..w {
            let label = labels.get(m, n);
            if cfg.ignores(labels, label) {
                continue;
            }
            if label >= c {
                return Err(Error::LabelOutOfRange { label, classes: c });
            }
            loss -= prob.get(label, m, n).ln();
            for r in 0..c {
                let target = if r == label { 1.0 } else { 0.0 };
                grad.set(r, m, n, (prob.get(r, m, n) - target) * scale);
            }
        }
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("logistic loss {loss}")));
    }
    Ok((loss, grad))
}

/// `½ Σ W²` over every weight slice, so that its gradient is exactly `W`.
pub fn l2_penalty<'a>(weights: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    0.5 * weights
        .into_iter()
        .flat_map(|w| w.iter())
        .map(|v| v * v)
        .sum::<f64>()
}
