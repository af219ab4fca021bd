//! Layer stacks built from a declarative [`NetworkSpec`].
//!
//! The network threads the depth map alongside the activations: every max
//! pooling stage pools the depth map on the same grid, so each convolution
//! sees a depth map with exactly its input's spatial extent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dam::{Activation, ConvCache, DamConv, MultiscaleParams, Spacing, DEFAULT_S_MAX};
use crate::error::{Error, Result};
use crate::layers::{
    l2_penalty, logistic_loss, maxpool_backward, maxpool_forward, softmax, LossConfig, PoolCache,
};
use crate::optim::SgdState;
use crate::tensor::{DepthMap, FeatureMap, LabelMap, WeightTensor};

/// Kernel extent: `3` for 3×3 or `[1, 3]` for a 1×3 row kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSize {
    Square(usize),
    Rect([usize; 2]),
}

impl KernelSize {
    pub fn dims(self) -> (usize, usize) {
        match self {
            KernelSize::Square(k) => (k, k),
            KernelSize::Rect([h, w]) => (h, w),
        }
    }
}

fn default_kernel() -> KernelSize {
    KernelSize::Square(3)
}
fn default_scales() -> Vec<f64> {
    vec![1.0]
}
fn default_one() -> usize {
    1
}
fn default_s_max() -> usize {
    DEFAULT_S_MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Depth-adaptive convolution. `s_r` lists one scaling factor per
    /// contiguous channel group of the layer input.
    DamConv {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: KernelSize,
        #[serde(default = "default_scales")]
        s_r: Vec<f64>,
        #[serde(default = "default_one")]
        q: usize,
        #[serde(default = "default_s_max")]
        s_max: usize,
        #[serde(default)]
        depth_diff: bool,
        #[serde(default)]
        activation: Activation,
    },
    /// Convolution with one fixed dilation everywhere (1 = dense).
    ConvDense {
        out_channels: usize,
        #[serde(default = "default_kernel")]
        kernel: KernelSize,
        #[serde(default = "default_one")]
        dilation: usize,
        #[serde(default)]
        depth_diff: bool,
        #[serde(default)]
        activation: Activation,
    },
    Maxpool {
        window: usize,
        stride: usize,
    },
    SoftmaxLoss(LossConfig),
}

/// How raw depth becomes the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// One channel holding depth in meters.
    #[default]
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    #[serde(default = "default_one")]
    pub channels: usize,
    #[serde(default)]
    pub source: InputSource,
}

impl Default for InputSpec {
    fn default() -> Self {
        Self {
            channels: 1,
            source: InputSource::Depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default)]
    pub input: InputSpec,
    /// Training-set mean depth (mm) used by every depth-adaptive layer.
    #[serde(default = "default_mean_depth")]
    pub mean_depth: f64,
    pub layers: Vec<LayerSpec>,
}

fn default_mean_depth() -> f64 {
    1000.0
}

impl NetworkSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn loss(&self) -> Option<&LossConfig> {
        match self.layers.last() {
            Some(LayerSpec::SoftmaxLoss(cfg)) => Some(cfg),
            _ => None,
        }
    }

    /// Checks the structural rules and returns the number of classes.
    pub fn validate(&self) -> Result<usize> {
        let losses = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::SoftmaxLoss(_)))
            .count();
        if losses != 1 || self.loss().is_none() {
            return Err(Error::Config(
                "the layer list must end with exactly one softmax_loss".into(),
            ));
        }
        self.loss().unwrap().validate()?;
        if !(self.mean_depth > 0.0 && self.mean_depth.is_finite()) {
            return Err(Error::Config(format!(
                "mean_depth {} must be positive",
                self.mean_depth
            )));
        }
        if self.input.channels == 0 {
            return Err(Error::Config("input must have at least one channel".into()));
        }
        let mut channels = self.input.channels;
        let mut seen_conv = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::DamConv {
                    out_channels,
                    kernel,
                    depth_diff,
                    s_r,
                    q,
                    s_max,
                    ..
                } => {
                    check_conv(i, *out_channels, *kernel, *depth_diff, seen_conv)?;
                    if s_r.is_empty() || !channels.is_multiple_of(s_r.len()) {
                        return Err(Error::Config(format!(
                            "layer {i}: {channels} input channels cannot be split into {} scale groups",
                            s_r.len()
                        )));
                    }
                    if *q == 0 || *s_max == 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: q and s_max must be at least 1"
                        )));
                    }
                    channels = *out_channels;
                    seen_conv = true;
                }
                LayerSpec::ConvDense {
                    out_channels,
                    kernel,
                    depth_diff,
                    dilation,
                    ..
                } => {
                    check_conv(i, *out_channels, *kernel, *depth_diff, seen_conv)?;
                    if *dilation == 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: dilation must be at least 1"
                        )));
                    }
                    channels = *out_channels;
                    seen_conv = true;
                }
                LayerSpec::Maxpool { window, stride } => {
                    if *window == 0 || *stride == 0 {
                        return Err(Error::Config(format!(
                            "layer {i}: pooling window and stride must be ≥ 1"
                        )));
                    }
                }
                LayerSpec::SoftmaxLoss(_) => {}
            }
        }
        if !seen_conv {
            return Err(Error::Config("network has no convolution layer".into()));
        }
        if channels < 2 {
            return Err(Error::Config(
                "the last convolution must output at least two classes".into(),
            ));
        }
        Ok(channels)
    }
}

fn check_conv(
    i: usize,
    out_channels: usize,
    kernel: KernelSize,
    depth_diff: bool,
    seen_conv: bool,
) -> Result<()> {
    let (kh, kw) = kernel.dims();
    if out_channels == 0 {
        return Err(Error::Config(format!(
            "layer {i}: out_channels must be at least 1"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!(
            "layer {i}: kernel {kh}x{kw} must have odd extents"
        )));
    }
    if depth_diff && seen_conv {
        return Err(Error::Config(format!(
            "layer {i}: depth_diff is only allowed on the first convolution"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { conv: DamConv, spacing: Spacing },
    Pool { window: usize, stride: usize },
}

/// One training or evaluation example. `labels` are at input resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: FeatureMap,
    pub depth: DepthMap,
    pub labels: LabelMap,
}

enum LayerCache {
    Conv(ConvCache),
    Pool(PoolCache),
}

/// Everything [`Network::backward`] needs from a forward pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    pub logits: FeatureMap,
    /// Depth map handed to each layer, in layer order.
    pub depths: Vec<DepthMap>,
}

/// Gradients for every convolution layer (data term only) and the input.
#[derive(Debug, Clone)]
pub struct NetGrads {
    /// `(weights, bias)` per convolution, in layer order.
    pub convs: Vec<(WeightTensor, Vec<f64>)>,
    pub input: FeatureMap,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: u64,
    /// Total loss `e_a + λ·e_b`.
    pub loss: f64,
    pub data_loss: f64,
    pub reg_loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_score: Option<f64>,
    /// Seconds spent in the step. Kept out of serialized logs so that runs
    /// with the same seed produce identical files.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    loss: LossConfig,
    classes: usize,
}

impl Network {
    /// Builds the stack with seeded uniform(−a, a) weights, `a = sqrt(3 / fan_in)`,
    /// and zero biases.
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let classes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut channels = spec.input.channels;
        let mut pool_product = 1usize;
        for layer in &spec.layers {
            match layer {
                LayerSpec::DamConv {
                    out_channels,
                    kernel,
                    s_r,
                    q,
                    s_max,
                    depth_diff,
                    activation,
                } => {
                    let conv = random_conv(
                        &mut rng,
                        channels,
                        *out_channels,
                        *kernel,
                        *activation,
                        *depth_diff,
                    )?;
                    let params = MultiscaleParams::grouped(
                        s_r,
                        channels,
                        spec.mean_depth,
                        pool_product,
                        *q,
                        *s_max,
                    )?;
                    layers.push(Layer::Conv {
                        conv,
                        spacing: Spacing::Adaptive(params),
                    });
                    channels = *out_channels;
                }
                LayerSpec::ConvDense {
                    out_channels,
                    kernel,
                    dilation,
                    depth_diff,
                    activation,
                } => {
                    let conv = random_conv(
                        &mut rng,
                        channels,
                        *out_channels,
                        *kernel,
                        *activation,
                        *depth_diff,
                    )?;
                    layers.push(Layer::Conv {
                        conv,
                        spacing: Spacing::Fixed(*dilation),
                    });
                    channels = *out_channels;
                }
                LayerSpec::Maxpool { window, stride } => {
                    layers.push(Layer::Pool {
                        window: *window,
                        stride: *stride,
                    });
                    pool_product *= stride;
                }
                LayerSpec::SoftmaxLoss(_) => {}
            }
        }
        let net = Self {
            spec: spec.clone(),
            layers,
            loss: *spec.loss().expect("validated"),
            classes,
        };
        net.assert_pool_products();
        Ok(net)
    }

    fn assert_pool_products(&self) {
        let mut product = 1;
        for layer in &self.layers {
            match layer {
                Layer::Pool { stride, .. } => product *= stride,
                Layer::Conv {
                    spacing: Spacing::Adaptive(p),
                    ..
                } => assert_eq!(
                    p.pool_product(),
                    product,
                    "pool product out of sync with layer stack"
                ),
                Layer::Conv { .. } => {}
            }
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_channels(&self) -> usize {
        self.spec.input.channels
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn mean_depth(&self) -> f64 {
        self.spec.mean_depth
    }

    /// Replaces the mean depth in every depth-adaptive layer, leaving weights alone.
    pub fn set_mean_depth(&mut self, mean_depth: f64) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.mean_depth = mean_depth;
        spec.validate()?;
        for layer in &mut self.layers {
            if let Layer::Conv {
                spacing: Spacing::Adaptive(p),
                ..
            } = layer
            {
                *p = MultiscaleParams::new(
                    p.scales().to_vec(),
                    mean_depth,
                    p.pool_product(),
                    p.q(),
                    p.s_max(),
                )?;
            }
        }
        self.spec = spec;
        Ok(())
    }

    pub fn convs(&self) -> impl Iterator<Item = &DamConv> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv { conv, .. } => Some(conv),
            Layer::Pool { .. } => None,
        })
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut DamConv> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv { conv, .. } => Some(conv),
            Layer::Pool { .. } => None,
        })
    }

    /// Length of every parameter slice, in [`parameters_mut`](Self::parameters_mut) order.
    pub fn param_shapes(&self) -> Vec<usize> {
        self.convs()
            .flat_map(|c| [c.weights.values().len(), c.bias.len()])
            .collect()
    }

    /// Weights then bias of each convolution, in layer order.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for conv in self.convs_mut() {
            let DamConv { weights, bias, .. } = conv;
            out.push(weights.values_mut());
            out.push(bias.as_mut_slice());
        }
        out
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        self.convs()
            .flat_map(|c| [c.weights.values(), c.bias.as_slice()])
            .collect()
    }

    /// `λ · ½ Σ W²` over convolution weights (biases carry no penalty).
    pub fn reg_loss(&self) -> f64 {
        self.loss.lambda * l2_penalty(self.convs().map(|c| c.weights.values()))
    }

    /// Spatial extent of the output for an input of the given extent.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (height, width);
        for layer in &self.layers {
            if let Layer::Pool { window, stride } = layer {
                h = crate::tensor::pooled_extent(h, *window, *stride)?;
                w = crate::tensor::pooled_extent(w, *window, *stride)?;
            }
        }
        Ok((h, w))
    }

    /// Smallest ReLU pre-activation magnitude and smallest max-pool winning
    /// margin seen in `cache`, for keeping finite-difference probes away
    /// from kinks.
    pub fn kink_margin(&self, cache: &ForwardCache) -> f64 {
        let mut margin = f64::INFINITY;
        for (layer, lc) in self.layers.iter().zip(&cache.layers) {
            match (layer, lc) {
                (Layer::Conv { conv, .. }, LayerCache::Conv(c))
                    if conv.activation == Activation::Relu =>
                {
                    for &v in c.pre_activation.values() {
                        margin = margin.min(v.abs());
                    }
                }
                (Layer::Pool { .. }, LayerCache::Pool(c)) => margin = margin.min(c.min_gap()),
                _ => {}
            }
        }
        margin
    }

    /// Brings input-resolution labels onto the output grid.
    pub fn output_labels(&self, labels: &LabelMap) -> Result<LabelMap> {
        let mut out = labels.clone();
        for layer in &self.layers {
            if let Layer::Pool { window, stride } = layer {
                out = out.subsample(*window, *stride)?;
            }
        }
        Ok(out)
    }

    /// Runs every layer and the softmax, returning class probabilities.
    pub fn forward_all(
        &self,
        input: &FeatureMap,
        depth: &DepthMap,
    ) -> Result<(FeatureMap, ForwardCache)> {
        if input.channels() != self.input_channels() {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                self.input_channels(),
                input.channels()
            )));
        }
        if (depth.height(), depth.width()) != (input.height(), input.width()) {
            return Err(Error::Shape(format!(
                "depth map {}x{} does not match input {}x{}",
                depth.height(),
                depth.width(),
                input.height(),
                input.width()
            )));
        }
        let mut x = input.clone();
        let mut d = depth.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut depths = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            assert_eq!(
                (d.height(), d.width()),
                (x.height(), x.width()),
                "depth map drifted from activations at layer {i}"
            );
            depths.push(d.clone());
            match layer {
                Layer::Conv { conv, spacing } => {
                    let sparsity = spacing
                        .sparsity(x.channels(), &d)
                        .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
                    let (y, cache) = conv
                        .forward(&x, &sparsity)
                        .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
                    caches.push(LayerCache::Conv(cache));
                    x = y;
                }
                Layer::Pool { window, stride } => {
                    let (y, pooled, cache) = maxpool_forward(&x, &d, *window, *stride)
                        .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
                    caches.push(LayerCache::Pool(cache));
                    x = y;
                    d = pooled;
                }
            }
        }
        if x.channels() != self.classes {
            return Err(Error::Shape(format!(
                "final layer produced {} channels for {} classes",
                x.channels(),
                self.classes
            )));
        }
        let prob = softmax(&x);
        Ok((
            prob,
            ForwardCache {
                layers: caches,
                logits: x,
                depths,
            },
        ))
    }

    /// Backpropagates `∂e_a/∂logits` through every layer. Weight gradients
    /// exclude the decay term.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &FeatureMap) -> Result<NetGrads> {
        let mut grad = grad_logits.clone();
        let mut convs = Vec::new();
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            match (layer, lc) {
                (Layer::Conv { conv, .. }, LayerCache::Conv(c)) => {
                    let g = conv.backward(c, &grad, 0.0)?;
                    convs.push((g.weights, g.bias));
                    grad = g.input;
                }
                (Layer::Pool { .. }, LayerCache::Pool(c)) => {
                    grad = maxpool_backward(&grad, c)?;
                }
                _ => unreachable!("cache layout follows layer layout"),
            }
        }
        convs.reverse();
        Ok(NetGrads { convs, input: grad })
    }

    /// Data loss `e_a` of one sample and its gradients.
    pub fn sample_gradients(&self, sample: &Sample) -> Result<(f64, NetGrads)> {
        let (prob, cache) = self.forward_all(&sample.input, &sample.depth)?;
        let labels = self.output_labels(&sample.labels)?;
        let (loss, grad_logits) = logistic_loss(&prob, &labels, &self.loss)?;
        let grads = self.backward(&cache, &grad_logits)?;
        Ok((loss, grads))
    }

    /// Total loss `e_a + λ·e_b` of one sample.
    pub fn total_loss(&self, sample: &Sample) -> Result<f64> {
        let (prob, _) = self.forward_all(&sample.input, &sample.depth)?;
        let labels = self.output_labels(&sample.labels)?;
        let (loss, _) = logistic_loss(&prob, &labels, &self.loss)?;
        Ok(loss + self.reg_loss())
    }

    /// Mean data-loss gradient over the batch plus `λW`, in
    /// [`parameters_mut`](Self::parameters_mut) order, and the mean data loss.
    pub fn batch_gradients(&self, batch: &[Sample]) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::Config("training batch is empty".into()));
        }
        let per_sample: Vec<(f64, NetGrads)> = batch
            .par_iter()
            .map(|s| self.sample_gradients(s))
            .collect::<Result<_>>()?;
        let scale = 1.0 / batch.len() as f64;
        let mut total: Vec<Vec<f64>> = self
            .param_shapes()
            .into_iter()
            .map(|n| vec![0.0; n])
            .collect();
        let mut data_loss = 0.0;
        // summed in batch order so results do not depend on thread scheduling
        for (loss, grads) in &per_sample {
            data_loss += loss * scale;
            for (k, (gw, gb)) in grads.convs.iter().enumerate() {
                for (acc, g) in total[2 * k].iter_mut().zip(gw.values()) {
                    *acc += g * scale;
                }
                for (acc, g) in total[2 * k + 1].iter_mut().zip(gb) {
                    *acc += g * scale;
                }
            }
        }
        let lambda = self.loss.lambda;
        for (k, conv) in self.convs().enumerate() {
            for (acc, w) in total[2 * k].iter_mut().zip(conv.weights.values()) {
                *acc += lambda * w;
            }
        }
        Ok((data_loss, total))
    }

    /// One optimizer step on the batch mean gradient.
    pub fn train_step(&mut self, batch: &[Sample], opt: &mut SgdState) -> Result<TrainRecord> {
        let started = std::time::Instant::now();
        let (data_loss, grads) = self.batch_gradients(batch)?;
        let reg_loss = self.reg_loss();
        let loss = data_loss + reg_loss;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "iteration {}: loss {loss} (data {data_loss}, reg {reg_loss})",
                opt.iter
            )));
        }
        let iter = opt.iter;
        let lr = opt.current_lr();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        opt.step(&mut self.parameters_mut(), &grad_refs)?;
        Ok(TrainRecord {
            iter,
            loss,
            data_loss,
            reg_loss,
            lr,
            val_score: None,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }

    /// Per-pixel argmax class at output resolution (ties go to the lower class).
    pub fn predict(&self, input: &FeatureMap, depth: &DepthMap) -> Result<LabelMap> {
        let (prob, _) = self.forward_all(input, depth)?;
        let (c, h, w) = prob.dims();
        let mut labels = Vec::with_capacity(h * w);
        for m in 0..h {
            for n in 0..w {
                let mut best = 0;
                for r in 1..c {
                    if prob.get(r, m, n) > prob.get(best, m, n) {
                        best = r;
                    }
                }
                labels.push(best);
            }
        }
        LabelMap::new(h, w, labels, None)
    }
}

fn random_conv(
    rng: &mut ChaCha8Rng,
    in_channels: usize,
    out_channels: usize,
    kernel: KernelSize,
    activation: Activation,
    depth_diff: bool,
) -> Result<DamConv> {
    let (kh, kw) = kernel.dims();
    let fan_in = in_channels * kh * kw;
    let a = (3.0 / fan_in as f64).sqrt();
    let values = (0..out_channels * fan_in)
        .map(|_| rng.gen_range(-a..a))
        .collect();
    let weights = WeightTensor::from_vec(out_channels, in_channels, kh, kw, values)?;
    DamConv::new(weights, vec![0.0; out_channels], activation, depth_diff)
}
