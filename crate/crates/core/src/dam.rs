//! Depth-adaptive multiscale (DaM) convolution.
//!
//! Each input channel `r` at pixel `(m, n)` reads its kernel taps with an
//! integer spacing `S[r, m, n]` instead of a fixed dilation:
//!
//! ```text
//! out[t, m, n] = f( Σ_r Σ_u Σ_v  W[t, r, u, v] · X[r, m + S·u, n + S·v]  +  b[t] )
//! S[r, m, n]   = clamp(round(p_r / D[m, n]), 1, s_max)
//! p_r          = s_r / pool_product · mean_depth · q
//! ```
//!
//! so the spacing grows for near pixels and shrinks for far ones, tracking
//! how large the object under that pixel appears on the image plane. In
//! depth-difference mode the first layer reads `X[r, tap] − X[r, m, n]`
//! instead of `X[r, tap]`, which removes any additive depth offset.
//!
//! Taps that fall outside the map read zero (and a zero difference in
//! depth-difference mode); their gradient contributions are dropped.
//! The spacing is treated as a constant during backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::RawTensor;
use crate::tensor::{DepthMap, FeatureMap, WeightTensor};

/// Default upper clamp on the tap spacing.
pub const DEFAULT_S_MAX: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative at `x`; ReLU passes no gradient at exactly zero.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Parameters that turn a depth map into per-channel tap spacings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleParams {
    /// Scaling factor `s_r` for every input channel.
    scales: Vec<f64>,
    /// Training-set mean depth in millimeters.
    mean_depth: f64,
    /// Product of the strides of all pooling stages before this layer.
    pool_product: usize,
    /// Dilation of the layer this one replaces.
    q: usize,
    s_max: usize,
}

impl MultiscaleParams {
    pub fn new(
        scales: Vec<f64>,
        mean_depth: f64,
        pool_product: usize,
        q: usize,
        s_max: usize,
    ) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Config(
                "at least one scaling factor is required".into(),
            ));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!(
                "scaling factor {s} must be positive"
            )));
        }
        if !(mean_depth.is_finite() && mean_depth > 0.0) {
            return Err(Error::Config(format!(
                "mean depth {mean_depth} must be positive"
            )));
        }
        if pool_product == 0 || q == 0 || s_max == 0 {
            return Err(Error::Config(
                "pool_product, q and s_max must be at least 1".into(),
            ));
        }
        Ok(Self {
            scales,
            mean_depth,
            pool_product,
            q,
            s_max,
        })
    }

    /// Assigns `groups` to `channels` in contiguous equal blocks: with four
    /// factors, the first quarter of the channels gets `groups[0]`, and so on.
    pub fn grouped(
        groups: &[f64],
        channels: usize,
        mean_depth: f64,
        pool_product: usize,
        q: usize,
        s_max: usize,
    ) -> Result<Self> {
        if groups.is_empty() || !channels.is_multiple_of(groups.len()) {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {} equal scale groups",
                groups.len()
            )));
        }
        let per_group = channels / groups.len();
        let scales = (0..channels).map(|r| groups[r / per_group]).collect();
        Self::new(scales, mean_depth, pool_product, q, s_max)
    }

    pub fn channels(&self) -> usize {
        self.scales.len()
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn mean_depth(&self) -> f64 {
        self.mean_depth
    }

    pub fn pool_product(&self) -> usize {
        self.pool_product
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    /// Multiscale parameter `p_r` in millimeters.
    pub fn p(&self, r: usize) -> f64 {
        self.scales[r] / self.pool_product as f64 * self.mean_depth * self.q as f64
    }

    /// Tap spacing for channel `r` at a pixel of the given depth.
    pub fn spacing(&self, r: usize, depth: f64) -> usize {
        quantize_spacing(self.p(r) / depth, self.s_max)
    }

    pub fn compute_sparsity(&self, depth: &DepthMap) -> Result<SparsityMap> {
        let (h, w) = (depth.height(), depth.width());
        for m in 0..h {
            for n in 0..w {
                let d = depth.get(m, n);
                if d.is_nan() || d <= 0.0 {
                    return Err(Error::InvalidDepth {
                        row: m,
                        col: n,
                        value: d,
                    });
                }
            }
        }
        let c = self.channels();
        let mut dilations = Vec::with_capacity(c * h * w);
        for r in 0..c {
            dilations.extend(depth.depths().iter().map(|&d| self.spacing(r, d)));
        }
        Ok(SparsityMap {
            channels: c,
            height: h,
            width: w,
            dilations,
        })
    }
}

/// Round half up, then clamp into `[1, s_max]`.
pub fn quantize_spacing(ratio: f64, s_max: usize) -> usize {
    let rounded = (ratio + 0.5).floor();
    if rounded < 1.0 {
        1
    } else if rounded >= s_max as f64 {
        s_max
    } else {
        rounded as usize
    }
}

/// Integer tap spacing for every input channel and pixel of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityMap {
    channels: usize,
    height: usize,
    width: usize,
    dilations: Vec<usize>,
}

impl SparsityMap {
    pub fn uniform(channels: usize, height: usize, width: usize, spacing: usize) -> Result<Self> {
        Self::from_vec(
            channels,
            height,
            width,
            vec![spacing; channels * height * width],
        )
    }

    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        dilations: Vec<usize>,
    ) -> Result<Self> {
        if dilations.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} spacings for a {channels}x{height}x{width} sparsity map",
                dilations.len()
            )));
        }
        if dilations.contains(&0) {
            return Err(Error::Config("tap spacing must be at least 1".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            dilations,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn dilations(&self) -> &[usize] {
        &self.dilations
    }

    #[inline]
    pub fn get(&self, r: usize, m: usize, n: usize) -> usize {
        self.dilations[(r * self.height + m) * self.width + n]
    }

    pub fn max(&self) -> usize {
        self.dilations.iter().copied().max().unwrap_or(1)
    }

    pub fn to_raw(&self) -> RawTensor {
        RawTensor::new(
            vec![self.channels, self.height, self.width],
            self.dilations.iter().map(|&s| s as f32).collect(),
        )
        .expect("sparsity dims are consistent")
    }

    /// One channel as a gray-level heat map (largest spacing is white).
    pub fn channel_heatmap(&self, r: usize) -> Vec<u8> {
        let plane =
            &self.dilations[r * self.height * self.width..(r + 1) * self.height * self.width];
        let values: Vec<f64> = plane.iter().map(|&s| s as f64).collect();
        crate::io::rescale_to_u8(&values)
    }
}

/// How a convolution layer picks its tap spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// Depth-driven spacing.
    Adaptive(MultiscaleParams),
    /// The same dilation at every pixel and channel; `Fixed(1)` is a dense convolution.
    Fixed(usize),
}

impl Spacing {
    pub fn sparsity(&self, channels: usize, depth: &DepthMap) -> Result<SparsityMap> {
        match self {
            Spacing::Adaptive(params) => {
                if params.channels() != channels {
                    return Err(Error::Shape(format!(
                        "{} scaling factors for {channels} input channels",
                        params.channels()
                    )));
                }
                params.compute_sparsity(depth)
            }
            Spacing::Fixed(s) => SparsityMap::uniform(channels, depth.height(), depth.width(), *s),
        }
    }
}

/// What a forward pass leaves behind for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub input: FeatureMap,
    pub sparsity: SparsityMap,
    pub pre_activation: FeatureMap,
}

/// Gradients of the loss with respect to one convolution layer.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weights: WeightTensor,
    pub bias: Vec<f64>,
    pub input: FeatureMap,
}

/// Weights, bias and mode of one convolution layer. Stateless: the caller
/// owns the [`ConvCache`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamConv {
    pub weights: WeightTensor,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub depth_diff: bool,
}

impl DamConv {
    pub fn new(
        weights: WeightTensor,
        bias: Vec<f64>,
        activation: Activation,
        depth_diff: bool,
    ) -> Result<Self> {
        if bias.len() != weights.out_channels() {
            return Err(Error::Shape(format!(
                "{} biases for {} output channels",
                bias.len(),
                weights.out_channels()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
            depth_diff,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weights.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.weights.out_channels()
    }

    fn check_input(&self, input: &FeatureMap, sparsity: &SparsityMap) -> Result<()> {
        if input.channels() != self.in_channels() {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, got {}",
                self.in_channels(),
                input.channels()
            )));
        }
        if sparsity.dims() != input.dims() {
            return Err(Error::Shape(format!(
                "sparsity map {:?} does not match input {:?}",
                sparsity.dims(),
                input.dims()
            )));
        }
        Ok(())
    }

    /// Gathers the taps of pixel `(m, n)` for every input channel into `patch`,
    /// laid out like one output row of the weight tensor.
    fn gather(
        &self,
        input: &FeatureMap,
        sparsity: &SparsityMap,
        m: usize,
        n: usize,
        patch: &mut [f64],
    ) {
        let (kh, kw) = (self.weights.kernel_h(), self.weights.kernel_w());
        let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
        let (h, w) = (input.height() as isize, input.width() as isize);
        let taps = kh * kw;
        for r in 0..input.channels() {
            let s = sparsity.get(r, m, n) as isize;
            let center = if self.depth_diff {
                input.get(r, m, n)
            } else {
                0.0
            };
            let row = &mut patch[r * taps..(r + 1) * taps];
            for i in 0..kh {
                let mm = m as isize + s * (i as isize - ch);
                for j in 0..kw {
                    let nn = n as isize + s * (j as isize - cw);
                    row[i * kw + j] = if mm >= 0 && mm < h && nn >= 0 && nn < w {
                        input.get(r, mm as usize, nn as usize) - center
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    pub fn forward(
        &self,
        input: &FeatureMap,
        sparsity: &SparsityMap,
    ) -> Result<(FeatureMap, ConvCache)> {
        self.check_input(input, sparsity)?;
        let (h, w) = (input.height(), input.width());
        let fan_in = self.weights.fan_in();
        let c_out = self.out_channels();
        let weights = self.weights.values();
        let mut pre = FeatureMap::zeros(c_out, h, w);
        let mut patch = vec![0.0; fan_in];
        for m in 0..h {
            for n in 0..w {
                self.gather(input, sparsity, m, n, &mut patch);
                for t in 0..c_out {
                    let row = &weights[t * fan_in..(t + 1) * fan_in];
                    let acc: f64 = row.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    pre.set(t, m, n, acc + self.bias[t]);
                }
            }
        }
        let out = pre.map(|x| self.activation.apply(x));
        Ok((
            out,
            ConvCache {
                input: input.clone(),
                sparsity: sparsity.clone(),
                pre_activation: pre,
            },
        ))
    }

    /// Weight, bias and input gradients given `∂e/∂output`.
    ///
    /// The weight gradient includes the decay term `lambda · W`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &FeatureMap,
        lambda: f64,
    ) -> Result<ConvGrads> {
        let (weights, bias, input) = self.backward_parts(cache, grad_out, lambda, true, true)?;
        Ok(ConvGrads {
            weights: weights.expect("requested"),
            bias: bias.expect("requested"),
            input: input.expect("requested"),
        })
    }

    #[allow(clippy::type_complexity)]
    fn backward_parts(
        &self,
        cache: &ConvCache,
        grad_out: &FeatureMap,
        lambda: f64,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<WeightTensor>, Option<Vec<f64>>, Option<FeatureMap>)> {
        let input = &cache.input;
        let sparsity = &cache.sparsity;
        let (h, w) = (input.height(), input.width());
        let c_out = self.out_channels();
        if grad_out.dims() != (c_out, h, w) {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match layer output {:?}",
                grad_out.dims(),
                (c_out, h, w)
            )));
        }
        let (kh, kw) = (self.weights.kernel_h(), self.weights.kernel_w());
        let (ch, cw) = ((kh / 2) as isize, (kw / 2) as isize);
        let taps = kh * kw;
        let fan_in = self.weights.fan_in();
        let weights = self.weights.values();

        let mut grad_w = vec![0.0; weights.len()];
        let mut grad_b = vec![0.0; c_out];
        let mut grad_in = FeatureMap::zeros(input.channels(), h, w);
        let mut patch = vec![0.0; fan_in];
        let mut grad_patch = vec![0.0; fan_in];
        let mut grad_pre = vec![0.0; c_out];

        for m in 0..h {
            for n in 0..w {
                let mut any = false;
                for (t, gp) in grad_pre.iter_mut().enumerate() {
                    let g = grad_out.get(t, m, n)
                        * self
                            .activation
                            .derivative(cache.pre_activation.get(t, m, n));
                    *gp = g;
                    any |= g != 0.0;
                }
                if !any {
                    continue;
                }
                if want_params {
                    self.gather(input, sparsity, m, n, &mut patch);
                    for t in 0..c_out {
                        let g = grad_pre[t];
                        if g == 0.0 {
                            continue;
                        }
                        grad_b[t] += g;
                        let row = &mut grad_w[t * fan_in..(t + 1) * fan_in];
                        for (gw, x) in row.iter_mut().zip(&patch) {
                            *gw += g * x;
                        }
                    }
                }
                if want_input {
                    grad_patch.iter_mut().for_each(|v| *v = 0.0);
                    for t in 0..c_out {
                        let g = grad_pre[t];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &weights[t * fan_in..(t + 1) * fan_in];
                        for (gp, wt) in grad_patch.iter_mut().zip(row) {
                            *gp += g * wt;
                        }
                    }
                    // scatter each tap's gradient back to the pixel it read
                    for r in 0..input.channels() {
                        let s = sparsity.get(r, m, n) as isize;
                        let center = grad_in.offset(r, m, n);
                        for i in 0..kh {
                            let mm = m as isize + s * (i as isize - ch);
                            if mm < 0 || mm >= h as isize {
                                continue;
                            }
                            for j in 0..kw {
                                let nn = n as isize + s * (j as isize - cw);
                                if nn < 0 || nn >= w as isize {
                                    continue;
                                }
                                let g = grad_patch[r * taps + i * kw + j];
                                let target = grad_in.offset(r, mm as usize, nn as usize);
                                let values = grad_in.values_mut();
                                values[target] += g;
                                if self.depth_diff {
                                    values[center] -= g;
                                }
                            }
                        }
                    }
                }
            }
        }

        let params = if want_params {
            for (gw, wt) in grad_w.iter_mut().zip(weights) {
                *gw += lambda * wt;
            }
            let gw = WeightTensor::from_vec(c_out, input.channels(), kh, kw, grad_w)?;
            (Some(gw), Some(grad_b))
        } else {
            (None, None)
        };
        Ok((params.0, params.1, want_input.then_some(grad_in)))
    }
}

/// A convolution layer together with its spacing rule and the cache of its
/// most recent forward pass.
#[derive(Debug, Clone)]
pub struct DamLayerState {
    pub conv: DamConv,
    pub spacing: Spacing,
    cache: Option<ConvCache>,
}

impl DamLayerState {
    pub fn new(conv: DamConv, spacing: Spacing) -> Self {
        Self {
            conv,
            spacing,
            cache: None,
        }
    }

    pub fn cache(&self) -> Option<&ConvCache> {
        self.cache.as_ref()
    }

    /// Runs the layer in its configured mode, computing spacing from `depth`.
    pub fn forward(&mut self, input: &FeatureMap, depth: &DepthMap) -> Result<FeatureMap> {
        if (depth.height(), depth.width()) != (input.height(), input.width()) {
            return Err(Error::Shape(format!(
                "depth map {}x{} does not match input {}x{}",
                depth.height(),
                depth.width(),
                input.height(),
                input.width()
            )));
        }
        let sparsity = self.spacing.sparsity(input.channels(), depth)?;
        let (out, cache) = self.conv.forward(input, &sparsity)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Like [`forward`](Self::forward) but refuses layers not in depth-difference mode.
    pub fn forward_depth_diff(
        &mut self,
        input: &FeatureMap,
        depth: &DepthMap,
    ) -> Result<FeatureMap> {
        if !self.conv.depth_diff {
            return Err(Error::Config(
                "layer is not in depth-difference mode".into(),
            ));
        }
        self.forward(input, depth)
    }

    pub fn backward_weights(
        &self,
        grad_out: &FeatureMap,
        lambda: f64,
    ) -> Result<(WeightTensor, Vec<f64>)> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        let (w, b, _) = self
            .conv
            .backward_parts(cache, grad_out, lambda, true, false)?;
        Ok((w.expect("requested"), b.expect("requested")))
    }

    pub fn backward_input(&self, grad_out: &FeatureMap) -> Result<FeatureMap> {
        let cache = self.cache.as_ref().ok_or(Error::NoForwardCache)?;
        let (_, _, x) = self
            .conv
            .backward_parts(cache, grad_out, 0.0, false, true)?;
        Ok(x.expect("requested"))
    }
}
