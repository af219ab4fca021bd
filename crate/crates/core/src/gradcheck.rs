//! Central finite-difference checks of the analytic gradients of a whole
//! network.
//!
//! Every weight, bias and input value is perturbed by `±eps` and the total
//! loss `e = e_a + λ·e_b` re-evaluated from scratch, so the numeric side
//! never touches the backward code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{Network, Sample};
use crate::tensor::{DepthMap, FeatureMap, LabelMap};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

/// Samples whose ReLU pre-activations or pooling margins come closer than
/// this to a kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub count: usize,
    pub worst: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checks: Vec<TensorCheck>,
    pub tol: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.worst).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tol
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let verdict = if c.worst < self.tol { "ok" } else { "FAIL" };
            s.push_str(&format!(
                "{:<16} {:>6} values  worst rel err {:.3e}  {verdict}\n",
                c.name, c.count, c.worst
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Scales the analytic gradient of the first weight tensor by 1.01, for
    /// confirming that the check can fail.
    pub corrupt: bool,
}

impl CheckOptions {
    pub fn new(eps: f64, tol: f64) -> Self {
        Self {
            eps,
            tol,
            corrupt: false,
        }
    }
}

/// Replaces the (zero-initialized) biases with uniform(−0.1, 0.1) values,
/// so that no pre-activation sits exactly on a ReLU kink.
pub fn randomize_biases(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (slot, values) in net.parameters_mut().into_iter().enumerate() {
        if slot % 2 == 1 {
            values
                .iter_mut()
                .for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
}

/// Random input, depth and labels for `net` whose forward pass stays at
/// least [`KINK_MARGIN`] away from every ReLU and max-pool kink.
///
/// Depths are drawn from `depth_range` so adaptive layers see a mix of
/// tap spacings.
pub fn kink_free_sample(
    net: &Network,
    seed: u64,
    height: usize,
    width: usize,
    depth_range: (f64, f64),
) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let input = FeatureMap::from_fn(net.input_channels(), height, width, |_, _, _| {
            rng.gen_range(-1.0..1.0)
        });
        let depths = (0..height * width)
            .map(|_| rng.gen_range(depth_range.0..depth_range.1))
            .collect();
        let depth = DepthMap::from_vec(height, width, depths)?;
        let labels = (0..height * width)
            .map(|_| rng.gen_range(0..net.classes()))
            .collect();
        let labels = LabelMap::new(height, width, labels, None)?;
        let (_, cache) = net.forward_all(&input, &depth)?;
        if net.kink_margin(&cache) >= KINK_MARGIN {
            return Ok(Sample {
                input,
                depth,
                labels,
            });
        }
    }
    Err(Error::NonFinite(
        "could not draw a sample away from activation kinks".into(),
    ))
}

/// Compares analytic and central-difference gradients of the total loss for
/// every parameter and input value.
pub fn check_network(net: &Network, sample: &Sample, opts: CheckOptions) -> Result<GradReport> {
    let (_, grads) = net.sample_gradients(sample)?;
    let lambda = net.loss_config().lambda;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (k, ((gw, gb), conv)) in grads.convs.iter().zip(net.convs()).enumerate() {
        let w: Vec<f64> = gw
            .values()
            .iter()
            .zip(conv.weights.values())
            .map(|(g, w)| g + lambda * w)
            .collect();
        analytic.push((format!("conv{k}.weights"), w));
        analytic.push((format!("conv{k}.bias"), gb.clone()));
    }
    if opts.corrupt {
        analytic[0].1.iter_mut().for_each(|g| *g *= 1.01);
    }

    let mut checks = Vec::new();
    let mut probe = net.clone();
    for (slot, (name, values)) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (j, &a) in values.iter().enumerate() {
            let original = probe.parameters_mut()[slot][j];
            probe.parameters_mut()[slot][j] = original + opts.eps;
            let plus = probe.total_loss(sample)?;
            probe.parameters_mut()[slot][j] = original - opts.eps;
            let minus = probe.total_loss(sample)?;
            probe.parameters_mut()[slot][j] = original;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * opts.eps)));
        }
        checks.push(TensorCheck {
            name: name.clone(),
            count: values.len(),
            worst,
        });
    }

    let mut shifted = sample.clone();
    let mut worst: f64 = 0.0;
    for (j, &a) in grads.input.values().iter().enumerate() {
        let original = sample.input.values()[j];
        shifted.input.values_mut()[j] = original + opts.eps;
        let plus = net.total_loss(&shifted)?;
        shifted.input.values_mut()[j] = original - opts.eps;
        let minus = net.total_loss(&shifted)?;
        shifted.input.values_mut()[j] = original;
        worst = worst.max(relative_error(a, (plus - minus) / (2.0 * opts.eps)));
    }
    checks.push(TensorCheck {
        name: "input".into(),
        count: grads.input.values().len(),
        worst,
    });
    Ok(GradReport {
        checks,
        tol: opts.tol,
    })
}
