//! Mini-batch training loop, evaluation and model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::network::{Network, Sample, TrainRecord};
use crate::optim::{Schedule, SgdState};
use crate::synth::intensity_input;
use crate::tensor::{DepthMap, LabelMap};

/// Validation metric used to pick the best checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    MeanIou,
    /// Foreground F1; two-class problems only.
    F1,
}

impl Selection {
    pub fn score(self, metrics: &Metrics) -> Result<f64> {
        match self {
            Selection::MeanIou => Ok(metrics.mean_iou),
            Selection::F1 => metrics
                .binary
                .map(|b| b.f1)
                .ok_or_else(|| Error::Config("F1 selection needs a two-class problem".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total iteration count; a resumed run stops at the same point.
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Momentum `μ`; `mu` is accepted as well.
    #[serde(default = "default_momentum", alias = "mu")]
    pub momentum: f64,
    /// Initial learning rate `γ₀`; `gamma` is accepted as well.
    #[serde(default = "default_lr", alias = "gamma")]
    pub lr: f64,
    #[serde(default)]
    pub schedule: Schedule,
    /// Validate every this many iterations (and after the last one).
    #[serde(default = "default_val_every")]
    pub val_every: u64,
    #[serde(default)]
    pub select: Selection,
    /// Seeds weight initialization and batch order.
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    4
}

fn default_momentum() -> f64 {
    0.9
}

fn default_lr() -> f64 {
    0.01
}

fn default_val_every() -> u64 {
    200
}

impl TrainConfig {
    pub fn new(iterations: u64) -> Self {
        Self {
            iterations,
            batch_size: default_batch(),
            momentum: default_momentum(),
            lr: default_lr(),
            schedule: Schedule::Constant,
            val_every: default_val_every(),
            select: Selection::MeanIou,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self, net: &Network) -> Result<SgdState> {
        SgdState::new(self.momentum, self.lr, self.schedule, &net.param_shapes())
    }
}

/// Pairs depth maps with their network input.
pub fn samples_from(maps: Vec<(DepthMap, LabelMap)>) -> Vec<Sample> {
    maps.into_iter()
        .map(|(depth, labels)| Sample {
            input: intensity_input(&depth),
            depth,
            labels,
        })
        .collect()
}

/// Sample indices for one iteration. The training set is walked in a
/// fresh seeded permutation every epoch, so the batch depends only on
/// `(seed, iter)` and a resumed run sees the same batches.
pub fn batch_indices(seed: u64, iter: u64, batch_size: usize, samples: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|j| {
            let pos = iter * batch_size as u64 + j;
            let epoch = pos / samples as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch);
                let mut perm: Vec<usize> = (0..samples).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("just set").1[(pos % samples as u64) as usize]
        })
        .collect()
}

/// Confusion matrix of `net` over `samples` at output resolution.
pub fn evaluate(net: &Network, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let per_sample: Vec<ConfusionMatrix> = samples
        .par_iter()
        .map(|s| {
            let predicted = net.predict(&s.input, &s.depth)?;
            let truth = net.output_labels(&s.labels)?;
            let mut cm = ConfusionMatrix::new(net.classes());
            cm.accumulate(&predicted, &truth)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::new(net.classes());
    for cm in &per_sample {
        total.merge(cm)?;
    }
    Ok(total)
}

/// Progress notifications from [`train`].
pub enum Event<'a> {
    /// After every iteration; `record.val_score` is set on validation steps.
    Step(&'a TrainRecord),
    /// Validation improved on the best score so far.
    NewBest {
        score: f64,
        net: &'a Network,
        opt: &'a SgdState,
    },
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub best_score: Option<f64>,
    pub last: Option<TrainRecord>,
    pub iterations_run: u64,
}

/// Trains from `opt.iter` up to `cfg.iterations`. `best_score` is the best
/// validation score of an earlier run being resumed, if any.
pub fn train(
    net: &mut Network,
    opt: &mut SgdState,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    best_score: Option<f64>,
    mut on_event: impl FnMut(Event<'_>) -> Result<()>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut summary = TrainSummary {
        best_score,
        ..Default::default()
    };
    while opt.iter < cfg.iterations && !opt.finished {
        let iter = opt.iter;
        let batch: Vec<Sample> = batch_indices(cfg.seed, iter, cfg.batch_size, train_set.len())
            .into_iter()
            .map(|i| train_set[i].clone())
            .collect();
        let mut record = net.train_step(&batch, opt)?;
        summary.iterations_run += 1;

        let done = iter + 1 == cfg.iterations;
        if !val_set.is_empty() && ((iter + 1).is_multiple_of(cfg.val_every) || done) {
            let metrics = evaluate(net, val_set)?.compute_all()?;
            let score = cfg.select.score(&metrics)?;
            record.val_score = Some(score);
            opt.report_validation(score);
            if summary.best_score.is_none_or(|b| score > b) {
                summary.best_score = Some(score);
                on_event(Event::NewBest { score, net, opt })?;
            }
        }
        on_event(Event::Step(&record))?;
        summary.last = Some(record);
    }
    Ok(summary)
}
