//! Deterministic minibatch SGD that logs what tracking representers and
//! TracInCP need.
//!
//! Shuffling: for epoch `e` the generator is `Xoshiro256StarStar` seeded via
//! SplitMix64 from `seed + (e + 1)·0x9E3779B97F4A7C15` (wrapping). A
//! Fisher–Yates pass from the last index down draws `j ∈ [0, i]` with Lemire's
//! multiply-and-reject method. The permutation is cut into consecutive
//! batches; the last batch may be short.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::axpy;
use crate::loss::{self, LossKind};
use crate::model::{Model, ModelSpec, ParamVector};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSegment {
    /// First step (1-based, inclusive).
    pub start: u64,
    /// Last step (inclusive).
    pub end: u64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSchedule {
    Constant(f64),
    /// Steps past the last segment keep its rate.
    Segments(Vec<LrSegment>),
}

impl LrSchedule {
    /// Learning rate used by step `t` (1-based). Step 0 reports the first rate.
    pub fn at(&self, t: u64) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::Segments(segs) => segs
                .iter()
                .find(|s| t.max(1) >= s.start && t.max(1) <= s.end)
                .or(segs.last())
                .map(|s| s.lr)
                .unwrap_or(0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Constant(lr) if *lr > 0.0 && lr.is_finite() => Ok(()),
            LrSchedule::Segments(segs) if !segs.is_empty() => {
                let mut prev_end = 0;
                for s in segs {
                    if !(s.lr > 0.0 && s.lr.is_finite()) || s.start > s.end || s.start <= prev_end {
                        return Err(Error::InvalidConfig(
                            "learning-rate segments must be ordered, disjoint and positive".into(),
                        ));
                    }
                    prev_end = s.end;
                }
                Ok(())
            }
            _ => Err(Error::InvalidConfig("learning rates must be positive".into())),
        }
    }
}

fn default_checkpoints() -> usize {
    7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    #[serde(default = "default_checkpoints")]
    pub checkpoint_count: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.checkpoint_count < 2 {
            return Err(Error::InvalidConfig("checkpoint_count must be >= 2".into()));
        }
        self.lr.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// One SGD step as seen by the tracking representer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub batch: Vec<usize>,
    /// `∂L/∂f` at the pre-update parameters, parallel to `batch`.
    pub loss_grads: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub output_dim: usize,
    pub steps: Vec<StepLog>,
}

impl TrajectoryRecord {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut last = 0;
        for (k, s) in self.steps.iter().enumerate() {
            if k > 0 && s.step <= last {
                return Err(Error::InvalidConfig("trajectory steps must be strictly increasing".into()));
            }
            last = s.step;
            if s.batch.len() != s.loss_grads.len() {
                return Err(Error::InvalidConfig(format!("step {}: batch and gradients differ", s.step)));
            }
            if s.batch.iter().any(|&i| i >= n) {
                return Err(Error::InvalidConfig(format!("step {}: sample index out of range", s.step)));
            }
            if s.loss_grads.iter().any(|g| g.len() != self.output_dim || !crate::linalg::all_finite(g)) {
                return Err(Error::InvalidConfig(format!("step {}: malformed gradient", s.step)));
            }
        }
        Ok(())
    }

    /// Splits into steps `< t` and `>= t`.
    pub fn split_at_step(&self, t: u64) -> (TrajectoryRecord, TrajectoryRecord) {
        let (a, b): (Vec<_>, Vec<_>) = self.steps.iter().cloned().partition(|s| s.step < t);
        (
            TrajectoryRecord {
                output_dim: self.output_dim,
                steps: a,
            },
            TrajectoryRecord {
                output_dim: self.output_dim,
                steps: b,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamVector,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSet {
    pub checkpoints: Vec<Checkpoint>,
}

impl CheckpointSet {
    pub fn first(&self) -> Option<&Checkpoint> {
        self.checkpoints.first()
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    /// Checkpoint whose step is closest to the midpoint (earlier on ties).
    pub fn middle(&self) -> Option<&Checkpoint> {
        let last = self.last()?.step;
        self.checkpoints
            .iter()
            .min_by_key(|c| (2 * c.step).abs_diff(last))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ParamVector,
    pub trajectory: TrajectoryRecord,
    pub checkpoints: CheckpointSet,
}

/// Unbiased draw from `[0, range)` (Lemire).
fn bounded(rng: &mut impl RngCore, range: u64) -> u64 {
    let threshold = range.wrapping_neg() % range;
    loop {
        let m = (rng.next_u64() as u128) * (range as u128);
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = bounded(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

pub fn minibatch_indices(seed: u64, epoch: u64, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let key = seed.wrapping_add(epoch.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
    let mut rng = Xoshiro256StarStar::seed_from_u64(key);
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Evenly spaced checkpoint steps over `[0, total]`, deduplicated.
pub fn checkpoint_steps(total: u64, count: usize) -> Vec<u64> {
    let mut steps: Vec<u64> = (0..count)
        .map(|k| ((k as f64) * total as f64 / (count - 1) as f64).round() as u64)
        .collect();
    steps.dedup();
    steps
}

pub fn train(
    spec: &ModelSpec,
    init: &ParamVector,
    data: &Dataset,
    config: &TrainConfig,
    kind: LossKind,
) -> Result<TrainOutput> {
    train_masked(spec, init, data, config, kind, None)
}

/// Trains on the rows with `keep[i] == true`, reusing the full dataset's batch
/// schedule with excluded rows removed. Batches that become empty are skipped
/// but still advance the step counter so learning rates stay aligned.
pub fn train_masked(
    spec: &ModelSpec,
    init: &ParamVector,
    data: &Dataset,
    config: &TrainConfig,
    kind: LossKind,
    keep: Option<&[bool]>,
) -> Result<TrainOutput> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.check_labels(kind, spec.output_dim)?;
    let mut model = Model::new(spec.clone(), init.clone())?;
    let n = data.len();
    let total = (config.epochs * config.steps_per_epoch(n)) as u64;
    let cp_steps = checkpoint_steps(total, config.checkpoint_count);
    let mut checkpoints = Vec::with_capacity(cp_steps.len());
    let mut trajectory = TrajectoryRecord {
        output_dim: spec.output_dim,
        steps: Vec::new(),
    };
    if cp_steps[0] == 0 {
        checkpoints.push(Checkpoint {
            step: 0,
            params: init.clone(),
            lr: config.lr.at(1),
        });
    }
    let mut t = 0u64;
    for epoch in 0..config.epochs {
        for batch in minibatch_indices(config.seed, epoch as u64, n, config.batch_size) {
            t += 1;
            let batch: Vec<usize> = match keep {
                Some(mask) => batch.into_iter().filter(|&i| mask[i]).collect(),
                None => batch,
            };
            if !batch.is_empty() {
                let lr = config.lr.at(t);
                let mut grads = Vec::with_capacity(batch.len());
                for &i in &batch {
                    let out = model.forward(&data.features[i])?;
                    if !loss::loss(&out, data.labels[i], kind)?.is_finite() {
                        return Err(Error::NonFiniteLoss { step: t });
                    }
                    grads.push(loss::loss_grad_output(&out, data.labels[i], kind)?);
                }
                let step = StepLog {
                    step: t,
                    lr,
                    batch,
                    loss_grads: grads,
                };
                model = apply_step(&model, data, &step)?;
                trajectory.steps.push(step);
            }
            if t > 0 && cp_steps.binary_search(&t).is_ok() {
                checkpoints.push(Checkpoint {
                    step: t,
                    params: model.params().clone(),
                    lr: config.lr.at(t),
                });
            }
        }
    }
    Ok(TrainOutput {
        params: model.params().clone(),
        trajectory,
        checkpoints: CheckpointSet { checkpoints },
    })
}

/// `θ ← θ − (η/|B|) Σ_{i∈B} J(xᵢ)ᵀ gᵢ` using the logged `gᵢ`.
fn apply_step(model: &Model, data: &Dataset, step: &StepLog) -> Result<Model> {
    let mut acc = vec![0.0; model.param_count()];
    for (&i, g) in step.batch.iter().zip(&step.loss_grads) {
        let grad = model.vjp(&data.features[i], g)?;
        axpy(1.0, &grad, &mut acc);
    }
    let scale = step.lr / step.batch.len() as f64;
    let mut theta = model.params().0.clone();
    axpy(-scale, &acc, &mut theta);
    if !crate::linalg::all_finite(&theta) {
        return Err(Error::NonFiniteLoss { step: step.step });
    }
    model.with_params(theta.into())
}

/// Re-applies a logged trajectory to `init`; bit-identical to the trained parameters.
pub fn replay(spec: &ModelSpec, init: &ParamVector, data: &Dataset, trajectory: &TrajectoryRecord) -> Result<ParamVector> {
    trajectory.validate(data.len())?;
    let mut model = Model::new(spec.clone(), init.clone())?;
    for step in &trajectory.steps {
        model = apply_step(&model, data, step)?;
    }
    Ok(model.params().clone())
}
