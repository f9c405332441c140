//! Seeded SGD with momentum, weight decay, learning-rate schedules and
//! masked updates.
//!
//! The SGD randomness `u` (`TrainPlan::sgd_seed`) drives the per-epoch data
//! permutation and, when interpolation is on, the per-step `alpha` draws.
//! Epoch `e` uses a ChaCha stream `(u, e)`, so epochs are independent of one
//! another and of how many draws earlier epochs made.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::eval_error;
use crate::data::Dataset;
use crate::engine::{backward, forward, ForwardMode, Layout, NormBuffers, NormKind, ParamVector};
use crate::error::{config, Error, Result};
use crate::masking::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Step { milestones: Vec<usize>, factor: f64 },
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default)]
    pub sgd_seed: u64,
    #[serde(default)]
    pub aws_interpolation: bool,
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}

impl TrainPlan {
    /// Momentum 0.9, weight decay 5e-4, constant schedule.
    pub fn sgd(epochs: usize, batch_size: usize, lr0: f64) -> Self {
        Self {
            epochs,
            batch_size,
            lr0,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Constant,
            sgd_seed: 0,
            aws_interpolation: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sgd_seed = seed;
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn with_interpolation(mut self, on: bool) -> Self {
        self.aws_interpolation = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config("batch_size must be positive");
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return config(format!("lr0 must be finite and non-negative, got {}", self.lr0));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return config(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return config(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Schedule::Step { milestones, factor } = &self.schedule {
            if !factor.is_finite() || *factor < 0.0 {
                return config(format!("step factor must be finite and non-negative, got {factor}"));
            }
            if milestones.windows(2).any(|w| w[0] >= w[1]) {
                return config("step milestones must be strictly increasing");
            }
            if let Some(&last) = milestones.last() {
                if last >= self.epochs {
                    return config(format!("milestone {last} is not below epochs = {}", self.epochs));
                }
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self, epoch)
    }
}

/// Learning rate for a (0-based) epoch.
pub fn lr_at(plan: &TrainPlan, epoch: usize) -> f64 {
    match &plan.schedule {
        Schedule::Constant => plan.lr0,
        Schedule::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            plan.lr0 * factor.powi(passed as i32)
        }
        Schedule::Cosine => plan.lr0 * 0.5 * (1.0 + (PI * epoch as f64 / plan.epochs as f64).cos()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
    pub epoch: usize,
    pub step: usize,
}

/// Anchor for normalization interpolation.
#[derive(Debug, Clone, Copy)]
pub enum PsiAnchor<'a> {
    /// Interpolate towards these values (ordered like `psi_indices`).
    Fixed(&'a [f64]),
    /// The anchor is the current normalization parameters themselves, so the
    /// interpolation is the identity map. Alphas are still drawn.
    Current,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub buffers: NormBuffers,
    pub log: MetricsLog,
    pub state: SgdState,
}

/// One configured training run; see [`train`] for the plain entry point.
pub struct Trainer<'a> {
    plan: &'a TrainPlan,
    data: &'a Dataset,
    monitor: Option<&'a Dataset>,
    anchor: PsiAnchor<'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(plan: &'a TrainPlan, data: &'a Dataset) -> Self {
        Self {
            plan,
            data,
            monitor: None,
            anchor: PsiAnchor::Fixed(&[]),
        }
    }

    /// Record test accuracy on `data` after every epoch.
    pub fn monitor(mut self, data: &'a Dataset) -> Self {
        self.monitor = Some(data);
        self
    }

    pub fn anchor(mut self, anchor: PsiAnchor<'a>) -> Self {
        self.anchor = anchor;
        self
    }

    pub fn run(&self, params: &ParamVector, buffers: &NormBuffers, mask: &BinaryMask) -> Result<TrainOutcome> {
        self.run_observed(params, buffers, mask, |_, _, _| {})
    }

    /// Like [`run`](Self::run), calling `observer(e, params, buffers)` with
    /// the state after `e` completed epochs (including `e = 0`).
    pub fn run_observed(
        &self,
        params: &ParamVector,
        buffers: &NormBuffers,
        mask: &BinaryMask,
        mut observer: impl FnMut(usize, &ParamVector, &NormBuffers),
    ) -> Result<TrainOutcome> {
        let plan = self.plan;
        plan.validate()?;
        mask.check_len(params.len())?;
        if self.data.is_empty() {
            return config("training data is empty");
        }
        if let (true, PsiAnchor::Fixed(anchor)) = (plan.aws_interpolation, self.anchor) {
            if anchor.len() != params.layout().psi_indices().len() {
                return Err(Error::Shape(format!(
                    "psi_init has {} entries, model has {} normalization parameters",
                    anchor.len(),
                    params.layout().psi_indices().len()
                )));
            }
        }

        let mut theta = mask.applied(params)?;
        let mut buffers = buffers.clone();
        let mut velocity = vec![0.0; theta.len()];
        let mut log = MetricsLog::default();
        let mut step = 0;
        let n = self.data.len();
        let batch = plan.batch_size.min(n);
        let steps_per_epoch = n / batch;
        let mut order: Vec<usize> = (0..n).collect();
        observer(0, &theta, &buffers);

        for epoch in 0..plan.epochs {
            let mut rng = epoch_rng(plan.sgd_seed, epoch);
            order.sort_unstable();
            order.shuffle(&mut rng);
            let lr = lr_at(plan, epoch);
            let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);

            for s in 0..steps_per_epoch {
                let idx = &order[s * batch..(s + 1) * batch];
                let b = self.data.batch(idx);
                let (mode, psi_init): (ForwardMode, &[f64]) = if plan.aws_interpolation {
                    let alpha: f64 = rng.random();
                    match self.anchor {
                        PsiAnchor::Fixed(anchor) => (ForwardMode::interpolated(alpha), anchor),
                        PsiAnchor::Current => (ForwardMode::train(), &[]),
                    }
                } else {
                    (ForwardMode::train(), &[])
                };
                let out = backward(&theta, &buffers, psi_init, &b, mode).map_err(|e| Error::Training {
                    epoch,
                    step: s,
                    source: Box::new(e),
                })?;

                loss_sum += out.loss * idx.len() as f64;
                correct += out
                    .logits
                    .argmax_rows()
                    .iter()
                    .zip(b.labels())
                    .filter(|(p, y)| p == y)
                    .count();
                seen += idx.len();
                buffers = out.buffers;

                let values = theta.values_mut();
                for ((v, th), g) in velocity.iter_mut().zip(values.iter_mut()).zip(&out.grad) {
                    *v = plan.momentum * *v + g + plan.weight_decay * *th;
                    *th -= lr * *v;
                }
                mask.apply(values);
                mask.apply(&mut velocity);
                step += 1;
            }

            let test_acc = match self.monitor {
                Some(test) => Some(1.0 - eval_error(&theta, &buffers, test)?),
                None => None,
            };
            log.epochs.push(EpochMetrics {
                epoch,
                train_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
                train_acc: if seen > 0 { correct as f64 / seen as f64 } else { 0.0 },
                test_acc,
            });
            observer(epoch + 1, &theta, &buffers);
        }

        Ok(TrainOutcome {
            params: theta,
            buffers,
            log,
            state: SgdState {
                velocity,
                epoch: plan.epochs,
                step,
            },
        })
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Trains `params ⊙ mask` under `plan`. When `plan.aws_interpolation` is
/// set, every step draws `alpha ~ U(0, 1)` and interpolates the
/// normalization parameters with `psi_init`.
pub fn train(
    params: &ParamVector,
    buffers: &NormBuffers,
    mask: &BinaryMask,
    psi_init: &[f64],
    data: &Dataset,
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    Trainer::new(plan, data)
        .anchor(PsiAnchor::Fixed(psi_init))
        .run(params, buffers, mask)
}

/// Re-estimates batch-norm running statistics of `params` from
/// `stat_batches` train-phase forwards over a fixed (seed 0) data order.
/// The returned buffers are the plain average of the per-batch statistics.
pub fn recompute_norm_stats(
    params: &ParamVector,
    data: &Dataset,
    stat_batches: usize,
    batch_size: usize,
) -> Result<NormBuffers> {
    let spec = params.spec();
    if spec.norm_kind != NormKind::BatchNorm {
        return config("recomputing normalization statistics requires a batch-norm model");
    }
    if data.is_empty() {
        return config("cannot recompute normalization statistics from an empty dataset");
    }
    if stat_batches == 0 || batch_size == 0 {
        return config("stat_batches and batch_size must be positive");
    }
    // momentum 1 makes each forward report exactly its batch statistics
    let mut probe_spec = spec.clone();
    probe_spec.bn_momentum = 1.0;
    let probe = ParamVector::new(Arc::new(Layout::new(&probe_spec)?), params.values().to_vec())?;
    let fresh = NormBuffers::fresh(spec);
    let mut acc = fresh.clone();

    let n = data.len();
    let batch = batch_size.min(n);
    let per_pass = n / batch;
    let mut order: Vec<usize> = (0..n).collect();
    for k in 0..stat_batches {
        let pass = k / per_pass;
        let s = k % per_pass;
        if s == 0 {
            order.sort_unstable();
            order.shuffle(&mut epoch_rng(0, pass));
        }
        let b = data.batch(&order[s * batch..(s + 1) * batch]);
        let out = forward(&probe, &fresh, &[], &b, ForwardMode::train())?;
        let w = 1.0 / (k + 1) as f64;
        for (a, o) in acc.layers.iter_mut().zip(&out.buffers.layers) {
            for (m, &x) in a.mean.iter_mut().zip(&o.mean) {
                *m += w * (x - *m);
            }
            for (v, &x) in a.var.iter_mut().zip(&o.var) {
                *v += w * (x - *v);
            }
        }
    }
    Ok(acc)
}
