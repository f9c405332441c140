//! Iterative pruning procedures and final training of their outputs.
//!
//! Every kind runs warm-up, then `T` rounds of train -> prune -> rewind:
//!
//! | kind  | rewind after pruning                            |
//! |-------|-------------------------------------------------|
//! | `imp` | parameters back to the initialization           |
//! | `wr`  | parameters back to a warm-up checkpoint         |
//! | `lrr` | parameters kept, learning-rate schedule restarts |
//! | `aws` | as `lrr`, training with interpolated norm params |
//!
//! The learning-rate schedule always restarts because each round is a fresh
//! [`Trainer`] run.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{build, ModelSpec, NormBuffers, ParamVector};
use crate::error::{config, Error, Result};
use crate::masking::{prune_step_scoped, remaining_ratio, sign0, transfer, BinaryMask, PruneScope, SignedMask, TransferMode};
use crate::training::{MetricsLog, PsiAnchor, Schedule, TrainPlan, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    Imp,
    Wr,
    Lrr,
    Aws,
}

impl PipelineKind {
    pub fn name(self) -> &'static str {
        match self {
            PipelineKind::Imp => "imp",
            PipelineKind::Wr => "wr",
            PipelineKind::Lrr => "lrr",
            PipelineKind::Aws => "aws",
        }
    }
}

/// What AWS interpolates towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// The normalization parameters of the initialization.
    #[default]
    Init,
    /// The current normalization parameters (interpolation is the identity).
    Current,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub kind: PipelineKind,
    pub iterations: usize,
    #[serde(default = "default_rate")]
    pub prune_rate: f64,
    #[serde(default)]
    pub prune_scope: PruneScope,
    pub warmup_plan: TrainPlan,
    pub iteration_plan: TrainPlan,
    pub final_plan: TrainPlan,
    /// Warm-up epoch whose parameters `wr` rewinds to; defaults to the end
    /// of warm-up.
    #[serde(default)]
    pub wr_rewind_point: Option<usize>,
    #[serde(default)]
    pub anchor: AnchorPolicy,
}

fn default_rate() -> f64 {
    0.2
}

impl PipelineConfig {
    /// Warm-up 10 epochs, 10 epochs per round at a constant rate, 100 final
    /// epochs decayed by 0.1 at epochs 50 and 75; SGD with momentum 0.9 and
    /// weight decay 5e-4 throughout.
    pub fn desk_default(kind: PipelineKind, iterations: usize) -> Self {
        let base = TrainPlan::sgd(10, 64, 0.1);
        Self {
            kind,
            iterations,
            prune_rate: default_rate(),
            prune_scope: PruneScope::Global,
            warmup_plan: base.clone(),
            iteration_plan: base.clone().with_interpolation(kind == PipelineKind::Aws),
            final_plan: TrainPlan {
                epochs: 100,
                schedule: Schedule::Step {
                    milestones: vec![50, 75],
                    factor: 0.1,
                },
                ..base
            },
            wr_rewind_point: None,
            anchor: AnchorPolicy::Init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return config("pipeline needs at least one iteration");
        }
        if !(self.prune_rate.is_finite() && (0.0..1.0).contains(&self.prune_rate)) {
            return config(format!("prune_rate must lie in [0, 1), got {}", self.prune_rate));
        }
        self.warmup_plan.validate()?;
        self.iteration_plan.validate()?;
        self.final_plan.validate()?;
        let aws = self.kind == PipelineKind::Aws;
        if self.iteration_plan.aws_interpolation != aws {
            return config(format!(
                "iteration_plan.aws_interpolation must be {aws} for kind {}",
                self.kind.name()
            ));
        }
        if self.warmup_plan.aws_interpolation {
            return config("warm-up does not interpolate normalization parameters");
        }
        if self.final_plan.aws_interpolation {
            return config("final training does not interpolate normalization parameters");
        }
        if let Some(p) = self.wr_rewind_point {
            if self.kind != PipelineKind::Wr {
                return config("wr_rewind_point only applies to kind wr");
            }
            if p > self.warmup_plan.epochs {
                return config(format!(
                    "wr_rewind_point {p} is past the end of warm-up ({} epochs)",
                    self.warmup_plan.epochs
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Remaining ratio of the mask the round trained under.
    pub trained_ratio: f64,
    /// Remaining ratio after this round's pruning.
    pub remaining_ratio: f64,
    pub mask: BinaryMask,
    pub log: MetricsLog,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub kind: PipelineKind,
    pub init_seed: u64,
    /// Parameters after the last prune and rewind, already masked.
    pub final_params: ParamVector,
    pub final_buffers: NormBuffers,
    pub final_mask: BinaryMask,
    pub signs: SignedMask,
    pub records: Vec<IterationRecord>,
    pub theta0: ParamVector,
    pub psi_init: Vec<f64>,
    pub warmup_log: MetricsLog,
}

impl PipelineResult {
    pub fn spec(&self) -> &ModelSpec {
        self.final_params.spec()
    }
}

/// Runs one pruning pipeline from `build(spec, init_seed)`.
///
/// Round `t` (1-based) trains with SGD seed `iteration_plan.sgd_seed + t`.
/// When `monitor` is given, test accuracy is logged every epoch.
pub fn run(
    cfg: &PipelineConfig,
    spec: &ModelSpec,
    data: &Dataset,
    monitor: Option<&Dataset>,
    init_seed: u64,
) -> Result<PipelineResult> {
    cfg.validate()?;
    let (theta0, buffers0) = build(spec, init_seed)?;
    let psi_init = theta0.psi();
    let dense = BinaryMask::dense(theta0.layout());

    let rewind_at = cfg.wr_rewind_point.unwrap_or(cfg.warmup_plan.epochs);
    let mut rewind_point: Option<(ParamVector, NormBuffers)> = None;
    let warm = with_monitor(Trainer::new(&cfg.warmup_plan, data), monitor).run_observed(
        &theta0,
        &buffers0,
        &dense,
        |epoch, p, b| {
            if cfg.kind == PipelineKind::Wr && epoch == rewind_at {
                rewind_point = Some((p.clone(), b.clone()));
            }
        },
    )?;

    let anchor = match cfg.anchor {
        AnchorPolicy::Init => PsiAnchor::Fixed(&psi_init),
        AnchorPolicy::Current => PsiAnchor::Current,
    };

    let mut theta = warm.params;
    let mut buffers = warm.buffers;
    let mut mask = dense;
    let mut records = Vec::with_capacity(cfg.iterations);
    for t in 1..=cfg.iterations {
        let wrap = |e: Error| Error::Iteration {
            iteration: t,
            source: Box::new(e),
        };
        let plan = cfg
            .iteration_plan
            .clone()
            .with_seed(cfg.iteration_plan.sgd_seed.wrapping_add(t as u64));
        let trained_ratio = remaining_ratio(&mask).map_err(wrap)?;
        let out = with_monitor(Trainer::new(&plan, data), monitor)
            .anchor(anchor)
            .run(&theta, &buffers, &mask)
            .map_err(wrap)?;
        let next = prune_step_scoped(&out.params, &mask, cfg.prune_rate, cfg.prune_scope).map_err(wrap)?;
        (theta, buffers) = match cfg.kind {
            PipelineKind::Imp => (next.applied(&theta0)?, buffers0.clone()),
            PipelineKind::Wr => {
                let (p, b) = rewind_point.as_ref().expect("warm-up records the rewind point");
                (next.applied(p)?, b.clone())
            }
            PipelineKind::Lrr | PipelineKind::Aws => (next.applied(&out.params)?, out.buffers),
        };
        mask = next;
        records.push(IterationRecord {
            iteration: t,
            trained_ratio,
            remaining_ratio: remaining_ratio(&mask)?,
            mask: mask.clone(),
            log: out.log,
        });
    }

    let signs = sign0(theta.values())?;
    Ok(PipelineResult {
        kind: cfg.kind,
        init_seed,
        final_params: theta,
        final_buffers: buffers,
        final_mask: mask,
        signs,
        records,
        theta0,
        psi_init,
        warmup_log: warm.log,
    })
}

fn with_monitor<'a>(t: Trainer<'a>, monitor: Option<&'a Dataset>) -> Trainer<'a> {
    match monitor {
        Some(m) => t.monitor(m),
        None => t,
    }
}

/// Where final training starts from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Start {
    /// `theta_T ⊙ m_T`.
    Subnetwork,
    /// A transfer onto `build(spec, fresh_seed)`.
    Transfer { mode: TransferMode, fresh_seed: u64 },
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub start: ParamVector,
    pub mask: BinaryMask,
    pub params: ParamVector,
    pub buffers: NormBuffers,
    pub log: MetricsLog,
}

/// Builds the start point and mask for final training.
pub fn start_point(result: &PipelineResult, start: Start) -> Result<(ParamVector, BinaryMask)> {
    start_point_from(&result.final_params, &result.final_mask, &result.signs, start)
}

/// As [`start_point`], from the three pieces a pipeline hands over:
/// trained parameters `theta_T`, mask `m_T` and signed mask `s_T`.
pub fn start_point_from(
    theta: &ParamVector,
    mask: &BinaryMask,
    signs: &SignedMask,
    start: Start,
) -> Result<(ParamVector, BinaryMask)> {
    match start {
        Start::Subnetwork => Ok((mask.applied(theta)?, mask.clone())),
        Start::Transfer { mode, fresh_seed } => {
            let (fresh, _) = build(theta.spec(), fresh_seed)?;
            let p = transfer(&fresh, theta, mask, signs, mode)?;
            let mask = if mode.uses_signs() {
                signs.support_mask(mask)?
            } else {
                mask.clone()
            };
            Ok((p, mask))
        }
    }
}

/// Trains the chosen start point under `plan` with fresh normalization
/// buffers and the mask held fixed.
pub fn final_train(
    result: &PipelineResult,
    start: Start,
    plan: &TrainPlan,
    data: &Dataset,
    monitor: Option<&Dataset>,
) -> Result<Solution> {
    let (p, mask) = start_point(result, start)?;
    train_from(p, mask, plan, data, monitor)
}

/// Dense baseline: trains `build(spec, init_seed)` without a mask.
pub fn train_dense(
    spec: &ModelSpec,
    init_seed: u64,
    plan: &TrainPlan,
    data: &Dataset,
    monitor: Option<&Dataset>,
) -> Result<Solution> {
    let (p, _) = build(spec, init_seed)?;
    let mask = BinaryMask::dense(p.layout());
    train_from(p, mask, plan, data, monitor)
}

pub fn train_from(
    start: ParamVector,
    mask: BinaryMask,
    plan: &TrainPlan,
    data: &Dataset,
    monitor: Option<&Dataset>,
) -> Result<Solution> {
    if plan.aws_interpolation {
        return config("final training does not interpolate normalization parameters");
    }
    let buffers = NormBuffers::fresh(start.spec());
    let out = with_monitor(Trainer::new(plan, data), monitor).run(&start, &buffers, &mask)?;
    Ok(Solution {
        start,
        mask,
        params: out.params,
        buffers: out.buffers,
        log: out.log,
    })
}
