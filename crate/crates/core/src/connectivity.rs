//! Test error, error barriers along linear paths, linear mode connectivity
//! and stability against SGD noise.
//!
//! The barrier at `alpha` between `a` and `b` is
//! `E(alpha * a + (1 - alpha) * b) - (E(a) + E(b)) / 2`; the sup-barrier is
//! its maximum over the grid. Grid point `i` of `G` uses weights
//! `i / (G - 1)` and `(G - 1 - i) / (G - 1)`, which makes swapped curves and
//! nested grids hit bitwise-identical interpolated networks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{predict, NormBuffers, NormKind, ParamVector};
use crate::error::{config, shape, Result};
use crate::masking::BinaryMask;
use crate::training::{recompute_norm_stats, PsiAnchor, TrainPlan, Trainer};

pub const DEFAULT_GRID: usize = 21;

const EVAL_CHUNK: usize = 1024;

/// Parameters plus the normalization buffers used to evaluate them.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: ParamVector,
    pub buffers: NormBuffers,
}

impl Snapshot {
    pub fn new(params: ParamVector, buffers: NormBuffers) -> Self {
        Self { params, buffers }
    }
}

/// What running statistics an interpolated batch-norm network is evaluated
/// with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatPolicy {
    /// Interpolate the endpoints' running buffers like the parameters.
    Keep,
    /// Re-estimate the buffers at every grid point.
    Recompute { batches: usize, batch_size: usize },
}

impl Default for StatPolicy {
    fn default() -> Self {
        StatPolicy::Recompute {
            batches: 32,
            batch_size: 128,
        }
    }
}

/// Fraction of misclassified examples under eval-phase forwards.
pub fn eval_error(params: &ParamVector, buffers: &NormBuffers, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return config("cannot evaluate on an empty dataset");
    }
    let dim = data.dim();
    let mut wrong = 0usize;
    for (c, labels) in data.labels().chunks(EVAL_CHUNK).enumerate() {
        let start = c * EVAL_CHUNK;
        let inputs = &data.inputs()[start * dim..(start + labels.len()) * dim];
        let logits = predict(params, buffers, inputs, labels.len())?;
        wrong += logits
            .argmax_rows()
            .iter()
            .zip(labels)
            .filter(|(p, y)| p != y)
            .count();
    }
    Ok(wrong as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierCurve {
    pub alphas: Vec<f64>,
    /// Error of the interpolated network at each alpha.
    pub errors: Vec<f64>,
    /// Error at alpha = 1 (the first endpoint).
    pub error_a: f64,
    /// Error at alpha = 0 (the second endpoint).
    pub error_b: f64,
    pub barriers: Vec<f64>,
    pub sup_barrier: f64,
    pub argmax_alpha: f64,
}

fn mix(a: &[f64], b: &[f64], wa: f64, wb: f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| if x == y { x } else { wa * x + wb * y })
        .collect()
}

fn point(a: &Snapshot, b: &Snapshot, i: usize, grid: usize, policy: StatPolicy) -> Result<Snapshot> {
    let last = grid - 1;
    if i == last {
        return Ok(a.clone());
    }
    if i == 0 {
        return Ok(b.clone());
    }
    let wa = i as f64 / last as f64;
    let wb = (last - i) as f64 / last as f64;
    let params = a.params.with_values(mix(a.params.values(), b.params.values(), wa, wb))?;
    let buffers = if matches!(policy, StatPolicy::Keep) || a.params.spec().norm_kind != NormKind::BatchNorm {
        NormBuffers::unflatten(a.params.spec(), &mix(&a.buffers.flatten(), &b.buffers.flatten(), wa, wb))?
    } else {
        a.buffers.clone()
    };
    Ok(Snapshot { params, buffers })
}

/// Errors and barriers on a `grid`-point uniform alpha grid.
///
/// `stats` is the data used to re-estimate batch-norm statistics under
/// [`StatPolicy::Recompute`]; it is ignored otherwise.
pub fn barrier_curve(
    a: &Snapshot,
    b: &Snapshot,
    eval: &Dataset,
    stats: &Dataset,
    grid: usize,
    policy: StatPolicy,
) -> Result<BarrierCurve> {
    if grid < 3 {
        return config(format!("barrier grid needs at least 3 points, got {grid}"));
    }
    if !a.params.same_layout(&b.params) {
        return shape("barrier endpoints have different layouts");
    }
    let recompute = match policy {
        StatPolicy::Recompute { batches, batch_size } if a.params.spec().norm_kind == NormKind::BatchNorm => {
            Some((batches, batch_size))
        }
        _ => None,
    };
    let errors: Vec<f64> = (0..grid)
        .into_par_iter()
        .map(|i| {
            let mut p = point(a, b, i, grid, policy)?;
            if let Some((batches, batch_size)) = recompute {
                p.buffers = recompute_norm_stats(&p.params, stats, batches, batch_size)?;
            }
            eval_error(&p.params, &p.buffers, eval)
        })
        .collect::<Result<_>>()?;
    Ok(curve_from_errors(errors))
}

/// Barrier statistics for errors sampled at `i / (G - 1)`, `i = 0..G`.
pub fn curve_from_errors(errors: Vec<f64>) -> BarrierCurve {
    let grid = errors.len();
    let last = grid - 1;
    let alphas: Vec<f64> = (0..grid).map(|i| i as f64 / last as f64).collect();
    let (error_a, error_b) = (errors[last], errors[0]);
    let mean = (error_a + error_b) / 2.0;
    let barriers: Vec<f64> = errors
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            if i == last {
                (error_a - error_b) / 2.0
            } else if i == 0 {
                (error_b - error_a) / 2.0
            } else {
                e - mean
            }
        })
        .collect();
    let mut best = 0;
    for (i, &v) in barriers.iter().enumerate() {
        if v > barriers[best] {
            best = i;
        }
    }
    BarrierCurve {
        sup_barrier: barriers[best],
        argmax_alpha: alphas[best],
        alphas,
        errors,
        error_a,
        error_b,
        barriers,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmcVerdict {
    pub sup_barrier: f64,
    pub epsilon: f64,
    pub connected: bool,
}

impl LmcVerdict {
    pub fn new(sup_barrier: f64, epsilon: f64) -> Self {
        Self {
            sup_barrier,
            epsilon,
            connected: sup_barrier < epsilon,
        }
    }
}

/// Linear mode connectivity on the default grid.
pub fn is_lmc(
    a: &Snapshot,
    b: &Snapshot,
    eval: &Dataset,
    stats: &Dataset,
    epsilon: f64,
    policy: StatPolicy,
) -> Result<LmcVerdict> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return config(format!("epsilon must be positive, got {epsilon}"));
    }
    let curve = barrier_curve(a, b, eval, stats, DEFAULT_GRID, policy)?;
    Ok(LmcVerdict::new(curve.sup_barrier, epsilon))
}

/// Sample standard deviation of dense-run test errors.
pub fn dense_epsilon(errors: &[f64]) -> Result<f64> {
    if errors.len() < 2 {
        return config("epsilon needs at least two dense-run errors");
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt())
}

/// Inputs of a stability test: a start point and how to train from it.
pub struct StabilitySetup<'a> {
    pub start: &'a Snapshot,
    pub mask: &'a BinaryMask,
    pub plan: &'a TrainPlan,
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
    pub grid: usize,
    pub policy: StatPolicy,
}

/// Trains two copies of the start point with SGD seeds `u1` and `u2` and
/// returns the barrier curve between the resulting solutions.
pub fn stability_test(setup: &StabilitySetup<'_>, u1: u64, u2: u64) -> Result<BarrierCurve> {
    let psi_init = setup.start.params.psi();
    let run = |u: u64| -> Result<Snapshot> {
        let plan = setup.plan.clone().with_seed(u);
        let out = Trainer::new(&plan, setup.train)
            .anchor(PsiAnchor::Fixed(&psi_init))
            .run(&setup.start.params, &setup.start.buffers, setup.mask)?;
        Ok(Snapshot::new(out.params, out.buffers))
    };
    let (a, b) = rayon::join(|| run(u1), || run(u2));
    barrier_curve(&a?, &b?, setup.eval, setup.train, setup.grid, setup.policy)
}
