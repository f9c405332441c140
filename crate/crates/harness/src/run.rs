//! Full experiment: pipelines, final trainings per arm, barrier analyses,
//! then CSVs, checkpoints, plots, a summary and the manifest.
//!
//! Trial `k` uses init seed `seeds.init + k`, SGD seed base
//! `seeds.sgd + 1000 k` (pipeline round `t` adds `t`) and fresh-init seed
//! `seeds.transfer + k` for transfers.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ticketlab_core::connectivity::{barrier_curve, dense_epsilon, eval_error, BarrierCurve, LmcVerdict, Snapshot};
use ticketlab_core::pipelines::{self, PipelineKind, PipelineResult, Solution, Start};
use ticketlab_core::{masking, Dataset, ModelSpec, TransferMode};

use crate::checkpoint::{Checkpoint, Provenance};
use crate::config::{ArmSection, Epsilon, ExperimentConfig};
use crate::datasets::{make_dataset, split};
use crate::error::{invalid, Context, Result};
use crate::output::{OutputDir, RunManifest, SeedRecord};
use crate::plot::{aggregate, render};
use crate::tables::{read_points_from, to_csv, BarrierRow, MetricsRow, Schema, SparsityRow};

const TRIAL_SEED_STRIDE: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialSeeds {
    pub init: u64,
    pub sgd: u64,
    pub transfer: u64,
}

impl TrialSeeds {
    pub fn for_trial(cfg: &ExperimentConfig, trial: usize) -> Self {
        let k = trial as u64;
        Self {
            init: cfg.seeds.init.wrapping_add(k),
            sgd: cfg.seeds.sgd.wrapping_add(k.wrapping_mul(TRIAL_SEED_STRIDE)),
            transfer: cfg.seeds.transfer.wrapping_add(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub source: String,
    pub mode: String,
    pub trial: usize,
    pub remaining_ratio: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub kind: String,
    pub trial: usize,
    pub remaining_ratio: f64,
    /// Test accuracy after the last pruning round's training.
    pub last_round_test_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierSummary {
    pub a: String,
    pub b: String,
    pub trial: usize,
    pub sup_barrier: f64,
    pub argmax_alpha: f64,
    pub connected: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub trials: usize,
    pub epsilon: Option<f64>,
    pub pipelines: Vec<PipelineSummary>,
    pub arms: Vec<ArmSummary>,
    pub barriers: Vec<BarrierSummary>,
}

impl Summary {
    pub fn arm(&self, name: &str) -> impl Iterator<Item = &ArmSummary> + '_ {
        let name = name.to_string();
        self.arms.iter().filter(move |a| a.arm == name)
    }

    pub fn barrier<'a>(&'a self, a: &'a str, b: &'a str) -> impl Iterator<Item = &'a BarrierSummary> + 'a {
        self.barriers.iter().filter(move |r| r.a == a && r.b == b)
    }
}

#[derive(Debug)]
pub struct RunReport {
    pub summary: Summary,
    pub manifest: RunManifest,
}

struct ArmOutcome {
    solution: Solution,
    test_acc: f64,
    remaining_ratio: f64,
}

struct TrialOutcome {
    seeds: TrialSeeds,
    pipelines: Vec<PipelineResult>,
    arms: Vec<ArmOutcome>,
    curves: Vec<BarrierCurve>,
}

fn arm_mode(arm: &ArmSection) -> String {
    match (arm.source.pipeline(), arm.mode) {
        (None, _) => "dense".into(),
        (Some(_), None) => TransferMode::Subnetwork.name(),
        (Some(_), Some(m)) => m.name(),
    }
}

fn source_name(arm: &ArmSection) -> &'static str {
    arm.source.pipeline().map_or("dense", PipelineKind::name)
}

/// Loads the data and splits it into (train, test).
pub fn load_data(cfg: &ExperimentConfig, base: &Path) -> Result<(Dataset, Dataset)> {
    let source = cfg.data.to_source(base)?;
    let full = make_dataset(&source, cfg.data.seed)?;
    split(&full, cfg.data.test_fraction, cfg.data.split_seed)
}

fn run_trial(cfg: &ExperimentConfig, spec: &ModelSpec, train: &Dataset, test: &Dataset, trial: usize) -> Result<TrialOutcome> {
    let seeds = TrialSeeds::for_trial(cfg, trial);
    let p = &cfg.pipeline;

    let pipelines: Vec<PipelineResult> = p
        .kinds
        .par_iter()
        .map(|&kind| {
            let pc = p.to_pipeline(kind, seeds.sgd);
            pipelines::run(&pc, spec, train, Some(test), seeds.init)
                .context(|| format!("pipeline {} trial {trial}", kind.name()))
        })
        .collect::<Result<_>>()?;

    let final_plan = p.final_.to_plan().with_seed(seeds.sgd);
    let arms: Vec<ArmOutcome> = cfg
        .transfer
        .arms
        .par_iter()
        .map(|arm| {
            let ctx = || format!("arm {} trial {trial}", arm.name);
            let solution = match arm.source.pipeline() {
                None => pipelines::train_dense(spec, seeds.init, &final_plan, train, Some(test)),
                Some(kind) => {
                    let result = pipelines.iter().find(|r| r.kind == kind).expect("validated arm source");
                    let start = match arm.mode {
                        None | Some(TransferMode::Subnetwork) => Start::Subnetwork,
                        Some(mode) => Start::Transfer {
                            mode,
                            fresh_seed: seeds.transfer,
                        },
                    };
                    pipelines::final_train(result, start, &final_plan, train, Some(test))
                }
            }
            .context(ctx)?;
            let test_acc = 1.0 - eval_error(&solution.params, &solution.buffers, test).context(ctx)?;
            let remaining_ratio = masking::remaining_ratio(&solution.mask).context(ctx)?;
            Ok(ArmOutcome {
                solution,
                test_acc,
                remaining_ratio,
            })
        })
        .collect::<Result<_>>()?;

    let index = |name: &str| {
        cfg.transfer
            .arms
            .iter()
            .position(|a| a.name == name)
            .expect("validated barrier arm")
    };
    let policy = cfg.analysis.policy();
    let curves = cfg
        .analysis
        .barriers
        .par_iter()
        .map(|[a, b]| {
            let snap = |i: usize| Snapshot::new(arms[i].solution.params.clone(), arms[i].solution.buffers.clone());
            barrier_curve(&snap(index(a)), &snap(index(b)), test, train, cfg.analysis.grid, policy)
                .context(|| format!("barrier {a}~{b} trial {trial}"))
        })
        .collect::<Result<_>>()?;

    Ok(TrialOutcome {
        seeds,
        pipelines,
        arms,
        curves,
    })
}

/// Runs the experiment and writes every artifact under `out_root`.
/// `base` resolves relative data paths.
pub fn run_experiment(cfg: &ExperimentConfig, config_text: &str, base: &Path, out_root: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let clock = Instant::now();
    let (train, test) = load_data(cfg, base)?;
    let spec = cfg.spec(train.dim(), train.classes());
    spec.validate().map_err(|e| invalid("model", e))?;

    let trials: Vec<TrialOutcome> = (0..cfg.seeds.trials)
        .into_par_iter()
        .map(|k| run_trial(cfg, &spec, &train, &test, k))
        .collect::<Result<_>>()?;

    let epsilon = match cfg.analysis.epsilon {
        None => None,
        Some(Epsilon::Value(e)) => Some(e),
        Some(Epsilon::Mode(_)) => {
            let dense = cfg
                .transfer
                .arms
                .iter()
                .position(|a| a.source.pipeline().is_none())
                .expect("validated dense arm");
            let errors: Vec<f64> = trials.iter().map(|t| 1.0 - t.arms[dense].test_acc).collect();
            Some(dense_epsilon(&errors).context(|| "dense epsilon".to_string())?)
        }
    };

    let mut out = OutputDir::create(out_root)?;
    let mut metrics = Vec::new();
    let mut sparsity = Vec::new();
    let mut barriers = Vec::new();
    let mut summary = Summary {
        trials: cfg.seeds.trials,
        epsilon,
        pipelines: Vec::new(),
        arms: Vec::new(),
        barriers: Vec::new(),
    };

    for (k, t) in trials.iter().enumerate() {
        for r in &t.pipelines {
            let name = format!("{}_rounds", r.kind.name());
            if let Some(acc) = r.warmup_log.last().and_then(|m| m.test_acc) {
                sparsity.push(SparsityRow {
                    arm: name.clone(),
                    trial: k,
                    remaining_ratio: 1.0,
                    test_acc: acc,
                });
            }
            for rec in &r.records {
                if let Some(acc) = rec.log.last().and_then(|m| m.test_acc) {
                    sparsity.push(SparsityRow {
                        arm: name.clone(),
                        trial: k,
                        remaining_ratio: rec.trained_ratio,
                        test_acc: acc,
                    });
                }
            }
            summary.pipelines.push(PipelineSummary {
                kind: r.kind.name().into(),
                trial: k,
                remaining_ratio: masking::remaining_ratio(&r.final_mask)?,
                last_round_test_acc: r.records.last().and_then(|x| x.log.last()).and_then(|m| m.test_acc),
            });
            let mut ckpt = Checkpoint::new(r.final_params.clone(), r.final_buffers.clone());
            ckpt.mask = Some(r.final_mask.clone());
            ckpt.signs = Some(r.signs.clone());
            ckpt.provenance = Provenance {
                origin: format!("pipeline:{}", r.kind.name()),
                init_seed: Some(t.seeds.init),
                sgd_seed: Some(t.seeds.sgd),
                trial: Some(k),
            };
            out.write(
                &format!("pipelines/{}/trial{k}.ckpt", r.kind.name()),
                r.kind.name(),
                &ckpt.to_bytes(),
            )?;
        }

        for (arm, o) in cfg.transfer.arms.iter().zip(&t.arms) {
            for m in &o.solution.log.epochs {
                metrics.push(MetricsRow {
                    arm: arm.name.clone(),
                    trial: k,
                    epoch: m.epoch,
                    train_loss: m.train_loss,
                    train_acc: m.train_acc,
                    test_acc: m.test_acc,
                });
            }
            sparsity.push(SparsityRow {
                arm: arm.name.clone(),
                trial: k,
                remaining_ratio: o.remaining_ratio,
                test_acc: o.test_acc,
            });
            summary.arms.push(ArmSummary {
                arm: arm.name.clone(),
                source: source_name(arm).into(),
                mode: arm_mode(arm),
                trial: k,
                remaining_ratio: o.remaining_ratio,
                test_acc: o.test_acc,
            });
            let mut ckpt = Checkpoint::new(o.solution.params.clone(), o.solution.buffers.clone());
            ckpt.mask = Some(o.solution.mask.clone());
            ckpt.provenance = Provenance {
                origin: format!("solution:{}", arm.name),
                init_seed: Some(t.seeds.init),
                sgd_seed: Some(t.seeds.sgd),
                trial: Some(k),
            };
            out.write(&format!("arms/{}/trial{k}/solution.ckpt", arm.name), &arm.name, &ckpt.to_bytes())?;
        }

        for ([a, b], c) in cfg.analysis.barriers.iter().zip(&t.curves) {
            let label = format!("{a}~{b}");
            for ((&alpha, &error), &barrier) in c.alphas.iter().zip(&c.errors).zip(&c.barriers) {
                barriers.push(BarrierRow {
                    arm: label.clone(),
                    trial: k,
                    alpha,
                    error,
                    barrier,
                });
            }
            summary.barriers.push(BarrierSummary {
                a: a.clone(),
                b: b.clone(),
                trial: k,
                sup_barrier: c.sup_barrier,
                argmax_alpha: c.argmax_alpha,
                connected: epsilon.map(|e| LmcVerdict::new(c.sup_barrier, e).connected),
            });
        }
    }

    let csvs = [
        ("metrics", Schema::Metrics, to_csv(&metrics, Schema::Metrics)),
        ("barriers", Schema::Barrier, to_csv(&barriers, Schema::Barrier)),
        ("sparsity", Schema::Sparsity, to_csv(&sparsity, Schema::Sparsity)),
    ];
    for (stem, schema, bytes) in &csvs {
        out.write(&format!("{stem}.csv"), "all", bytes)?;
        // nothing to draw without rows
        if let Ok(points) = read_points_from(bytes.as_slice(), Path::new(stem)) {
            let (x, y) = schema.axes();
            let svg = render(schema.title(), x, y, &aggregate(&points.1));
            out.write(&format!("plots/{stem}.svg"), "all", svg.as_bytes())?;
        }
    }
    let json = serde_json::to_vec_pretty(&summary).expect("summary serializes");
    out.write("summary.json", "all", &json)?;

    let seeds = SeedRecord {
        init: cfg.seeds.init,
        sgd: cfg.seeds.sgd,
        transfer: cfg.seeds.transfer,
        split: cfg.data.split_seed,
        trials: cfg.seeds.trials,
    };
    let manifest = out.finish(config_text, seeds, clock.elapsed().as_secs_f64())?;
    Ok(RunReport { summary, manifest })
}

/// `ticketlab run`: exit 0 on success, 2 on configuration errors, 1 otherwise.
pub fn cli_run(config_path: &Path) -> i32 {
    let result = ExperimentConfig::load(config_path).and_then(|(cfg, text)| {
        let base = config_path.parent().unwrap_or(Path::new("."));
        let out = cfg.output_dir();
        let report = run_experiment(&cfg, &text, base, &out)?;
        Ok((report, out))
    });
    match result {
        Ok((report, out)) => {
            for a in &report.summary.arms {
                println!(
                    "arm {:<20} trial {} remaining {:.4} test_acc {:.4}",
                    a.arm, a.trial, a.remaining_ratio, a.test_acc
                );
            }
            for b in &report.summary.barriers {
                println!(
                    "barrier {}~{} trial {} sup {:.4} at alpha {:.3}",
                    b.a, b.b, b.trial, b.sup_barrier, b.argmax_alpha
                );
            }
            println!("wrote {} files to {}", report.manifest.files.len() + 1, out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
