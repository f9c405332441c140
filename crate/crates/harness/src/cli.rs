//! `ticketlab` subcommands. Every command returns a process exit code:
//! 0 on success, 2 for invalid configuration or arguments, 1 otherwise.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ticketlab_core::connectivity::{barrier_curve, stability_test, BarrierCurve, Snapshot, StabilitySetup, StatPolicy};
use ticketlab_core::masking::sign0;
use ticketlab_core::pipelines::{start_point_from, train_from, Start};
use ticketlab_core::{BinaryMask, Dataset, Schedule, TrainPlan, TransferMode};

use crate::checkpoint::{layout_digest, params_checksum, Checkpoint, Provenance};
use crate::config::{parse_mode, DataSection, SourceKind};
use crate::datasets::{make_dataset, split};
use crate::error::{invalid, Context, HarnessError, Result};
use crate::output::write_atomic;
use crate::plot::emit_plots;
use crate::run::cli_run;
use crate::tables::{to_csv, BarrierRow, MetricsRow, Schema};

#[derive(Debug, Parser)]
#[command(name = "ticketlab", version, about = "Lottery-ticket pruning, sign transfer and mode-connectivity experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a full experiment from a TOML config.
    Run { config: PathBuf },
    /// Error barrier between two checkpoints.
    Barrier(BarrierArgs),
    /// Final training from a pipeline checkpoint under a transfer mode.
    Transfer(TransferArgs),
    /// SGD-noise stability test from a start checkpoint.
    Stability(StabilityArgs),
    /// Generate (or read) a dataset and write its train/test split as CSV.
    Dataset(DatasetArgs),
    /// Render SVG charts from metrics, barrier or sparsity CSVs.
    Plot(PlotArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Blobs,
    Spirals,
    IdxFiles,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value = "spirals")]
    pub source: SourceArg,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub separation: Option<f64>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, Dataset)> {
        let synthetic = self.source != SourceArg::IdxFiles;
        let section = DataSection {
            source: match self.source {
                SourceArg::Blobs => SourceKind::Blobs,
                SourceArg::Spirals => SourceKind::Spirals,
                SourceArg::IdxFiles => SourceKind::IdxFiles,
            },
            n: self.n.or(synthetic.then_some(4000)),
            noise: self.noise,
            separation: self.separation,
            images: self.images.clone(),
            labels: self.labels.clone(),
            seed: self.data_seed,
            test_fraction: self.test_fraction,
            split_seed: self.split_seed,
        };
        let full = make_dataset(&section.to_source(Path::new("."))?, self.data_seed)?;
        split(&full, self.test_fraction, self.split_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Step,
    Cosine,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, value_enum, default_value = "step")]
    pub schedule: ScheduleArg,
    /// Step-schedule epochs; defaults to half and three quarters of training.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub sgd_seed: u64,
}

impl PlanArgs {
    fn plan(&self) -> Result<TrainPlan> {
        let schedule = match self.schedule {
            ScheduleArg::Constant => Schedule::Constant,
            ScheduleArg::Cosine => Schedule::Cosine,
            ScheduleArg::Step => Schedule::Step {
                milestones: self.milestones.clone().unwrap_or_else(|| {
                    let mut m = vec![self.epochs / 2, 3 * self.epochs / 4];
                    m.retain(|&e| e > 0);
                    m.dedup();
                    m
                }),
                factor: self.gamma,
            },
        };
        let plan = TrainPlan {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            schedule,
            sgd_seed: self.sgd_seed,
            aws_interpolation: false,
        };
        plan.validate().map_err(|e| invalid("", e))?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Recompute,
    Keep,
}

#[derive(Debug, Clone, Args)]
pub struct AnalysisArgs {
    #[arg(long, default_value_t = ticketlab_core::connectivity::DEFAULT_GRID)]
    pub grid: usize,
    #[arg(long, value_enum, default_value = "recompute")]
    pub stat_policy: PolicyArg,
    #[arg(long, default_value_t = 32)]
    pub stat_batches: usize,
    #[arg(long, default_value_t = 128)]
    pub stat_batch_size: usize,
}

impl AnalysisArgs {
    fn policy(&self) -> StatPolicy {
        match self.stat_policy {
            PolicyArg::Keep => StatPolicy::Keep,
            PolicyArg::Recompute => StatPolicy::Recompute {
                batches: self.stat_batches,
                batch_size: self.stat_batch_size,
            },
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BarrierArgs {
    pub ckpt_a: PathBuf,
    pub ckpt_b: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    #[arg(long, default_value = "barriers.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TransferArgs {
    pub pipeline_ckpt: PathBuf,
    /// subnetwork, mask_only, signed_init, signed_keep_norm or
    /// signed_init_bias_const:<c>
    #[arg(long)]
    pub mode: String,
    #[arg(long, default_value_t = 0)]
    pub fresh_seed: u64,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "transfer-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct StabilityArgs {
    pub start_ckpt: PathBuf,
    #[arg(long)]
    pub u1: u64,
    #[arg(long)]
    pub u2: u64,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
    #[arg(long, default_value = "stability.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "data-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    #[arg(required = true)]
    pub csv: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    pub out: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Run { config } => return cli_run(&config),
        Command::Barrier(a) => cli_barrier(&a),
        Command::Transfer(a) => cli_transfer(&a),
        Command::Stability(a) => cli_stability(&a),
        Command::Dataset(a) => cli_dataset(&a),
        Command::Plot(a) => emit_plots(&a.csv, &a.out).map(|paths| {
            for p in paths {
                println!("wrote {}", p.display());
            }
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn check_data(ckpt: &Checkpoint, data: &Dataset, path: &Path) -> Result<()> {
    let spec = ckpt.spec();
    if spec.input_dim != data.dim() || spec.output_dim != data.classes() {
        return Err(HarnessError::Other(format!(
            "{}: model expects {} inputs and {} classes, data has {} and {}",
            path.display(),
            spec.input_dim,
            spec.output_dim,
            data.dim(),
            data.classes()
        )));
    }
    Ok(())
}

fn write_curve(curve: &BarrierCurve, label: &str, out: &Path) -> Result<()> {
    let rows: Vec<BarrierRow> = curve
        .alphas
        .iter()
        .zip(&curve.errors)
        .zip(&curve.barriers)
        .map(|((&alpha, &error), &barrier)| BarrierRow {
            arm: label.to_string(),
            trial: 0,
            alpha,
            error,
            barrier,
        })
        .collect();
    write_atomic(out, &to_csv(&rows, Schema::Barrier))?;
    println!("sup_barrier {}", curve.sup_barrier);
    println!("argmax_alpha {}", curve.argmax_alpha);
    Ok(())
}

pub fn cli_barrier(a: &BarrierArgs) -> Result<()> {
    let ca = Checkpoint::load(&a.ckpt_a)?;
    let cb = Checkpoint::load(&a.ckpt_b)?;
    if !ca.params.same_layout(&cb.params) {
        return Err(HarnessError::Other(format!(
            "layout mismatch: {} has layout {}, {} has layout {}",
            a.ckpt_a.display(),
            layout_digest(ca.spec()),
            a.ckpt_b.display(),
            layout_digest(cb.spec())
        )));
    }
    let (train, test) = a.data.load()?;
    check_data(&ca, &train, &a.ckpt_a)?;
    let curve = barrier_curve(
        &Snapshot::new(ca.params, ca.buffers),
        &Snapshot::new(cb.params, cb.buffers),
        &test,
        &train,
        a.analysis.grid,
        a.analysis.policy(),
    )
    .context(|| "barrier".to_string())?;
    write_curve(&curve, "a~b", &a.out)
}

pub fn cli_transfer(a: &TransferArgs) -> Result<()> {
    let mode = parse_mode(&a.mode)?;
    let plan = a.plan.plan()?;
    let ckpt = Checkpoint::load(&a.pipeline_ckpt)?;
    let Some(mask) = ckpt.mask.clone() else {
        return Err(HarnessError::Other(format!(
            "{}: checkpoint carries no mask",
            a.pipeline_ckpt.display()
        )));
    };
    let signs = match (&ckpt.signs, mode.uses_signs()) {
        (Some(s), _) => s.clone(),
        (None, true) => {
            return Err(HarnessError::Other(format!(
                "{}: mode {} needs signs but the checkpoint has none",
                a.pipeline_ckpt.display(),
                mode.name()
            )))
        }
        // unused by sign-free modes
        (None, false) => sign0(ckpt.params.values())?,
    };
    let (train, test) = a.data.load()?;
    check_data(&ckpt, &train, &a.pipeline_ckpt)?;
    let start = match mode {
        TransferMode::Subnetwork => Start::Subnetwork,
        mode => Start::Transfer {
            mode,
            fresh_seed: a.fresh_seed,
        },
    };
    let ctx = || format!("transfer {}", mode.name());
    let (p0, m) = start_point_from(&ckpt.params, &mask, &signs, start).context(ctx)?;
    let checksum = params_checksum(&p0);
    let provenance = |origin: &str| Provenance {
        origin: origin.to_string(),
        init_seed: Some(a.fresh_seed),
        sgd_seed: Some(plan.sgd_seed),
        trial: None,
    };
    let mut start_ckpt = Checkpoint::new(p0.clone(), ticketlab_core::NormBuffers::fresh(p0.spec()));
    start_ckpt.mask = Some(m.clone());
    start_ckpt.provenance = provenance("start");
    start_ckpt.save(&a.out.join("start.ckpt"))?;

    let sol = train_from(p0, m, &plan, &train, Some(&test)).context(ctx)?;
    let mut sol_ckpt = Checkpoint::new(sol.params.clone(), sol.buffers.clone());
    sol_ckpt.mask = Some(sol.mask.clone());
    if mode.uses_signs() {
        sol_ckpt.signs = Some(signs);
    }
    sol_ckpt.provenance = provenance(&format!("solution:{}", mode.name()));
    sol_ckpt.save(&a.out.join("solution.ckpt"))?;
    let rows: Vec<MetricsRow> = sol
        .log
        .epochs
        .iter()
        .map(|e| MetricsRow {
            arm: mode.name(),
            trial: 0,
            epoch: e.epoch,
            train_loss: e.train_loss,
            train_acc: e.train_acc,
            test_acc: e.test_acc,
        })
        .collect();
    write_atomic(&a.out.join("metrics.csv"), &to_csv(&rows, Schema::Metrics))?;
    println!("start_sha256 {checksum}");
    if let Some(acc) = sol.log.last().and_then(|e| e.test_acc) {
        println!("test_acc {acc}");
    }
    Ok(())
}

pub fn cli_stability(a: &StabilityArgs) -> Result<()> {
    let plan = a.plan.plan()?;
    let ckpt = Checkpoint::load(&a.start_ckpt)?;
    let (train, test) = a.data.load()?;
    check_data(&ckpt, &train, &a.start_ckpt)?;
    let mask = ckpt.mask.clone().unwrap_or_else(|| BinaryMask::dense(ckpt.params.layout()));
    let start = Snapshot::new(ckpt.params, ckpt.buffers);
    let setup = StabilitySetup {
        start: &start,
        mask: &mask,
        plan: &plan,
        train: &train,
        eval: &test,
        grid: a.analysis.grid,
        policy: a.analysis.policy(),
    };
    let curve = stability_test(&setup, a.u1, a.u2).context(|| "stability".to_string())?;
    write_curve(&curve, &format!("{}~{}", a.u1, a.u2), &a.out)
}

fn data_csv(d: &Dataset) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header: Vec<String> = (0..d.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).expect("in-memory write");
    for i in 0..d.len() {
        let mut rec: Vec<String> = d.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(d.labels()[i].to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn cli_dataset(a: &DatasetArgs) -> Result<()> {
    let (train, test) = a.data.load()?;
    write_atomic(&a.out.join("train.csv"), &data_csv(&train))?;
    write_atomic(&a.out.join("test.csv"), &data_csv(&test))?;
    println!("train {} test {} dim {} classes {}", train.len(), test.len(), train.dim(), train.classes());
    Ok(())
}
