//! TOML experiment configuration.
//!
//! ```toml
//! [model]
//! hidden_dims = [64, 64]
//! norm_kind = "batch_norm"
//!
//! [data]
//! source = "spirals"
//! n = 4000
//!
//! [pipeline]
//! kinds = ["lrr", "aws"]
//! iterations = 8
//!
//! [[transfer.arms]]
//! name = "aws_signed"
//! source = "aws"
//! mode = "signed_init"
//!
//! [seeds]
//! trials = 3
//! ```
//!
//! Every table rejects unknown keys. Input and output widths of the model
//! come from the data.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ticketlab_core::connectivity::StatPolicy;
use ticketlab_core::pipelines::{AnchorPolicy, PipelineConfig, PipelineKind};
use ticketlab_core::{ModelSpec, NormKind, PruneScope, Schedule, TrainPlan, TransferMode};

use crate::datasets::DataSource;
use crate::error::{invalid, HarnessError, Result};
use crate::output::OUTPUT_ENV;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub seeds: SeedSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub norm_kind: NormKind,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
}

fn default_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Blobs,
    Spirals,
    IdxFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: SourceKind,
    pub n: Option<usize>,
    pub noise: Option<f64>,
    pub separation: Option<f64>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Seed of the synthetic generator.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl DataSection {
    /// Relative IDX paths are taken relative to `base`.
    pub fn to_source(&self, base: &Path) -> Result<DataSource> {
        let need_n = || {
            self.n
                .ok_or_else(|| HarnessError::Config("data.n is required for synthetic sources".into()))
        };
        let reject = |field: &str, present: bool| {
            if present {
                Err(HarnessError::Config(format!(
                    "data.{field} does not apply to source {:?}",
                    self.source
                )))
            } else {
                Ok(())
            }
        };
        let src = match self.source {
            SourceKind::Blobs => {
                reject("images", self.images.is_some())?;
                reject("labels", self.labels.is_some())?;
                DataSource::Blobs {
                    n: need_n()?,
                    noise: self.noise.unwrap_or(1.0),
                    separation: self.separation.unwrap_or(4.0),
                }
            }
            SourceKind::Spirals => {
                reject("images", self.images.is_some())?;
                reject("labels", self.labels.is_some())?;
                reject("separation", self.separation.is_some())?;
                DataSource::Spirals {
                    n: need_n()?,
                    noise: self.noise.unwrap_or(0.05),
                }
            }
            SourceKind::IdxFiles => {
                reject("n", self.n.is_some())?;
                reject("noise", self.noise.is_some())?;
                reject("separation", self.separation.is_some())?;
                let (Some(images), Some(labels)) = (&self.images, &self.labels) else {
                    return Err(HarnessError::Config("idx_files needs data.images and data.labels".into()));
                };
                DataSource::IdxFiles {
                    images: base.join(images),
                    labels: base.join(labels),
                }
            }
        };
        src.validate()?;
        Ok(src)
    }
}

/// Training plan without seed or interpolation flag; those are set by the
/// runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr0: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "constant")]
    pub schedule: Schedule,
}

fn default_batch() -> usize {
    64
}

fn default_lr() -> f64 {
    0.1
}

fn default_momentum() -> f64 {
    0.9
}

fn default_wd() -> f64 {
    5e-4
}

fn constant() -> Schedule {
    Schedule::Constant
}

impl PlanSection {
    pub fn to_plan(&self) -> TrainPlan {
        TrainPlan {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            schedule: self.schedule.clone(),
            sgd_seed: 0,
            aws_interpolation: false,
        }
    }

    fn from_plan(p: &TrainPlan) -> Self {
        Self {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr0: p.lr0,
            momentum: p.momentum,
            weight_decay: p.weight_decay,
            schedule: p.schedule.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSection {
    pub kinds: Vec<PipelineKind>,
    pub iterations: usize,
    pub prune_rate: f64,
    pub prune_scope: PruneScope,
    pub wr_rewind_point: Option<usize>,
    pub anchor: AnchorPolicy,
    pub warmup: PlanSection,
    pub iteration: PlanSection,
    #[serde(rename = "final")]
    pub final_: PlanSection,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let d = PipelineConfig::desk_default(PipelineKind::Lrr, 8);
        Self {
            kinds: vec![PipelineKind::Lrr, PipelineKind::Aws],
            iterations: d.iterations,
            prune_rate: d.prune_rate,
            prune_scope: d.prune_scope,
            wr_rewind_point: None,
            anchor: AnchorPolicy::Init,
            warmup: PlanSection::from_plan(&d.warmup_plan),
            iteration: PlanSection::from_plan(&d.iteration_plan),
            final_: PlanSection::from_plan(&d.final_plan),
        }
    }
}

// Missing pipeline keys fall back to the desk defaults field by field.
impl<'de> Deserialize<'de> for PipelineSection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            kinds: Option<Vec<PipelineKind>>,
            iterations: Option<usize>,
            prune_rate: Option<f64>,
            prune_scope: Option<PruneScope>,
            wr_rewind_point: Option<usize>,
            anchor: Option<AnchorPolicy>,
            warmup: Option<PlanSection>,
            iteration: Option<PlanSection>,
            #[serde(rename = "final")]
            final_: Option<PlanSection>,
        }
        let r = Raw::deserialize(d)?;
        let def = PipelineSection::default();
        Ok(Self {
            kinds: r.kinds.unwrap_or(def.kinds),
            iterations: r.iterations.unwrap_or(def.iterations),
            prune_rate: r.prune_rate.unwrap_or(def.prune_rate),
            prune_scope: r.prune_scope.unwrap_or(def.prune_scope),
            wr_rewind_point: r.wr_rewind_point,
            anchor: r.anchor.unwrap_or(def.anchor),
            warmup: r.warmup.unwrap_or(def.warmup),
            iteration: r.iteration.unwrap_or(def.iteration),
            final_: r.final_.unwrap_or(def.final_),
        })
    }
}

impl PipelineSection {
    /// Core pipeline config for one kind with seeds filled in.
    pub fn to_pipeline(&self, kind: PipelineKind, sgd_seed: u64) -> PipelineConfig {
        PipelineConfig {
            kind,
            iterations: self.iterations,
            prune_rate: self.prune_rate,
            prune_scope: self.prune_scope,
            warmup_plan: self.warmup.to_plan().with_seed(sgd_seed),
            iteration_plan: self
                .iteration
                .to_plan()
                .with_seed(sgd_seed)
                .with_interpolation(kind == PipelineKind::Aws),
            final_plan: self.final_.to_plan().with_seed(sgd_seed),
            wr_rewind_point: if kind == PipelineKind::Wr { self.wr_rewind_point } else { None },
            anchor: self.anchor,
        }
    }
}

/// Where an arm's start point comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmSource {
    Dense,
    Imp,
    Wr,
    Lrr,
    Aws,
}

impl ArmSource {
    pub fn pipeline(self) -> Option<PipelineKind> {
        match self {
            ArmSource::Dense => None,
            ArmSource::Imp => Some(PipelineKind::Imp),
            ArmSource::Wr => Some(PipelineKind::Wr),
            ArmSource::Lrr => Some(PipelineKind::Lrr),
            ArmSource::Aws => Some(PipelineKind::Aws),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSection {
    pub name: String,
    pub source: ArmSource,
    /// Start-point construction; omitted means the trained subnetwork.
    #[serde(default)]
    pub mode: Option<TransferMode>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    #[serde(default)]
    pub arms: Vec<ArmSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonMode {
    /// Sample standard deviation of the dense arm's test errors.
    DenseStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Epsilon {
    Value(f64),
    Mode(EpsilonMode),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatPolicyKind {
    Recompute,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default)]
    pub epsilon: Option<Epsilon>,
    #[serde(default = "default_policy")]
    pub stat_policy: StatPolicyKind,
    #[serde(default = "default_stat_batches")]
    pub stat_batches: usize,
    #[serde(default = "default_stat_batch_size")]
    pub stat_batch_size: usize,
    /// Arm-name pairs whose solutions are interpolated in each trial.
    #[serde(default)]
    pub barriers: Vec<[String; 2]>,
}

fn default_grid() -> usize {
    ticketlab_core::connectivity::DEFAULT_GRID
}

fn default_policy() -> StatPolicyKind {
    StatPolicyKind::Recompute
}

fn default_stat_batches() -> usize {
    32
}

fn default_stat_batch_size() -> usize {
    128
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            grid: default_grid(),
            epsilon: None,
            stat_policy: default_policy(),
            stat_batches: default_stat_batches(),
            stat_batch_size: default_stat_batch_size(),
            barriers: Vec::new(),
        }
    }
}

impl AnalysisSection {
    pub fn policy(&self) -> StatPolicy {
        match self.stat_policy {
            StatPolicyKind::Keep => StatPolicy::Keep,
            StatPolicyKind::Recompute => StatPolicy::Recompute {
                batches: self.stat_batches,
                batch_size: self.stat_batch_size,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSection {
    #[serde(default)]
    pub init: u64,
    #[serde(default)]
    pub sgd: u64,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default = "default_transfer_seed")]
    pub transfer: u64,
}

fn one() -> usize {
    1
}

fn default_transfer_seed() -> u64 {
    10_000
}

impl Default for SeedSection {
    fn default() -> Self {
        Self {
            init: 0,
            sgd: 0,
            trials: 1,
            transfer: default_transfer_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("ticketlab-out")
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

impl ExperimentConfig {
    /// Parses and validates; errors carry line/column or the offending field.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok((cfg, text))
    }

    /// Model spec for data of the given shape.
    pub fn spec(&self, input_dim: usize, classes: usize) -> ModelSpec {
        ModelSpec {
            norm_eps: self.model.norm_eps,
            bn_momentum: self.model.bn_momentum,
            ..ModelSpec::new(input_dim, &self.model.hidden_dims, classes, self.model.norm_kind)
        }
    }

    /// Output root, unless overridden by the environment.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output.dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        // widths are placeholders here; the real ones come from the data
        self.spec(1, 2).validate().map_err(|e| invalid("model", e))?;
        self.data.to_source(Path::new("."))?;
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return bad(format!("data.test_fraction must lie in (0, 1), got {}", self.data.test_fraction));
        }

        let p = &self.pipeline;
        let mut kinds = BTreeSet::new();
        for k in &p.kinds {
            if !kinds.insert(k.name()) {
                return bad(format!("pipeline.kinds lists {} twice", k.name()));
            }
        }
        if let Some(r) = p.wr_rewind_point {
            if !p.kinds.contains(&PipelineKind::Wr) {
                return bad("pipeline.wr_rewind_point needs kind wr in pipeline.kinds".into());
            }
            if r > p.warmup.epochs {
                return bad(format!("pipeline.wr_rewind_point {r} exceeds warmup.epochs {}", p.warmup.epochs));
            }
        }
        for (name, plan) in [("warmup", &p.warmup), ("iteration", &p.iteration), ("final", &p.final_)] {
            plan.to_plan()
                .validate()
                .map_err(|e| invalid(&format!("pipeline.{name}"), e))?;
        }
        for &k in &p.kinds {
            p.to_pipeline(k, 0)
                .validate()
                .map_err(|e| invalid(&format!("pipeline ({})", k.name()), e))?;
        }

        let mut names = BTreeSet::new();
        for arm in &self.transfer.arms {
            if arm.name.is_empty() || arm.name.contains(['~', '/', '\\', ',', '"']) || arm.name.starts_with('.') {
                return bad(format!("transfer.arms: invalid arm name '{}'", arm.name));
            }
            if !names.insert(arm.name.as_str()) {
                return bad(format!("transfer.arms: duplicate arm name '{}'", arm.name));
            }
            match arm.source.pipeline() {
                None if arm.mode.is_some() => {
                    return bad(format!("transfer.arms '{}': a dense arm takes no mode", arm.name));
                }
                Some(k) if !p.kinds.contains(&k) => {
                    return bad(format!(
                        "transfer.arms '{}': source {} is not in pipeline.kinds",
                        arm.name,
                        k.name()
                    ));
                }
                _ => {}
            }
            if let Some(TransferMode::SignedInitBiasConst(c)) = arm.mode {
                if !c.is_finite() {
                    return bad(format!("transfer.arms '{}': bias constant must be finite", arm.name));
                }
            }
        }

        let a = &self.analysis;
        if a.grid < 3 {
            return bad(format!("analysis.grid must be at least 3, got {}", a.grid));
        }
        if a.stat_batches == 0 || a.stat_batch_size == 0 {
            return bad("analysis.stat_batches and analysis.stat_batch_size must be positive".into());
        }
        for [x, y] in &a.barriers {
            for n in [x, y] {
                if !names.contains(n.as_str()) {
                    return bad(format!("analysis.barriers: unknown arm '{n}'"));
                }
            }
        }
        match a.epsilon {
            Some(Epsilon::Value(e)) if !(e.is_finite() && e > 0.0) => {
                return bad(format!("analysis.epsilon must be positive, got {e}"));
            }
            Some(Epsilon::Mode(EpsilonMode::DenseStd)) => {
                if !self.transfer.arms.iter().any(|a| a.source == ArmSource::Dense) {
                    return bad("analysis.epsilon = \"dense_std\" needs an arm with source = \"dense\"".into());
                }
                if self.seeds.trials < 2 {
                    return bad("analysis.epsilon = \"dense_std\" needs seeds.trials >= 2".into());
                }
            }
            _ => {}
        }
        if self.seeds.trials == 0 {
            return bad("seeds.trials must be positive".into());
        }
        Ok(())
    }
}

/// Parses a transfer mode name; the bias-constant mode is written
/// `signed_init_bias_const:0.1` or `signed_init_bias_const(0.1)`.
pub fn parse_mode(s: &str) -> Result<TransferMode> {
    let s = s.trim();
    let simple = match s {
        "subnetwork" => Some(TransferMode::Subnetwork),
        "mask_only" => Some(TransferMode::MaskOnly),
        "signed_init" => Some(TransferMode::SignedInit),
        "signed_keep_norm" => Some(TransferMode::SignedKeepNorm),
        _ => None,
    };
    if let Some(m) = simple {
        return Ok(m);
    }
    let arg = s
        .strip_prefix("signed_init_bias_const")
        .and_then(|r| r.strip_prefix(':').or_else(|| r.strip_prefix('(').and_then(|r| r.strip_suffix(')'))));
    match arg.map(|a| a.trim().parse::<f64>()) {
        Some(Ok(c)) if c.is_finite() => Ok(TransferMode::SignedInitBiasConst(c)),
        _ => Err(HarnessError::Config(format!(
            "unknown transfer mode '{s}' (expected subnetwork, mask_only, signed_init, signed_keep_norm or signed_init_bias_const:<c>)"
        ))),
    }
}
