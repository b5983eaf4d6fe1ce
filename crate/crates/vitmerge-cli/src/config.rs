//! Experiment configuration file.
//!
//! One TOML file describes a whole experiment: model geometry, the task
//! roster, train budgets, merge recipe, gate settings, the m sweep and the
//! seed list. The schema is strict (unknown keys are rejected) and carries
//! an explicit version so stale files fail loudly instead of silently
//! meaning something else. All randomness flows from the seeds written
//! here; nothing reads the clock or the environment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vitmerge::gate::SimilarityStrategy;
use vitmerge::train::ensure_distinct_tasks;
use vitmerge::{Family, SyntheticTaskSpec, TrainConfig, ViTConfig};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Merge method as named on the command line and in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "avgmean")]
    AvgMean,
    #[serde(rename = "taskarith")]
    TaskArith,
    #[serde(rename = "regmean")]
    RegMean,
    #[serde(rename = "gated-avgmean")]
    GatedAvgMean,
    #[serde(rename = "gated-regmean")]
    GatedRegMean,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::AvgMean => "avgmean",
            Method::TaskArith => "taskarith",
            Method::RegMean => "regmean",
            Method::GatedAvgMean => "gated-avgmean",
            Method::GatedRegMean => "gated-regmean",
        }
    }

    pub fn from_name(name: &str) -> Result<Method> {
        match name {
            "avgmean" => Ok(Method::AvgMean),
            "taskarith" => Ok(Method::TaskArith),
            "regmean" => Ok(Method::RegMean),
            "gated-avgmean" => Ok(Method::GatedAvgMean),
            "gated-regmean" => Ok(Method::GatedRegMean),
            other => Err(Error::Config(format!(
                "unknown method '{other}'; expected avgmean, taskarith, regmean, \
                 gated-avgmean or gated-regmean"
            ))),
        }
    }

    pub fn is_gated(self) -> bool {
        matches!(self, Method::GatedAvgMean | Method::GatedRegMean)
    }

    /// The static half of a gated method.
    pub fn static_method(self) -> Option<vitmerge::StaticMethod> {
        match self {
            Method::GatedAvgMean => Some(vitmerge::StaticMethod::AvgMean),
            Method::GatedRegMean => Some(vitmerge::StaticMethod::RegMean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl ModelSection {
    /// Geometry with the classifier width a given run needs.
    pub fn vit_config(&self, num_classes: usize) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            dim: self.dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            num_classes,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub task_id: usize,
    pub num_classes: usize,
    pub family: Family,
    pub noise_std: f64,
    pub seed: u64,
}

impl TaskSection {
    pub fn spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task_id: self.task_id,
            num_classes: self.num_classes,
            family: self.family,
            noise_std: self.noise_std,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Training samples generated per task.
    pub train_samples: usize,
    /// Test samples generated per task.
    pub test_samples: usize,
}

fn default_epochs() -> usize {
    TrainConfig::default().epochs
}
fn default_batch_size() -> usize {
    TrainConfig::default().batch_size
}
fn default_learning_rate() -> f64 {
    TrainConfig::default().learning_rate
}
fn default_momentum() -> f64 {
    TrainConfig::default().momentum
}
fn default_weight_decay() -> f64 {
    TrainConfig::default().weight_decay
}

/// One stage's SGD budget. The seed is not part of the file; it is derived
/// from the experiment seed and the stage when the stage runs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
        }
    }
}

fn default_gate_hidden() -> Vec<usize> {
    vec![32]
}
fn default_gate_frac() -> f64 {
    0.15
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSection {
    /// Hidden widths of the gate MLP; empty means a linear map.
    #[serde(default = "default_gate_hidden")]
    pub hidden: Vec<usize>,
    /// Fraction of each task's test split used to train the gate (and to
    /// accumulate gram matrices).
    #[serde(default = "default_gate_frac")]
    pub frac: f64,
}

impl Default for GateSection {
    fn default() -> Self {
        GateSection { hidden: default_gate_hidden(), frac: default_gate_frac() }
    }
}

fn default_method() -> Method {
    Method::RegMean
}
fn default_lambda() -> f64 {
    0.75
}
fn default_alpha() -> f64 {
    0.9
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSection {
    #[serde(default = "default_method")]
    pub method: Method,
    /// Task-vector scale for task arithmetic.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Off-diagonal gram damping for the closed-form merge.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Task id whose classifier head static merges keep; defaults to the
    /// lowest task id.
    #[serde(default)]
    pub classifier_choice: Option<usize>,
}

impl Default for RecipeSection {
    fn default() -> Self {
        RecipeSection {
            method: default_method(),
            lambda: default_lambda(),
            alpha: default_alpha(),
            classifier_choice: None,
        }
    }
}

fn default_strategy() -> SimilarityStrategy {
    SimilarityStrategy::ConcatCombined
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilaritySection {
    #[serde(default = "default_strategy")]
    pub strategy: SimilarityStrategy,
}

impl Default for SimilaritySection {
    fn default() -> Self {
        SimilaritySection { strategy: default_strategy() }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Gated-block counts to merge and evaluate; `None` means
    /// `{0, 1, 2, depth}`.
    #[serde(default)]
    pub m: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelSection,
    pub tasks: Vec<TaskSection>,
    pub data: DataSection,
    #[serde(default)]
    pub pretrain: TrainSection,
    #[serde(default)]
    pub finetune: TrainSection,
    /// Budget for the from-scratch baseline models; falls back to
    /// `[finetune]` when the section is absent.
    #[serde(default)]
    pub scratch: Option<TrainSection>,
    #[serde(default)]
    pub gate_train: TrainSection,
    #[serde(default)]
    pub gate: GateSection,
    #[serde(default)]
    pub recipe: RecipeSection,
    #[serde(default)]
    pub similarity: SimilaritySection,
    #[serde(default)]
    pub sweep: SweepSection,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    /// Task specs in ascending task-id order, the order every stage uses.
    pub fn specs(&self) -> Vec<SyntheticTaskSpec> {
        let mut specs: Vec<SyntheticTaskSpec> = self.tasks.iter().map(|t| t.spec()).collect();
        specs.sort_by_key(|s| s.task_id);
        specs
    }

    pub fn task_ids(&self) -> Vec<usize> {
        self.specs().iter().map(|s| s.task_id).collect()
    }

    /// Width of the joint pretraining head.
    pub fn union_classes(&self) -> usize {
        self.tasks.iter().map(|t| t.num_classes).sum()
    }

    pub fn classifier_choice(&self) -> usize {
        self.recipe
            .classifier_choice
            .unwrap_or_else(|| self.task_ids().into_iter().min().unwrap_or(0))
    }

    /// Training budget for the from-scratch baselines.
    pub fn scratch_train(&self) -> &TrainSection {
        self.scratch.as_ref().unwrap_or(&self.finetune)
    }

    /// The m values to merge and evaluate, ascending and deduplicated.
    pub fn sweep_m(&self) -> Vec<usize> {
        let mut ms = self
            .sweep
            .m
            .clone()
            .unwrap_or_else(|| vec![0, 1, 2, self.model.depth]);
        ms.sort_unstable();
        ms.dedup();
        ms
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version is {}, this build reads {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("tasks: at least one [[tasks]] entry is required".into()));
        }
        let specs = self.specs();
        for s in &specs {
            s.validate().map_err(|e| Error::Config(format!("tasks: {e}")))?;
        }
        ensure_distinct_tasks(&specs).map_err(|e| Error::Config(format!("tasks: {e}")))?;
        self.model
            .vit_config(self.union_classes())
            .validate()
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        if self.data.train_samples == 0 || self.data.test_samples == 0 {
            return Err(Error::Config("data: train_samples and test_samples must be positive".into()));
        }
        for (name, section) in [
            ("pretrain", &self.pretrain),
            ("finetune", &self.finetune),
            ("scratch", self.scratch_train()),
            ("gate_train", &self.gate_train),
        ] {
            section.train_config(0).validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if !(self.gate.frac > 0.0 && self.gate.frac <= 1.0) {
            return Err(Error::Config(format!("gate: frac must be in (0, 1], got {}", self.gate.frac)));
        }
        if ((self.data.test_samples as f64) * self.gate.frac).floor() < 1.0 {
            return Err(Error::Config(format!(
                "gate: frac {} of {} test samples rounds down to an empty pool",
                self.gate.frac, self.data.test_samples
            )));
        }
        if self.gate.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("gate: hidden widths must be positive".into()));
        }
        if !self.recipe.lambda.is_finite() || self.recipe.lambda < 0.0 {
            return Err(Error::Config(format!(
                "recipe: lambda must be finite and >= 0, got {}",
                self.recipe.lambda
            )));
        }
        if !(self.recipe.alpha > 0.0 && self.recipe.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "recipe: alpha must be in (0, 1], got {}",
                self.recipe.alpha
            )));
        }
        if let Some(choice) = self.recipe.classifier_choice {
            if !self.task_ids().contains(&choice) {
                return Err(Error::Config(format!(
                    "recipe: classifier_choice {choice} is not one of the task ids {:?}",
                    self.task_ids()
                )));
            }
        }
        if let Some(ms) = &self.sweep.m {
            if ms.is_empty() {
                return Err(Error::Config("sweep: m must not be empty when given".into()));
            }
            if let Some(&bad) = ms.iter().find(|&&m| m > self.model.depth) {
                return Err(Error::Config(format!(
                    "sweep: m = {bad} exceeds the model depth {}",
                    self.model.depth
                )));
            }
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment: seeds must not be empty".into()));
        }
        let mut seeds = self.experiment.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.experiment.seeds.len() {
            return Err(Error::Config("experiment: seeds must be distinct".into()));
        }
        Ok(())
    }
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    if !path.exists() {
        return Err(Error::missing(path, "write an experiment config file first"));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
