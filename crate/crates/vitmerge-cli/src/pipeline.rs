//! Stage orchestration: the code behind every subcommand.
//!
//! Each stage reads its upstream artifacts from disk, runs the core
//! routines, and writes artifacts back under a fixed directory layout:
//!
//! ```text
//! out/
//!   data/task{ID}-{train,test}.data        shared across seeds
//!   s{SEED}/
//!     models/base.ckpt, task{ID}.ckpt, task{ID}-scratch.ckpt, gate.ckpt
//!     models/*.train.json                  accuracy and loss records
//!     grams/task{ID}.gram
//!     merged/{method}.ckpt                 static merges
//!     merged/{method}-m{M}.manifest.json   gated merges
//!     reports/similarity-{strategy}.json, eval-*.json
//!   reports/report.json, report.txt        seed aggregate
//! ```
//!
//! Every stage is a pure function of the config file and its input
//! artifacts: seeds are derived, never drawn from the clock, so re-running
//! a stage with the same inputs rewrites byte-identical outputs.
//!
//! Training stages regenerate their training splits from the config (the
//! generator is deterministic, so these equal the gen-data files); every
//! consumer of test-time data (evaluation, gate pools, gram pools) loads
//! the gen-data artifacts and checks their echoed spec against the config
//! so a stale file fails loudly instead of skewing results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vitmerge::gate::{plan_from_m, SimilarityReport, SimilarityStrategy, STATIC_REGMEAN_ALPHA};
use vitmerge::merge::{GramStats, TaskModel};
use vitmerge::train::{derive_seed, evaluate, evaluate_gate, gate_pool, gate_split};
use vitmerge::vit::{flops_estimate, ViTParams};
use vitmerge::{Dataset, GateNet, MergedModel, Split, StaticMethod, Tensor};

use crate::artifacts::{load_dataset, load_grams, save_dataset, save_grams, DataEcho};
use crate::checkpoint::{
    load_gate, load_vit, save_gate, save_vit, MergeEcho, LINEAGE_FROM_SCRATCH, LINEAGE_MERGED,
    LINEAGE_PRETRAINED,
};
use crate::config::{ExperimentConfig, Method};
use crate::error::{Error, Result};
use crate::report::{EvalRow, Report, TaskAccuracy};
use crate::wire::{read_file, write_file};

// Per-stage seed streams, mixed with the experiment seed so no two stages
// (or tasks within a stage) ever share an RNG stream.
const TAG_PRETRAIN: u64 = 1;
const TAG_GATE_INIT: u64 = 2;
const TAG_GATE_TRAIN: u64 = 3;
const TAG_FINETUNE: u64 = 10_000; // + task id
const TAG_SCRATCH_INIT: u64 = 20_000; // + task id
const TAG_SCRATCH_TRAIN: u64 = 30_000; // + task id
const TAG_POOL: u64 = 40_000; // + task id

pub const MANIFEST_KIND: &str = "gated-merge";

/// The output directory layout. All path decisions live here.
#[derive(Debug, Clone)]
pub struct Paths {
    root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Paths {
        Paths { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn task_data(&self, task_id: usize, split: Split) -> PathBuf {
        let s = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        self.root.join("data").join(format!("task{task_id}-{s}.data"))
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("s{seed}"))
    }

    pub fn base_ckpt(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("models").join("base.ckpt")
    }

    pub fn base_log(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("models").join("base.train.json")
    }

    fn lane(task_id: usize, scratch: bool) -> String {
        if scratch {
            format!("task{task_id}-scratch")
        } else {
            format!("task{task_id}")
        }
    }

    pub fn task_ckpt(&self, seed: u64, task_id: usize, scratch: bool) -> PathBuf {
        self.seed_dir(seed).join("models").join(format!("{}.ckpt", Paths::lane(task_id, scratch)))
    }

    pub fn task_log(&self, seed: u64, task_id: usize, scratch: bool) -> PathBuf {
        self.seed_dir(seed)
            .join("models")
            .join(format!("{}.train.json", Paths::lane(task_id, scratch)))
    }

    pub fn gate_ckpt(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("models").join("gate.ckpt")
    }

    pub fn gate_log(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("models").join("gate.train.json")
    }

    pub fn gram(&self, seed: u64, task_id: usize, scratch: bool) -> PathBuf {
        self.seed_dir(seed).join("grams").join(format!("{}.gram", Paths::lane(task_id, scratch)))
    }

    pub fn similarity_json(&self, seed: u64, strategy: SimilarityStrategy) -> PathBuf {
        self.seed_dir(seed).join("reports").join(format!("similarity-{}.json", strategy.name()))
    }

    pub fn merged_ckpt(&self, seed: u64, method: Method, scratch: bool) -> PathBuf {
        let suffix = if scratch { "-scratch" } else { "" };
        self.seed_dir(seed).join("merged").join(format!("{}{suffix}.ckpt", method.name()))
    }

    pub fn manifest(&self, seed: u64, method: Method, m: usize) -> PathBuf {
        self.seed_dir(seed).join("merged").join(format!("{}-m{m}.manifest.json", method.name()))
    }

    pub fn seed_reports_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("reports")
    }

    pub fn eval_json(&self, seed: u64, stem: &str) -> PathBuf {
        self.seed_reports_dir(seed).join(format!("eval-{stem}.json"))
    }

    pub fn root_eval_json(&self, stem: &str) -> PathBuf {
        self.root.join("reports").join(format!("eval-{stem}.json"))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("reports").join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("reports").join("report.txt")
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path, hint: &str) -> Result<T> {
    let bytes = read_file(path, hint)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::format(path, format!("json does not parse: {e}")))
}

/// Loss curve and test accuracy of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub lineage: String,
    /// Absent for the base model, which trains on the task union.
    pub task_id: Option<usize>,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub epoch_losses: Vec<f64>,
    pub test_accuracy: f64,
    pub test_samples: usize,
}

/// Gate training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateLog {
    pub seed: u64,
    pub task_ids: Vec<usize>,
    pub pool_samples: Vec<usize>,
    pub holdout_samples: Vec<usize>,
    /// Task-ID accuracy on the training pools.
    pub pool_accuracy: f64,
    /// Task-ID accuracy on the unsampled rest of the test splits; absent
    /// when the pool fraction consumed them whole.
    pub holdout_accuracy: Option<f64>,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub epoch_losses: Vec<f64>,
}

/// On-disk form of a similarity report, keyed by 1-based block number.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityFile {
    pub strategy: SimilarityStrategy,
    pub attention: BTreeMap<usize, f64>,
    pub mlp: BTreeMap<usize, f64>,
}

impl SimilarityFile {
    pub fn from_report(rep: &SimilarityReport) -> SimilarityFile {
        SimilarityFile {
            strategy: rep.strategy,
            attention: rep.attention.iter().enumerate().map(|(i, &v)| (i + 1, v)).collect(),
            mlp: rep.mlp.iter().enumerate().map(|(i, &v)| (i + 1, v)).collect(),
        }
    }

    pub fn to_report(&self, path: &Path) -> Result<SimilarityReport> {
        let depth = self.attention.len();
        for (map, what) in [(&self.attention, "attention"), (&self.mlp, "mlp")] {
            if map.len() != depth || map.keys().enumerate().any(|(i, &k)| k != i + 1) {
                return Err(Error::format(
                    path,
                    format!("{what} scores must cover blocks 1..={depth} exactly"),
                ));
            }
        }
        Ok(SimilarityReport {
            strategy: self.strategy,
            attention: self.attention.values().copied().collect(),
            mlp: self.mlp.values().copied().collect(),
        })
    }
}

/// Recipe of one gated merge: everything needed to rebuild it from the
/// checkpoints it references. Paths are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub method: String,
    pub m: usize,
    pub strategy: SimilarityStrategy,
    /// Gram damping of the static side; present for gated-regmean.
    pub alpha: Option<f64>,
    pub plan: vitmerge::MergePlan,
    pub models: Vec<String>,
    pub gate: String,
    pub grams: Option<Vec<String>>,
    pub seed: u64,
}

/// Generates and stores every task's train and test split.
pub fn gen_data(cfg: &ExperimentConfig, paths: &Paths) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for spec in cfg.specs() {
        for (split, n) in
            [(Split::Train, cfg.data.train_samples), (Split::Test, cfg.data.test_samples)]
        {
            let data =
                vitmerge::train::generate(&spec, split, n, cfg.model.channels, cfg.model.image_size)?;
            let echo = DataEcho {
                spec: spec.clone(),
                split,
                samples: n,
                channels: cfg.model.channels,
                image_size: cfg.model.image_size,
            };
            let path = paths.task_data(spec.task_id, split);
            save_dataset(&path, &data, &echo)?;
            log::info!("wrote {}", path.display());
            written.push(path);
        }
    }
    Ok(written)
}

/// Loads one task's stored split and rejects it if it was generated from a
/// different config than the one in hand.
fn load_task_split(
    cfg: &ExperimentConfig,
    paths: &Paths,
    task_id: usize,
    split: Split,
) -> Result<Dataset> {
    let spec = cfg
        .specs()
        .into_iter()
        .find(|s| s.task_id == task_id)
        .ok_or_else(|| Error::Config(format!("task {task_id} is not in the config")))?;
    let path = paths.task_data(task_id, split);
    let (data, echo) = load_dataset(&path, "run `vitmerge gen-data` first")?;
    let expected = match split {
        Split::Train => cfg.data.train_samples,
        Split::Test => cfg.data.test_samples,
    };
    if echo.spec != spec
        || echo.samples != expected
        || echo.channels != cfg.model.channels
        || echo.image_size != cfg.model.image_size
    {
        return Err(Error::format(
            &path,
            "dataset was generated from a different config; re-run `vitmerge gen-data`",
        ));
    }
    Ok(data)
}

/// Concatenation of all task test splits with labels offset into the joint
/// class space, in ascending task-id order (the pretraining label layout).
fn load_union_test(cfg: &ExperimentConfig, paths: &Paths) -> Result<Dataset> {
    let specs = cfg.specs();
    let mut parts = Vec::with_capacity(specs.len());
    for spec in &specs {
        parts.push(load_task_split(cfg, paths, spec.task_id, Split::Test)?);
    }
    let plane = cfg.model.channels * cfg.model.image_size * cfg.model.image_size;
    let total: usize = parts.iter().map(|d| d.len()).sum();
    let mut images =
        Tensor::zeros(&[total, cfg.model.channels, cfg.model.image_size, cfg.model.image_size]);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    let mut offset = 0;
    for (spec, part) in specs.iter().zip(&parts) {
        images.data_mut()[row * plane..(row + part.len()) * plane]
            .copy_from_slice(part.images.data());
        labels.extend(part.labels.iter().map(|&l| l + offset));
        row += part.len();
        offset += spec.num_classes;
    }
    Ok(Dataset { images, labels, split: Split::Test })
}

/// Trains the shared base on the union of all tasks, one model per seed.
pub fn pretrain(cfg: &ExperimentConfig, paths: &Paths, seeds: &[u64]) -> Result<()> {
    let specs = cfg.specs();
    for &seed in seeds {
        let tc = cfg.pretrain.train_config(derive_seed(seed, TAG_PRETRAIN));
        let config = cfg.model.vit_config(cfg.union_classes());
        log::info!("pretraining base model (seed {seed}, {} epochs)", tc.epochs);
        let out = vitmerge::train::pretrain(&config, &specs, &tc, cfg.data.train_samples)?;
        let union_test = load_union_test(cfg, paths)?;
        let acc = evaluate(&out.params, &union_test)?;
        save_vit(&paths.base_ckpt(seed), &out.params, LINEAGE_PRETRAINED, seed, None, None)?;
        write_json(
            &paths.base_log(seed),
            &TrainLog {
                seed,
                lineage: LINEAGE_PRETRAINED.to_string(),
                task_id: None,
                epochs: tc.epochs,
                final_loss: out.epoch_losses.last().copied(),
                epoch_losses: out.epoch_losses,
                test_accuracy: acc,
                test_samples: union_test.len(),
            },
        )?;
        log::info!("base union-test accuracy {:.2}% (seed {seed})", acc * 100.0);
    }
    Ok(())
}

/// Fine-tunes one model per task per seed, continuing from the shared base
/// or, with `scratch`, from a fresh independent initialization.
pub fn finetune(cfg: &ExperimentConfig, paths: &Paths, seeds: &[u64], scratch: bool) -> Result<()> {
    for &seed in seeds {
        let base = if scratch {
            None
        } else {
            Some(load_vit(&paths.base_ckpt(seed), "run `vitmerge pretrain` first")?.0)
        };
        for spec in cfg.specs() {
            let id = spec.task_id as u64;
            let (start, lineage, tc) = if scratch {
                let fresh = ViTParams::init(
                    &cfg.model.vit_config(spec.num_classes),
                    derive_seed(seed, TAG_SCRATCH_INIT + id),
                )?;
                let tc = cfg.scratch_train().train_config(derive_seed(seed, TAG_SCRATCH_TRAIN + id));
                (fresh, LINEAGE_FROM_SCRATCH, tc)
            } else {
                let tc = cfg.finetune.train_config(derive_seed(seed, TAG_FINETUNE + id));
                (base.clone().unwrap(), LINEAGE_PRETRAINED, tc)
            };
            log::info!("fine-tuning task {} ({lineage}, seed {seed})", spec.task_id);
            let out = vitmerge::train::finetune(&start, &spec, &tc, cfg.data.train_samples)?;
            let test = load_task_split(cfg, paths, spec.task_id, Split::Test)?;
            let acc = evaluate(&out.params, &test)?;
            save_vit(
                &paths.task_ckpt(seed, spec.task_id, scratch),
                &out.params,
                lineage,
                seed,
                Some(&spec),
                None,
            )?;
            write_json(
                &paths.task_log(seed, spec.task_id, scratch),
                &TrainLog {
                    seed,
                    lineage: lineage.to_string(),
                    task_id: Some(spec.task_id),
                    epochs: tc.epochs,
                    final_loss: out.epoch_losses.last().copied(),
                    epoch_losses: out.epoch_losses,
                    test_accuracy: acc,
                    test_samples: test.len(),
                },
            )?;
            log::info!(
                "task {} test accuracy {:.2}% ({lineage}, seed {seed})",
                spec.task_id,
                acc * 100.0
            );
        }
    }
    Ok(())
}

/// Trains the task-ID gate on a fraction of each task's test split and
/// scores it on the unsampled rest.
pub fn train_gate(
    cfg: &ExperimentConfig,
    paths: &Paths,
    seeds: &[u64],
    frac_override: Option<f64>,
) -> Result<()> {
    let frac = frac_override.unwrap_or(cfg.gate.frac);
    for &seed in seeds {
        let mut pools = Vec::new();
        let mut holdouts = Vec::new();
        for spec in cfg.specs() {
            let test = load_task_split(cfg, paths, spec.task_id, Split::Test)?;
            let (pool, rest) =
                gate_split(&test, frac, derive_seed(seed, TAG_POOL + spec.task_id as u64))?;
            pools.push((pool, spec.task_id));
            holdouts.push((rest, spec.task_id));
        }
        let gate = GateNet::new(
            pools[0].0.image_len(),
            pools.len(),
            &cfg.gate.hidden,
            derive_seed(seed, TAG_GATE_INIT),
        )?;
        let tc = cfg.gate_train.train_config(derive_seed(seed, TAG_GATE_TRAIN));
        log::info!(
            "training gate on {} pool images (seed {seed}, {} epochs)",
            pools.iter().map(|(d, _)| d.len()).sum::<usize>(),
            tc.epochs
        );
        let (trained, losses) = vitmerge::train::train_gate(gate, &pools, &tc)?;
        let pool_accuracy = evaluate_gate(&trained, &pools)?;
        let holdout_accuracy = if holdouts.iter().all(|(d, _)| !d.is_empty()) {
            Some(evaluate_gate(&trained, &holdouts)?)
        } else {
            None
        };
        save_gate(&paths.gate_ckpt(seed), &trained, seed)?;
        write_json(
            &paths.gate_log(seed),
            &GateLog {
                seed,
                task_ids: pools.iter().map(|(_, id)| *id).collect(),
                pool_samples: pools.iter().map(|(d, _)| d.len()).collect(),
                holdout_samples: holdouts.iter().map(|(d, _)| d.len()).collect(),
                pool_accuracy,
                holdout_accuracy,
                epochs: tc.epochs,
                final_loss: losses.last().copied(),
                epoch_losses: losses,
            },
        )?;
        match holdout_accuracy {
            Some(h) => log::info!("gate held-out task-ID accuracy {:.2}% (seed {seed})", h * 100.0),
            None => log::info!("gate trained on the whole test split; no holdout (seed {seed})"),
        }
    }
    Ok(())
}

fn task_hint(scratch: bool) -> &'static str {
    if scratch {
        "run `vitmerge finetune --from-scratch` first"
    } else {
        "run `vitmerge finetune` first"
    }
}

fn load_task_models(
    cfg: &ExperimentConfig,
    paths: &Paths,
    seed: u64,
    scratch: bool,
) -> Result<Vec<TaskModel>> {
    cfg.specs()
        .iter()
        .map(|spec| {
            let (params, _) =
                load_vit(&paths.task_ckpt(seed, spec.task_id, scratch), task_hint(scratch))?;
            Ok(TaskModel { task_id: spec.task_id, params })
        })
        .collect()
}

/// Accumulates every task model's activation grams over the same pool the
/// gate trains on, one file per task per seed.
pub fn grams(
    cfg: &ExperimentConfig,
    paths: &Paths,
    seeds: &[u64],
    frac_override: Option<f64>,
    scratch: bool,
) -> Result<()> {
    let frac = frac_override.unwrap_or(cfg.gate.frac);
    for &seed in seeds {
        for spec in cfg.specs() {
            let (params, _) =
                load_vit(&paths.task_ckpt(seed, spec.task_id, scratch), task_hint(scratch))?;
            let test = load_task_split(cfg, paths, spec.task_id, Split::Test)?;
            let pool = gate_pool(&test, frac, derive_seed(seed, TAG_POOL + spec.task_id as u64))?;
            let stats =
                vitmerge::merge::collect_grams(&TaskModel { task_id: spec.task_id, params }, &pool)?;
            let path = paths.gram(seed, spec.task_id, scratch);
            save_grams(&path, &stats, pool.len())?;
            log::info!("wrote {} ({} pool images)", path.display(), pool.len());
        }
    }
    Ok(())
}

fn load_all_grams(
    cfg: &ExperimentConfig,
    paths: &Paths,
    seed: u64,
    scratch: bool,
) -> Result<Vec<GramStats>> {
    let hint = if scratch {
        "run `vitmerge grams --from-scratch` first"
    } else {
        "run `vitmerge grams` first"
    };
    cfg.task_ids()
        .into_iter()
        .map(|id| Ok(load_grams(&paths.gram(seed, id, scratch), hint)?.0))
        .collect()
}

/// Scores per-block weight similarity across the fine-tuned models and
/// stores the result keyed by block number.
pub fn similarity(
    cfg: &ExperimentConfig,
    paths: &Paths,
    seeds: &[u64],
    strategy_override: Option<SimilarityStrategy>,
) -> Result<()> {
    let strategy = strategy_override.unwrap_or(cfg.similarity.strategy);
    for &seed in seeds {
        let models = load_task_models(cfg, paths, seed, false)?;
        let rep = vitmerge::gate::similarity(&models, strategy)?;
        let path = paths.similarity_json(seed, strategy);
        write_json(&path, &SimilarityFile::from_report(&rep))?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

/// Overrides a merge run can carry on top of the config's recipe.
#[derive(Debug, Clone, Default)]
pub struct MergeOptions {
    pub method: Option<Method>,
    pub ms: Option<Vec<usize>>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub scratch: bool,
}

fn save_merged_static(
    cfg: &ExperimentConfig,
    paths: &Paths,
    seed: u64,
    method: Method,
    scratch: bool,
    merged: &ViTParams,
    lambda: Option<f64>,
    alpha: Option<f64>,
) -> Result<()> {
    let echo = MergeEcho {
        method: method.name().to_string(),
        lambda,
        alpha,
        classifier_choice: cfg.classifier_choice(),
        sources: cfg.task_ids(),
        scratch,
    };
    let path = paths.merged_ckpt(seed, method, scratch);
    save_vit(&path, merged, LINEAGE_MERGED, seed, None, Some(echo))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

/// Merges the fine-tuned models. Static methods store a single checkpoint;
/// gated methods store one manifest per m describing how to reassemble the
/// merged model from its parts.
pub fn merge(
    cfg: &ExperimentConfig,
    paths: &Paths,
    seeds: &[u64],
    opts: &MergeOptions,
) -> Result<()> {
    let method = opts.method.unwrap_or(cfg.recipe.method);
    if method.is_gated() && opts.scratch {
        return Err(Error::Config(
            "gated merging is wired for the shared-base lane; drop --from-scratch".into(),
        ));
    }
    for &seed in seeds {
        let models = load_task_models(cfg, paths, seed, opts.scratch)?;
        match method {
            Method::AvgMean => {
                let merged = vitmerge::merge::avg_mean(&models, cfg.classifier_choice())?;
                save_merged_static(cfg, paths, seed, method, opts.scratch, &merged, None, None)?;
            }
            Method::TaskArith => {
                if opts.scratch {
                    return Err(Error::Config(
                        "task arithmetic needs the shared base; it has no from-scratch variant"
                            .into(),
                    ));
                }
                let (base, _) = load_vit(&paths.base_ckpt(seed), "run `vitmerge pretrain` first")?;
                let lambda = opts.lambda.unwrap_or(cfg.recipe.lambda);
                let merged = vitmerge::merge::task_arithmetic(
                    &base,
                    &models,
                    lambda,
                    cfg.classifier_choice(),
                )?;
                save_merged_static(cfg, paths, seed, method, false, &merged, Some(lambda), None)?;
            }
            Method::RegMean => {
                let alpha = opts.alpha.unwrap_or(cfg.recipe.alpha);
                let grams = load_all_grams(cfg, paths, seed, opts.scratch)?;
                let merged =
                    vitmerge::merge::regmean(&models, &grams, alpha, cfg.classifier_choice())?;
                save_merged_static(
                    cfg,
                    paths,
                    seed,
                    method,
                    opts.scratch,
                    &merged,
                    None,
                    Some(alpha),
                )?;
            }
            Method::GatedAvgMean | Method::GatedRegMean => {
                let static_method = method.static_method().unwrap();
                let strategy = cfg.similarity.strategy;
                let sim_path = paths.similarity_json(seed, strategy);
                let file: SimilarityFile =
                    read_json(&sim_path, "run `vitmerge similarity` first")?;
                let rep = file.to_report(&sim_path)?;
                let (gate, _) =
                    load_gate(&paths.gate_ckpt(seed), "run `vitmerge train-gate` first")?;
                let grams = if static_method == StaticMethod::RegMean {
                    Some(load_all_grams(cfg, paths, seed, false)?)
                } else {
                    None
                };
                let ms = opts.ms.clone().unwrap_or_else(|| cfg.sweep_m());
                for m in ms {
                    let plan = plan_from_m(&rep, m, static_method);
                    // Building validates shapes, gram coverage and the gate
                    // before anything lands on disk.
                    vitmerge::gate::build(&models, gate.clone(), &plan, grams.as_deref())?;
                    let manifest = Manifest {
                        kind: MANIFEST_KIND.to_string(),
                        method: method.name().to_string(),
                        m,
                        strategy,
                        alpha: (static_method == StaticMethod::RegMean)
                            .then_some(STATIC_REGMEAN_ALPHA),
                        plan,
                        models: cfg
                            .task_ids()
                            .iter()
                            .map(|id| format!("../models/task{id}.ckpt"))
                            .collect(),
                        gate: "../models/gate.ckpt".to_string(),
                        grams: (static_method == StaticMethod::RegMean).then(|| {
                            cfg.task_ids()
                                .iter()
                                .map(|id| format!("../grams/task{id}.gram"))
                                .collect()
                        }),
                        seed,
                    };
                    let path = paths.manifest(seed, method, m);
                    write_json(&path, &manifest)?;
                    log::info!("wrote {}", path.display());
                }
            }
        }
    }
    Ok(())
}

/// Rebuilds a gated merge from its manifest. The static side is recomputed
/// from the referenced checkpoints and grams, which is deterministic, so
/// the result matches what the merge stage validated.
pub fn load_merged(manifest_path: &Path) -> Result<(MergedModel, Manifest)> {
    let manifest: Manifest =
        read_json(manifest_path, "run `vitmerge merge` with a gated method first")?;
    if manifest.kind != MANIFEST_KIND {
        return Err(Error::format(
            manifest_path,
            format!("kind is '{}', expected '{MANIFEST_KIND}'", manifest.kind),
        ));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut models = Vec::with_capacity(manifest.models.len());
    for rel in &manifest.models {
        let p = dir.join(rel);
        let (params, meta) = load_vit(&p, "a source model named by the manifest is missing")?;
        let task_id = meta
            .echo
            .task
            .as_ref()
            .map(|t| t.task_id)
            .ok_or_else(|| Error::format(&p, "source checkpoint carries no task id"))?;
        models.push(TaskModel { task_id, params });
    }
    let (gate, _) =
        load_gate(&dir.join(&manifest.gate), "the gate named by the manifest is missing")?;
    let grams = match &manifest.grams {
        Some(rels) => Some(
            rels.iter()
                .map(|rel| Ok(load_grams(&dir.join(rel), "a gram file named by the manifest is missing")?.0))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let mm = vitmerge::gate::build(&models, gate, &manifest.plan, grams.as_deref())?;
    Ok((mm, manifest))
}

fn unweighted_avg(per_task: &[TaskAccuracy]) -> f64 {
    per_task.iter().map(|t| t.accuracy).sum::<f64>() / per_task.len() as f64
}

/// Scores the unmerged fine-tuned models, each on its own task. Params are
/// summed over the roster (deploying them all means storing them all);
/// FLOPs are one model's forward cost, the worst task if they differ.
fn eval_individual(
    cfg: &ExperimentConfig,
    paths: &Paths,
    seed: u64,
    scratch: bool,
) -> Result<EvalRow> {
    let mut per_task = Vec::new();
    let mut params_total = 0usize;
    let mut flops = 0u64;
    for spec in cfg.specs() {
        let (params, _) =
            load_vit(&paths.task_ckpt(seed, spec.task_id, scratch), task_hint(scratch))?;
        let test = load_task_split(cfg, paths, spec.task_id, Split::Test)?;
        let acc = evaluate(&params, &test)?;
        per_task.push(TaskAccuracy { task_id: spec.task_id, samples: test.len(), accuracy: acc });
        params_total += params.param_count();
        flops = flops.max(flops_estimate(&params.config));
    }
    let method = if scratch { "individual-scratch" } else { "individual" };
    Ok(EvalRow {
        method: method.to_string(),
        m: None,
        seed,
        avg_accuracy: unweighted_avg(&per_task),
        per_task,
        selection_accuracy: None,
        params: params_total,
        flops,
    })
}

/// Scores a statically merged checkpoint on every source task, re-attaching
/// that task's own classifier head for each measurement.
fn eval_static_merged(cfg: &ExperimentConfig, paths: &Paths, path: &Path) -> Result<EvalRow> {
    let (merged, meta) = load_vit(path, "run `vitmerge merge` first")?;
    let echo = meta
        .echo
        .merge
        .ok_or_else(|| Error::format(path, "not a merged checkpoint (no merge echo)"))?;
    let mut per_task = Vec::new();
    for &id in &echo.sources {
        let (donor, _) = load_vit(&paths.task_ckpt(meta.seed, id, echo.scratch), task_hint(echo.scratch))?;
        let w = donor.get("classifier.weight").unwrap();
        let b = donor.get("classifier.bias").unwrap();
        let with_head = merged.with_classifier(w, b)?;
        let test = load_task_split(cfg, paths, id, Split::Test)?;
        let acc = evaluate(&with_head, &test)?;
        per_task.push(TaskAccuracy { task_id: id, samples: test.len(), accuracy: acc });
    }
    let method =
        if echo.scratch { format!("{}-scratch", echo.method) } else { echo.method.clone() };
    Ok(EvalRow {
        method,
        m: None,
        seed: meta.seed,
        avg_accuracy: unweighted_avg(&per_task),
        per_task,
        selection_accuracy: None,
        params: merged.param_count(),
        flops: flops_estimate(&merged.config),
    })
}

/// Scores a gated merge over every task's test split.
fn eval_gated(manifest_path: &Path, sets: &[(Dataset, usize)]) -> Result<EvalRow> {
    let (mm, manifest) = load_merged(manifest_path)?;
    let eval = vitmerge::gate::evaluate_merged(&mm, sets)?;
    let per_task: Vec<TaskAccuracy> = eval
        .per_task
        .iter()
        .map(|t| TaskAccuracy { task_id: t.task_id, samples: t.samples, accuracy: t.accuracy })
        .collect();
    Ok(EvalRow {
        method: manifest.method.clone(),
        m: Some(manifest.m),
        seed: manifest.seed,
        per_task,
        avg_accuracy: eval.avg_accuracy,
        selection_accuracy: Some(eval.selection_accuracy),
        params: mm.param_count(),
        flops: mm.flops_estimate(),
    })
}

/// Evaluates every artifact present under each seed directory and writes
/// one row file per artifact. Returns all rows.
pub fn eval(cfg: &ExperimentConfig, paths: &Paths, seeds: &[u64]) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut seed_rows: Vec<(String, EvalRow)> = Vec::new();

        for scratch in [false, true] {
            let all_present =
                cfg.task_ids().iter().all(|&id| paths.task_ckpt(seed, id, scratch).exists());
            if all_present {
                let stem = if scratch { "individual-scratch" } else { "individual" };
                seed_rows.push((stem.to_string(), eval_individual(cfg, paths, seed, scratch)?));
            }
        }

        for method in [Method::AvgMean, Method::TaskArith, Method::RegMean] {
            for scratch in [false, true] {
                let path = paths.merged_ckpt(seed, method, scratch);
                if path.exists() {
                    let suffix = if scratch { "-scratch" } else { "" };
                    let stem = format!("{}{suffix}", method.name());
                    seed_rows.push((stem, eval_static_merged(cfg, paths, &path)?));
                }
            }
        }

        let mut sets: Option<Vec<(Dataset, usize)>> = None;
        for method in [Method::GatedAvgMean, Method::GatedRegMean] {
            for m in cfg.sweep_m() {
                let path = paths.manifest(seed, method, m);
                if !path.exists() {
                    continue;
                }
                if sets.is_none() {
                    let mut loaded = Vec::new();
                    for spec in cfg.specs() {
                        loaded.push((
                            load_task_split(cfg, paths, spec.task_id, Split::Test)?,
                            spec.task_id,
                        ));
                    }
                    sets = Some(loaded);
                }
                let stem = format!("{}-m{m}", method.name());
                seed_rows.push((stem, eval_gated(&path, sets.as_ref().unwrap())?));
            }
        }

        if seed_rows.is_empty() {
            return Err(Error::Config(format!(
                "nothing to evaluate under {} for seed {seed}; run finetune/merge first",
                paths.root().display()
            )));
        }
        for (stem, row) in seed_rows {
            write_json(&paths.eval_json(seed, &stem), &row)?;
            log::info!(
                "eval {} (seed {seed}): avg accuracy {:.2}%",
                row.method,
                row.avg_accuracy * 100.0
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Evaluates one named artifact: a model checkpoint (individual, base or
/// merged) or a gated-merge manifest. Writes the row next to the aggregate
/// reports and returns it.
pub fn eval_model(cfg: &ExperimentConfig, paths: &Paths, model: &Path) -> Result<EvalRow> {
    let name = model.file_name().and_then(|n| n.to_str()).unwrap_or("model");
    let row = if name.ends_with(".manifest.json") {
        let mut sets = Vec::new();
        for spec in cfg.specs() {
            sets.push((load_task_split(cfg, paths, spec.task_id, Split::Test)?, spec.task_id));
        }
        eval_gated(model, &sets)?
    } else {
        let (params, meta) = load_vit(model, "point --model at an existing checkpoint")?;
        if meta.echo.merge.is_some() {
            eval_static_merged(cfg, paths, model)?
        } else if let Some(task) = &meta.echo.task {
            let test = load_task_split(cfg, paths, task.task_id, Split::Test)?;
            let acc = evaluate(&params, &test)?;
            let method = if meta.lineage == LINEAGE_FROM_SCRATCH {
                "individual-scratch"
            } else {
                "individual"
            };
            EvalRow {
                method: method.to_string(),
                m: None,
                seed: meta.seed,
                per_task: vec![TaskAccuracy {
                    task_id: task.task_id,
                    samples: test.len(),
                    accuracy: acc,
                }],
                avg_accuracy: acc,
                selection_accuracy: None,
                params: params.param_count(),
                flops: flops_estimate(&params.config),
            }
        } else {
            let union_test = load_union_test(cfg, paths)?;
            let acc = evaluate(&params, &union_test)?;
            EvalRow {
                method: "base".to_string(),
                m: None,
                seed: meta.seed,
                per_task: vec![TaskAccuracy {
                    task_id: 0,
                    samples: union_test.len(),
                    accuracy: acc,
                }],
                avg_accuracy: acc,
                selection_accuracy: None,
                params: params.param_count(),
                flops: flops_estimate(&params.config),
            }
        }
    };
    let stem = name
        .trim_end_matches(".manifest.json")
        .trim_end_matches(".ckpt")
        .replace('.', "-");
    write_json(&paths.root_eval_json(&stem), &row)?;
    Ok(row)
}

/// Folds every eval row under the configured seeds into one report, stored
/// as JSON and as a plain-text table.
pub fn report(_cfg: &ExperimentConfig, paths: &Paths, seeds: &[u64]) -> Result<Report> {
    let mut rows: Vec<EvalRow> = Vec::new();
    for &seed in seeds {
        let dir = paths.seed_reports_dir(seed);
        if !dir.exists() {
            continue;
        }
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("eval-") && n.ends_with(".json"))
                    .unwrap_or(false)
            })
            .collect();
        names.sort();
        for path in names {
            rows.push(read_json(&path, "run `vitmerge eval` first")?);
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "no evaluation rows under {}; run `vitmerge eval` first",
            paths.root().display()
        )));
    }
    let report = crate::report::build(rows)?;
    write_json(&paths.report_json(), &report)?;
    write_file(&paths.report_txt(), crate::report::render_text(&report).as_bytes())?;
    log::info!("wrote {}", paths.report_json().display());
    log::info!("wrote {}", paths.report_txt().display());
    Ok(report)
}

/// The whole pipeline in order, as the subcommands would run it: data,
/// base, both fine-tuning lanes, gate, grams, similarity, every merge the
/// config sweeps, evaluation, report.
pub fn run_all(cfg: &ExperimentConfig, paths: &Paths) -> Result<Report> {
    let seeds = cfg.experiment.seeds.clone();
    gen_data(cfg, paths)?;
    pretrain(cfg, paths, &seeds)?;
    finetune(cfg, paths, &seeds, false)?;
    finetune(cfg, paths, &seeds, true)?;
    train_gate(cfg, paths, &seeds, None)?;
    grams(cfg, paths, &seeds, None, false)?;
    similarity(cfg, paths, &seeds, None)?;
    for (method, scratch) in [
        (Method::AvgMean, false),
        (Method::AvgMean, true),
        (Method::TaskArith, false),
        (Method::RegMean, false),
    ] {
        merge(
            cfg,
            paths,
            &seeds,
            &MergeOptions { method: Some(method), scratch, ..MergeOptions::default() },
        )?;
    }
    for method in [Method::GatedAvgMean, Method::GatedRegMean] {
        merge(
            cfg,
            paths,
            &seeds,
            &MergeOptions { method: Some(method), ..MergeOptions::default() },
        )?;
    }
    eval(cfg, paths, &seeds)?;
    report(cfg, paths, &seeds)
}
