//! Input-conditioned merging.
//!
//! A gating network turns each input into a probability vector over the N
//! source tasks. Tensors in gated groups are mixed per input with those
//! probabilities; the rest of the network is merged once, statically. Which
//! transformer blocks are gated is decided by weight similarity: the m
//! attention blocks and m MLP blocks on which the models disagree most (the
//! lowest pairwise-cosine scores) are gated, because that is where a single
//! static compromise costs the most. The embedding and every norm are always
//! gated, and the classifier head is never merged: the head of the task the
//! gate picks (argmax) answers for the input.

use std::collections::{BTreeMap, BTreeSet};

use crate::merge::{is_solved_layer, regmean_layer, sorted_models, GramStats, TaskModel};
use crate::numkit::{cosine_similarity, softmax, Tensor};
use crate::train::{Dataset, GateNet};
use crate::vit::{flops_estimate, forward, ViTParams};
use crate::{Error, Result};

/// How block weights are flattened before the pairwise-cosine scan.
///
/// The first half names the attention treatment, the second the MLP
/// treatment. `Concat*` variants compare one concatenated vector per model
/// and block; `Separate*` variants score each matrix on its own and average
/// the scores, which keeps every strategy on the same scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityStrategy {
    ConcatCombined,
    ConcatSeparate,
    SeparateCombined,
    SeparateSeparate,
}

impl SimilarityStrategy {
    pub fn from_name(name: &str) -> Result<SimilarityStrategy> {
        match name {
            "concat-combined" => Ok(SimilarityStrategy::ConcatCombined),
            "concat-separate" => Ok(SimilarityStrategy::ConcatSeparate),
            "separate-combined" => Ok(SimilarityStrategy::SeparateCombined),
            "separate-separate" => Ok(SimilarityStrategy::SeparateSeparate),
            other => Err(Error::Config(format!("unknown similarity strategy \"{other}\""))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SimilarityStrategy::ConcatCombined => "concat-combined",
            SimilarityStrategy::ConcatSeparate => "concat-separate",
            SimilarityStrategy::SeparateCombined => "separate-combined",
            SimilarityStrategy::SeparateSeparate => "separate-separate",
        }
    }

    fn attention_concat(&self) -> bool {
        matches!(self, SimilarityStrategy::ConcatCombined | SimilarityStrategy::ConcatSeparate)
    }

    fn mlp_combined(&self) -> bool {
        matches!(self, SimilarityStrategy::ConcatCombined | SimilarityStrategy::SeparateCombined)
    }
}

/// Per-block weight-similarity scores. Index b of each vector belongs to
/// block b+1. Every score lies in `[-N(N-1)/2, N(N-1)/2]` for N models.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimilarityReport {
    pub strategy: SimilarityStrategy,
    pub attention: Vec<f64>,
    pub mlp: Vec<f64>,
}

/// One flattened vector per model for a tensor-name group.
fn concat_vectors(sorted: &[&TaskModel], names: &[String]) -> Vec<Tensor> {
    sorted
        .iter()
        .map(|m| {
            let total: usize = names.iter().map(|n| m.params.get(n).unwrap().len()).sum();
            let mut flat = Tensor::zeros(&[total]);
            let mut at = 0;
            for n in names {
                let t = m.params.get(n).unwrap();
                flat.data_mut()[at..at + t.len()].copy_from_slice(t.data());
                at += t.len();
            }
            flat
        })
        .collect()
}

/// Sum of pairwise cosines over all unordered model pairs.
fn pairwise_score(vectors: &[Tensor]) -> Result<f64> {
    let mut score = 0.0;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            score += cosine_similarity(&vectors[i], &vectors[j])?.value;
        }
    }
    Ok(score)
}

/// Scores every block's attention and MLP weights across the models.
///
/// Only weight matrices enter the comparison; biases carry little signal
/// and are excluded. The model list is sorted by task id first, so the
/// report is exactly permutation invariant.
pub fn similarity(models: &[TaskModel], strategy: SimilarityStrategy) -> Result<SimilarityReport> {
    let sorted = sorted_models(models)?;
    if sorted.len() < 2 {
        return Err(Error::Merge("similarity needs at least two models".into()));
    }
    let depth = sorted[0].params.config.depth;
    let mut attention = Vec::with_capacity(depth);
    let mut mlp = Vec::with_capacity(depth);
    for b in 1..=depth {
        let attn_names: Vec<String> = ["wq", "wk", "wv", "wo"]
            .iter()
            .map(|w| format!("block{b}.attn.{w}.weight"))
            .collect();
        let score = if strategy.attention_concat() {
            pairwise_score(&concat_vectors(&sorted, &attn_names))?
        } else {
            let mut sum = 0.0;
            for name in &attn_names {
                sum += pairwise_score(&concat_vectors(&sorted, std::slice::from_ref(name)))?;
            }
            sum / attn_names.len() as f64
        };
        attention.push(score);

        let mlp_names: Vec<String> =
            ["fc1", "fc2"].iter().map(|w| format!("block{b}.mlp.{w}.weight")).collect();
        let score = if strategy.mlp_combined() {
            pairwise_score(&concat_vectors(&sorted, &mlp_names))?
        } else {
            let mut sum = 0.0;
            for name in &mlp_names {
                sum += pairwise_score(&concat_vectors(&sorted, std::slice::from_ref(name)))?;
            }
            sum / mlp_names.len() as f64
        };
        mlp.push(score);
    }
    Ok(SimilarityReport { strategy, attention, mlp })
}

/// Static merge for the non-gated remainder of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StaticMethod {
    AvgMean,
    RegMean,
}

/// Off-diagonal gram damping used by the static RegMean half of a gated
/// merge. Fixed so that a plan with no gated blocks reproduces the
/// standalone closed-form merge at its standard damping bit for bit.
pub const STATIC_REGMEAN_ALPHA: f64 = 0.9;

/// Which blocks are mixed per input and how the rest is merged.
///
/// Block numbers are 1-based, matching the tensor names `block{n}.*`. The
/// embedding, all norms, and classifier selection are gated regardless of
/// the plan; the sets below only extend gating to transformer blocks.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MergePlan {
    pub m: usize,
    pub gated_attention: BTreeSet<usize>,
    pub gated_mlp: BTreeSet<usize>,
    pub static_method: StaticMethod,
}

/// Selects the `m` lowest-scoring attention blocks and, independently, the
/// `m` lowest-scoring MLP blocks for gating. Ties go to the lower block
/// number; `m` beyond the depth is clamped with a warning. Because both
/// selections are prefixes of one sorted order, plans are nested in `m`.
pub fn plan_from_m(report: &SimilarityReport, m: usize, static_method: StaticMethod) -> MergePlan {
    let depth = report.attention.len();
    let m_eff = if m > depth {
        log::warn!("m = {m} exceeds depth {depth}; clamping");
        depth
    } else {
        m
    };
    let lowest = |scores: &[f64]| -> BTreeSet<usize> {
        let mut order: Vec<(f64, usize)> =
            scores.iter().enumerate().map(|(i, &s)| (s, i + 1)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order[..m_eff].iter().map(|&(_, b)| b).collect()
    };
    MergePlan {
        m: m_eff,
        gated_attention: lowest(&report.attention),
        gated_mlp: lowest(&report.mlp),
        static_method,
    }
}

impl MergePlan {
    /// True when the named tensor is mixed per input rather than merged
    /// statically. The classifier is handled separately (selected, never
    /// merged) and reports false here.
    pub fn is_gated(&self, name: &str) -> bool {
        if name.starts_with("embed.") || name.contains("norm") {
            return true;
        }
        if name.starts_with("classifier.") {
            return false;
        }
        if let Some(rest) = name.strip_prefix("block") {
            if let Some(dot) = rest.find('.') {
                if let Ok(b) = rest[..dot].parse::<usize>() {
                    if rest[dot..].starts_with(".attn.") {
                        return self.gated_attention.contains(&b);
                    }
                    if rest[dot..].starts_with(".mlp.") {
                        return self.gated_mlp.contains(&b);
                    }
                }
            }
        }
        false
    }
}

/// A merged model ready for inference: the shared static trunk pieces, the
/// per-model tensors for gated groups, the gate, and every task's head.
#[derive(Debug, Clone)]
pub struct MergedModel {
    models: Vec<TaskModel>,
    gate: GateNet,
    plan: MergePlan,
    static_cache: BTreeMap<String, Tensor>,
}

/// Precomputes the static side of the plan.
///
/// `grams` must be given exactly when the plan's static method is RegMean;
/// the same per-layer solve as the standalone RegMean merge runs here, so
/// the cached tensors are bitwise identical to that path's output.
pub fn build(
    models: &[TaskModel],
    gate: GateNet,
    plan: &MergePlan,
    grams: Option<&[GramStats]>,
) -> Result<MergedModel> {
    let sorted = sorted_models(models)?;
    if sorted.len() < 2 {
        return Err(Error::Merge("gated merging needs at least two models".into()));
    }
    if gate.num_tasks != sorted.len() {
        return Err(Error::Gate(format!(
            "gate has {} outputs for {} models",
            gate.num_tasks,
            sorted.len()
        )));
    }
    let config = &sorted[0].params.config;
    if gate.input_dim != config.image_len() {
        return Err(Error::Gate(format!(
            "gate expects {} inputs but the models take {} pixels",
            gate.input_dim,
            config.image_len()
        )));
    }
    let depth = config.depth;
    if plan.gated_attention.iter().chain(&plan.gated_mlp).any(|&b| b == 0 || b > depth) {
        return Err(Error::Config(format!(
            "plan names blocks outside 1..={depth}: {:?} / {:?}",
            plan.gated_attention, plan.gated_mlp
        )));
    }

    let sorted_grams: Option<Vec<&GramStats>> = match (plan.static_method, grams) {
        (StaticMethod::RegMean, Some(g)) => {
            let mut sg: Vec<&GramStats> = g.iter().collect();
            sg.sort_by_key(|s| s.task_id);
            if sg.len() != sorted.len()
                || sg.iter().zip(&sorted).any(|(g, m)| g.task_id != m.task_id)
            {
                return Err(Error::Merge(format!(
                    "gram stats do not cover the model set: models {:?}, grams {:?}",
                    sorted.iter().map(|m| m.task_id).collect::<Vec<_>>(),
                    sg.iter().map(|g| g.task_id).collect::<Vec<_>>()
                )));
            }
            for g in &sg {
                g.validate()?;
            }
            Some(sg)
        }
        (StaticMethod::RegMean, None) => {
            return Err(Error::Config("static RegMean needs gram stats".into()));
        }
        (StaticMethod::AvgMean, _) => None,
    };

    let mut static_cache = BTreeMap::new();
    let names: Vec<String> =
        sorted[0].params.named().iter().map(|(n, _, _)| n.clone()).collect();
    let n = sorted.len() as f64;
    for name in &names {
        if plan.is_gated(name) || name.starts_with("classifier.") {
            continue;
        }
        let merged = if plan.static_method == StaticMethod::RegMean && is_solved_layer(name) {
            let weights: Vec<&Tensor> =
                sorted.iter().map(|m| m.params.get(name).unwrap()).collect();
            let layer_grams: Vec<&Tensor> = sorted_grams
                .as_ref()
                .unwrap()
                .iter()
                .map(|g| {
                    g.entries.get(name).map(|e| &e.gram).ok_or_else(|| {
                        Error::Merge(format!("task {} has no gram for {name}", g.task_id))
                    })
                })
                .collect::<Result<_>>()?;
            regmean_layer(name, &weights, &layer_grams, STATIC_REGMEAN_ALPHA)?
        } else {
            let mut acc = Tensor::zeros(sorted[0].params.get(name).unwrap().shape());
            for m in &sorted {
                for (a, &v) in acc.data_mut().iter_mut().zip(m.params.get(name).unwrap().data())
                {
                    *a += v;
                }
            }
            for a in acc.data_mut() {
                *a /= n;
            }
            acc
        };
        static_cache.insert(name.clone(), merged);
    }

    Ok(MergedModel {
        models: sorted.into_iter().cloned().collect(),
        gate,
        plan: plan.clone(),
        static_cache,
    })
}

/// Softmax of the gate's logits for one image (`[c, s, s]` or `[1, c, s, s]`).
pub fn gate_probs(gate: &GateNet, image: &Tensor) -> Result<Vec<f64>> {
    if image.len() != gate.input_dim {
        return Err(Error::Gate(format!(
            "image has {} pixels, gate expects {}",
            image.len(),
            gate.input_dim
        )));
    }
    let mut flat = Tensor::zeros(&[1, gate.input_dim]);
    flat.data_mut().copy_from_slice(image.data());
    let logits = gate.logits(&flat)?;
    let row = Tensor::from_vec(&[gate.num_tasks], logits.row(0).to_vec())?;
    Ok(softmax(&row)?.data().to_vec())
}

/// Argmax with ties resolved to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl MergedModel {
    pub fn plan(&self) -> &MergePlan {
        &self.plan
    }

    pub fn gate(&self) -> &GateNet {
        &self.gate
    }

    pub fn models(&self) -> &[TaskModel] {
        &self.models
    }

    pub fn static_cache(&self) -> &BTreeMap<String, Tensor> {
        &self.static_cache
    }

    /// Task ids in gate-output order (ascending).
    pub fn task_ids(&self) -> Vec<usize> {
        self.models.iter().map(|m| m.task_id).collect()
    }

    /// Materializes the full parameter set for one probability vector.
    ///
    /// Gated tensors become the probability-weighted sum over models;
    /// static tensors come from the cache; the classifier head is the one
    /// belonging to `argmax(probs)` (ties to the lowest task index).
    pub fn assemble(&self, probs: &[f64]) -> Result<ViTParams> {
        if probs.len() != self.models.len() {
            return Err(Error::Gate(format!(
                "{} probabilities for {} models",
                probs.len(),
                self.models.len()
            )));
        }
        let per_model: Vec<Vec<(String, crate::Group, &Tensor)>> =
            self.models.iter().map(|m| m.params.named()).collect();
        let mut out = self.models[0].params.clone();
        for (ti, (name, _, t)) in out.named_mut().into_iter().enumerate() {
            if name.starts_with("classifier.") {
                continue;
            }
            if let Some(cached) = self.static_cache.get(&name) {
                t.data_mut().copy_from_slice(cached.data());
            } else {
                let dst = t.data_mut();
                dst.fill(0.0);
                for (p, named) in probs.iter().zip(&per_model) {
                    for (d, &v) in dst.iter_mut().zip(named[ti].2.data()) {
                        *d += p * v;
                    }
                }
            }
        }
        let chosen = &self.models[argmax(probs)].params;
        out.with_classifier(&chosen.classifier_w, &chosen.classifier_b)
    }

    /// Runs one image through the gate and the assembled network.
    ///
    /// Returns the logits (within the selected task's label space) and the
    /// selected task id.
    pub fn infer(&self, image: &Tensor) -> Result<(Vec<f64>, usize)> {
        let (logits, task, _) = self.infer_with_probs(image)?;
        Ok((logits, task))
    }

    /// [`MergedModel::infer`], also returning the gate probabilities.
    pub fn infer_with_probs(&self, image: &Tensor) -> Result<(Vec<f64>, usize, Vec<f64>)> {
        let probs = gate_probs(&self.gate, image)?;
        let params = self.assemble(&probs)?;
        let config = &params.config;
        let mut batch =
            Tensor::zeros(&[1, config.channels, config.image_size, config.image_size]);
        batch.data_mut().copy_from_slice(image.data());
        let logits = forward(&params, &batch)?;
        let task = self.models[argmax(&probs)].task_id;
        Ok((logits.row(0).to_vec(), task, probs))
    }

    /// Batch inference.
    ///
    /// With `share_probs` false this is `infer` per image: each input gets
    /// its own gate decision and its own assembled weights. With it true,
    /// the gate probabilities of the whole batch are averaged and the
    /// network is assembled once, an optimization for batches known to come
    /// from one task; the single shared task choice is returned.
    pub fn infer_batch(
        &self,
        images: &Tensor,
        share_probs: bool,
    ) -> Result<Vec<(Vec<f64>, usize)>> {
        let n = images.shape()[0];
        let plane: usize = images.shape()[1..].iter().product();
        let image_of = |i: usize| {
            let mut img = Tensor::zeros(&images.shape()[1..]);
            img.data_mut().copy_from_slice(&images.data()[i * plane..(i + 1) * plane]);
            img
        };
        if !share_probs {
            return (0..n).map(|i| self.infer(&image_of(i))).collect();
        }
        let mut mean = vec![0.0; self.models.len()];
        for i in 0..n {
            let p = gate_probs(&self.gate, &image_of(i))?;
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n as f64;
            }
        }
        let params = self.assemble(&mean)?;
        let logits = forward(&params, images)?;
        let task = self.models[argmax(&mean)].task_id;
        Ok((0..n).map(|i| (logits.row(i).to_vec(), task)).collect())
    }

    /// Stored parameter count: static tensors once, gated tensors once per
    /// model, the gate, and every task's classifier head.
    pub fn param_count(&self) -> usize {
        let n = self.models.len();
        let mut count = 0;
        for (name, _, t) in self.models[0].params.named() {
            if name.starts_with("classifier.") {
                continue;
            }
            count += if self.static_cache.contains_key(&name) { t.len() } else { n * t.len() };
        }
        count += self.gate.param_count();
        for m in &self.models {
            count += m.params.classifier_w.len() + m.params.classifier_b.len();
        }
        count
    }

    /// Inference FLOPs for one input: one gate forward plus one assembled
    /// trunk forward. Independent of how many blocks are gated; the widest
    /// classifier head is charged since the selection is input-dependent.
    pub fn flops_estimate(&self) -> u64 {
        let widest = self
            .models
            .iter()
            .map(|m| {
                let mut c = m.params.config.clone();
                c.num_classes = m.params.config.num_classes;
                c
            })
            .max_by_key(|c| c.num_classes)
            .expect("at least one model");
        self.gate.flops_estimate() + flops_estimate(&widest)
    }
}

/// Per-task evaluation of a merged model.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TaskEval {
    pub task_id: usize,
    pub samples: usize,
    /// Joint accuracy: the gate picked this task and the selected head
    /// produced the right label.
    pub accuracy: f64,
    /// How often the gate picked this task alone.
    pub selection_accuracy: f64,
}

/// Evaluation over several task test sets.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MergedEval {
    pub per_task: Vec<TaskEval>,
    /// Unweighted mean of the per-task joint accuracies.
    pub avg_accuracy: f64,
    /// Sample-weighted gate selection accuracy over all tasks.
    pub selection_accuracy: f64,
}

/// Scores the merged model on each task's labeled set. A sample counts as
/// correct only when the gate selects its task and the logits' argmax is
/// its label.
pub fn evaluate_merged(mm: &MergedModel, sets: &[(Dataset, usize)]) -> Result<MergedEval> {
    if sets.is_empty() {
        return Err(Error::Config("no evaluation sets given".into()));
    }
    let mut per_task = Vec::with_capacity(sets.len());
    let mut selected_total = 0usize;
    let mut total = 0usize;
    for (data, task_id) in sets {
        let plane = data.image_len();
        let mut correct = 0usize;
        let mut selected = 0usize;
        for i in 0..data.len() {
            let mut img = Tensor::zeros(&data.images.shape()[1..]);
            img.data_mut()
                .copy_from_slice(&data.images.data()[i * plane..(i + 1) * plane]);
            let (logits, chosen_task) = mm.infer(&img)?;
            if chosen_task == *task_id {
                selected += 1;
                if argmax(&logits) == data.labels[i] {
                    correct += 1;
                }
            }
        }
        per_task.push(TaskEval {
            task_id: *task_id,
            samples: data.len(),
            accuracy: correct as f64 / data.len() as f64,
            selection_accuracy: selected as f64 / data.len() as f64,
        });
        selected_total += selected;
        total += data.len();
    }
    let avg_accuracy =
        per_task.iter().map(|t| t.accuracy).sum::<f64>() / per_task.len() as f64;
    Ok(MergedEval {
        per_task,
        avg_accuracy,
        selection_accuracy: selected_total as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{generate, Family, Split, SyntheticTaskSpec};
    use crate::vit::ViTConfig;
    use proptest::prelude::*;

    fn small_config() -> ViTConfig {
        let mut c = ViTConfig::desk_default(3);
        c.image_size = 8;
        c.patch_size = 4;
        c.dim = 8;
        c.depth = 4;
        c.heads = 2;
        c.mlp_ratio = 2;
        c
    }

    fn models(n: usize, config: &ViTConfig) -> Vec<TaskModel> {
        (1..=n)
            .map(|i| TaskModel {
                task_id: i,
                params: ViTParams::init(config, 300 + i as u64).unwrap(),
            })
            .collect()
    }

    fn test_gate(config: &ViTConfig, n: usize) -> GateNet {
        GateNet::new(config.image_len(), n, &[6], 77).unwrap()
    }

    fn any_plan(m: usize, ms: &[TaskModel]) -> MergePlan {
        let report = similarity(ms, SimilarityStrategy::ConcatCombined).unwrap();
        plan_from_m(&report, m, StaticMethod::AvgMean)
    }

    #[test]
    fn identical_models_score_the_pair_count_exactly() {
        let config = small_config();
        let base = ViTParams::init(&config, 7).unwrap();
        let ms: Vec<TaskModel> =
            (1..=3).map(|i| TaskModel { task_id: i, params: base.clone() }).collect();
        for strategy in [
            SimilarityStrategy::ConcatCombined,
            SimilarityStrategy::ConcatSeparate,
            SimilarityStrategy::SeparateCombined,
            SimilarityStrategy::SeparateSeparate,
        ] {
            let report = similarity(&ms, strategy).unwrap();
            for score in report.attention.iter().chain(&report.mlp) {
                assert_eq!(*score, 3.0, "{strategy:?}");
            }
        }
    }

    #[test]
    fn similarity_matches_pairwise_loop_oracle() {
        let config = small_config();
        let ms = models(3, &config);
        let report = similarity(&ms, SimilarityStrategy::ConcatCombined).unwrap();
        let cos = |a: &[f64], b: &[f64]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>();
            dot / (na * nb).sqrt()
        };
        for b in 0..config.depth {
            let flats: Vec<Vec<f64>> = ms
                .iter()
                .map(|m| {
                    let p = &m.params.blocks[b];
                    let mut v = Vec::new();
                    v.extend_from_slice(p.wq.data());
                    v.extend_from_slice(p.wk.data());
                    v.extend_from_slice(p.wv.data());
                    v.extend_from_slice(p.wo.data());
                    v
                })
                .collect();
            let want =
                cos(&flats[0], &flats[1]) + cos(&flats[0], &flats[2]) + cos(&flats[1], &flats[2]);
            assert!(
                (report.attention[b] - want).abs() <= 1e-10,
                "block {}: {} vs {want}",
                b + 1,
                report.attention[b]
            );
        }
    }

    #[test]
    fn orthogonal_attention_blocks_score_zero() {
        let config = small_config();
        let mut ms = models(2, &config);
        for m in &mut ms {
            let b = &mut m.params.blocks[1];
            b.wq.data_mut().fill(0.0);
            b.wk.data_mut().fill(0.0);
            b.wv.data_mut().fill(0.0);
            b.wo.data_mut().fill(0.0);
        }
        ms[0].params.blocks[1].wq.data_mut()[0] = 1.0;
        ms[1].params.blocks[1].wq.data_mut()[1] = 1.0;
        for strategy in [SimilarityStrategy::ConcatCombined, SimilarityStrategy::SeparateCombined] {
            let report = similarity(&ms, strategy).unwrap();
            assert!(report.attention[1].abs() <= 1e-10, "{strategy:?}: {}", report.attention[1]);
        }
    }

    #[test]
    fn similarity_is_permutation_and_scale_invariant() {
        let config = small_config();
        let ms = models(3, &config);
        let report = similarity(&ms, SimilarityStrategy::SeparateSeparate).unwrap();
        let rev: Vec<TaskModel> = ms.iter().rev().cloned().collect();
        assert_eq!(report, similarity(&rev, SimilarityStrategy::SeparateSeparate).unwrap());

        let mut scaled = ms.clone();
        for (_, _, t) in scaled[1].params.named_mut() {
            for v in t.data_mut() {
                *v *= 3.5;
            }
        }
        let scaled_report = similarity(&scaled, SimilarityStrategy::SeparateSeparate).unwrap();
        for (a, b) in report
            .attention
            .iter()
            .chain(&report.mlp)
            .zip(scaled_report.attention.iter().chain(&scaled_report.mlp))
        {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn scores_stay_in_the_pair_bound() {
        let config = small_config();
        let ms = models(4, &config);
        let bound = 6.0; // 4 models: 4*3/2 pairs.
        for strategy in [
            SimilarityStrategy::ConcatCombined,
            SimilarityStrategy::ConcatSeparate,
            SimilarityStrategy::SeparateCombined,
            SimilarityStrategy::SeparateSeparate,
        ] {
            let report = similarity(&ms, strategy).unwrap();
            for s in report.attention.iter().chain(&report.mlp) {
                assert!(s.abs() <= bound + 1e-12, "{strategy:?}: {s}");
            }
        }
    }

    #[test]
    fn plan_orders_by_score_then_block_number() {
        let report = SimilarityReport {
            strategy: SimilarityStrategy::ConcatCombined,
            attention: vec![0.4, 0.1, 0.3, 0.2],
            mlp: vec![0.5, 0.5, 0.5, 0.5],
        };
        let plan = plan_from_m(&report, 2, StaticMethod::AvgMean);
        assert_eq!(plan.gated_attention, BTreeSet::from([2, 4]));
        // All MLP scores tie: the lowest block numbers win.
        assert_eq!(plan.gated_mlp, BTreeSet::from([1, 2]));
    }

    #[test]
    fn plan_clamps_m_to_depth() {
        let report = SimilarityReport {
            strategy: SimilarityStrategy::ConcatCombined,
            attention: vec![0.1, 0.2],
            mlp: vec![0.2, 0.1],
        };
        let plan = plan_from_m(&report, 9, StaticMethod::AvgMean);
        assert_eq!(plan.m, 2);
        assert_eq!(plan.gated_attention.len(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn plans_nest_in_m(scores in proptest::collection::vec(-3.0f64..3.0, 1..8)) {
            let report = SimilarityReport {
                strategy: SimilarityStrategy::ConcatCombined,
                attention: scores.clone(),
                mlp: scores.iter().rev().cloned().collect(),
            };
            for m in 0..scores.len() {
                let small = plan_from_m(&report, m, StaticMethod::AvgMean);
                let big = plan_from_m(&report, m + 1, StaticMethod::AvgMean);
                prop_assert!(small.gated_attention.is_subset(&big.gated_attention));
                prop_assert!(small.gated_mlp.is_subset(&big.gated_mlp));
            }
        }
    }

    #[test]
    fn assembly_matches_scalar_mixture_oracle() {
        let config = small_config();
        let ms = models(3, &config);
        let plan = any_plan(4, &ms); // everything gated
        let mm = build(&ms, test_gate(&config, 3), &plan, None).unwrap();
        let probs = [0.2, 0.5, 0.3];
        let out = mm.assemble(&probs).unwrap();
        for (name, _, got) in out.named() {
            if name.starts_with("classifier.") {
                continue;
            }
            let parts: Vec<&Tensor> = ms.iter().map(|m| m.params.get(&name).unwrap()).collect();
            for i in 0..got.len() {
                let want = 0.2 * parts[0].data()[i]
                    + 0.5 * parts[1].data()[i]
                    + 0.3 * parts[2].data()[i];
                assert!(
                    (got.data()[i] - want).abs() <= 1e-10 * want.abs().max(1.0),
                    "{name}[{i}]"
                );
            }
        }
        // Classifier comes from the argmax model (index 1 -> task 2).
        assert_eq!(out.classifier_w, ms[1].params.classifier_w);
    }

    #[test]
    fn one_hot_probabilities_recover_each_model_bitwise() {
        let config = small_config();
        let ms = models(3, &config);
        let plan = any_plan(2, &ms);
        let mm = build(&ms, test_gate(&config, 3), &plan, None).unwrap();
        for k in 0..3 {
            let mut probs = vec![0.0; 3];
            probs[k] = 1.0;
            let out = mm.assemble(&probs).unwrap();
            for (name, _, got) in out.named() {
                if mm.plan.is_gated(&name) {
                    assert_eq!(
                        got,
                        ms[k].params.get(&name).unwrap(),
                        "{name} for one-hot {k}"
                    );
                }
            }
            assert_eq!(out.classifier_w, ms[k].params.classifier_w);
            assert_eq!(out.classifier_b, ms[k].params.classifier_b);
        }
    }

    #[test]
    fn one_hot_gate_on_identical_models_matches_the_lone_model() {
        let config = small_config();
        let base = ViTParams::init(&config, 21).unwrap();
        let ms: Vec<TaskModel> =
            (1..=3).map(|i| TaskModel { task_id: i, params: base.clone() }).collect();
        let plan = any_plan(1, &ms);
        // Gate with zero weights and a strongly biased output layer: probs
        // are one-hot up to 4e-18.
        let mut gate = test_gate(&config, 3);
        for l in &mut gate.layers {
            l.w.data_mut().fill(0.0);
            l.b.data_mut().fill(0.0);
        }
        gate.layers.last_mut().unwrap().b.data_mut()[1] = 40.0;
        let mm = build(&ms, gate, &plan, None).unwrap();

        let spec = SyntheticTaskSpec {
            task_id: 1,
            num_classes: 3,
            family: Family::Blobs,
            noise_std: 0.1,
            seed: 5,
        };
        let data = generate(&spec, Split::Test, 3, 1, config.image_size).unwrap();
        let (images, _) = data.batch(&[0, 1, 2]);
        let direct = forward(&base, &images).unwrap();
        for i in 0..3 {
            let mut img = Tensor::zeros(&[1, config.image_size, config.image_size]);
            img.data_mut()
                .copy_from_slice(&images.data()[i * 64..(i + 1) * 64]);
            let (logits, task) = mm.infer(&img).unwrap();
            assert_eq!(task, 2);
            for (a, b) in logits.iter().zip(direct.row(i)) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn uniform_probabilities_equal_avg_mean_logits() {
        let config = small_config();
        let ms = models(3, &config);
        let plan = any_plan(4, &ms); // m = depth
        let mm = build(&ms, test_gate(&config, 3), &plan, None).unwrap();
        let probs = vec![1.0 / 3.0; 3];
        let assembled = mm.assemble(&probs).unwrap();
        let avg = crate::merge::avg_mean(&ms, 1).unwrap();

        let spec = SyntheticTaskSpec {
            task_id: 1,
            num_classes: 3,
            family: Family::Rings,
            noise_std: 0.1,
            seed: 6,
        };
        let data = generate(&spec, Split::Test, 4, 1, config.image_size).unwrap();
        let (images, _) = data.batch(&[0, 1, 2, 3]);
        let a = forward(&assembled, &images).unwrap();
        let b = forward(&avg, &images).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn zeroed_gate_emits_exactly_uniform_probabilities() {
        let config = small_config();
        let mut gate = test_gate(&config, 3);
        for l in &mut gate.layers {
            l.w.data_mut().fill(0.0);
            l.b.data_mut().fill(0.0);
        }
        let mut img = Tensor::zeros(&[1, config.image_size, config.image_size]);
        img.data_mut()[5] = 0.7;
        let probs = gate_probs(&gate, &img).unwrap();
        assert_eq!(probs, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let config = small_config();
        let gate = test_gate(&config, 3);
        let spec = SyntheticTaskSpec {
            task_id: 1,
            num_classes: 4,
            family: Family::Ramps,
            noise_std: 0.4,
            seed: 8,
        };
        let data = generate(&spec, Split::Test, 50, 1, config.image_size).unwrap();
        for i in 0..50 {
            let mut img = Tensor::zeros(&[1, config.image_size, config.image_size]);
            img.data_mut()
                .copy_from_slice(&data.images.data()[i * 64..(i + 1) * 64]);
            let p = gate_probs(&gate, &img).unwrap();
            assert!(p.iter().all(|&v| v > 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn classifier_selection_survives_temperature_rescaling() {
        let config = small_config();
        let gate = test_gate(&config, 3);
        let mut hot = gate.clone();
        for l in &mut hot.layers {
            for v in l.w.data_mut() {
                *v *= 2.5;
            }
            for v in l.b.data_mut() {
                *v *= 2.5;
            }
        }
        // Rescaling every layer of a one-hidden-layer GELU net is not a pure
        // temperature change, so compare on the output layer only.
        let mut scaled_out = gate.clone();
        for v in scaled_out.layers.last_mut().unwrap().w.data_mut() {
            *v *= 2.5;
        }
        for v in scaled_out.layers.last_mut().unwrap().b.data_mut() {
            *v *= 2.5;
        }
        let spec = SyntheticTaskSpec {
            task_id: 1,
            num_classes: 4,
            family: Family::Checker,
            noise_std: 0.3,
            seed: 9,
        };
        let data = generate(&spec, Split::Test, 30, 1, config.image_size).unwrap();
        for i in 0..30 {
            let mut img = Tensor::zeros(&[1, config.image_size, config.image_size]);
            img.data_mut()
                .copy_from_slice(&data.images.data()[i * 64..(i + 1) * 64]);
            let a = gate_probs(&gate, &img).unwrap();
            let b = gate_probs(&scaled_out, &img).unwrap();
            assert_eq!(argmax(&a), argmax(&b));
        }
    }

    #[test]
    fn static_cache_covers_exactly_the_non_gated_blocks() {
        let config = small_config();
        let ms = models(2, &config);
        let plan = any_plan(2, &ms);
        let mm = build(&ms, test_gate(&config, 2), &plan, None).unwrap();
        for (name, _, _) in ms[0].params.named() {
            let cached = mm.static_cache.contains_key(&name);
            if name.starts_with("classifier.") {
                assert!(!cached, "{name}");
            } else {
                assert_eq!(cached, !plan.is_gated(&name), "{name}");
            }
        }
        // Always-gated groups are never cached.
        assert!(!mm.static_cache.contains_key("embed.pos"));
        assert!(!mm.static_cache.contains_key("final.norm.scale"));
        assert!(!mm.static_cache.contains_key("block1.norm1.shift"));
    }

    #[test]
    fn static_regmean_cache_equals_the_standalone_merge() {
        let config = small_config();
        let ms = models(3, &config);
        let spec = SyntheticTaskSpec {
            task_id: 9,
            num_classes: 2,
            family: Family::Stripes,
            noise_std: 0.3,
            seed: 10,
        };
        let pool = generate(&spec, Split::Test, 6, 1, config.image_size).unwrap();
        let grams: Vec<GramStats> = ms
            .iter()
            .map(|m| crate::merge::collect_grams(m, &pool).unwrap())
            .collect();
        let report = similarity(&ms, SimilarityStrategy::ConcatCombined).unwrap();
        let plan = plan_from_m(&report, 0, StaticMethod::RegMean);
        let mm = build(&ms, test_gate(&config, 3), &plan, Some(&grams)).unwrap();
        let standalone = crate::merge::regmean(&ms, &grams, 0.9, 1).unwrap();
        for (name, tensor) in &mm.static_cache {
            assert_eq!(tensor, standalone.get(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn param_count_grows_strictly_with_m_and_flops_do_not() {
        let config = small_config();
        let ms = models(3, &config);
        let mut last = None;
        let mut flops = None;
        for m in 0..=config.depth {
            let plan = any_plan(m, &ms);
            let mm = build(&ms, test_gate(&config, 3), &plan, None).unwrap();
            let count = mm.param_count();
            if let Some(prev) = last {
                assert!(count > prev, "m={m}: {count} !> {prev}");
            }
            last = Some(count);
            let f = mm.flops_estimate();
            if let Some(prev) = flops {
                assert_eq!(f, prev, "m={m}");
            }
            flops = Some(f);
        }
    }

    #[test]
    fn build_rejects_inconsistent_inputs() {
        let config = small_config();
        let ms = models(2, &config);
        let plan = any_plan(1, &ms);
        // Wrong gate width.
        assert!(matches!(
            build(&ms, test_gate(&config, 3), &plan, None),
            Err(Error::Gate(_))
        ));
        // RegMean without grams.
        let mut rm_plan = plan.clone();
        rm_plan.static_method = StaticMethod::RegMean;
        assert!(matches!(
            build(&ms, test_gate(&config, 2), &rm_plan, None),
            Err(Error::Config(_))
        ));
        // Plan outside the depth.
        let mut bad = plan.clone();
        bad.gated_attention.insert(9);
        assert!(matches!(
            build(&ms, test_gate(&config, 2), &bad, None),
            Err(Error::Config(_))
        ));
        // One model only.
        assert!(matches!(
            build(&ms[..1], test_gate(&config, 2), &plan, None),
            Err(Error::Gate(_)) | Err(Error::Merge(_))
        ));
    }

    #[test]
    fn builds_are_bitwise_deterministic() {
        let config = small_config();
        let ms = models(3, &config);
        let plan = any_plan(2, &ms);
        let a = build(&ms, test_gate(&config, 3), &plan, None).unwrap();
        let b = build(&ms, test_gate(&config, 3), &plan, None).unwrap();
        assert_eq!(a.static_cache, b.static_cache);
        let shuffled: Vec<TaskModel> = ms.iter().rev().cloned().collect();
        let c = build(&shuffled, test_gate(&config, 3), &plan, None).unwrap();
        assert_eq!(a.static_cache, c.static_cache);
    }
}
