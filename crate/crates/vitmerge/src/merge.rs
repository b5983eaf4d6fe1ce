//! Static merging: one set of weights out of N fine-tuned models.
//!
//! Three methods, all input-independent:
//!
//! * [`avg_mean`]: the element-wise mean of every non-classifier tensor.
//! * [`task_arithmetic`]: base plus a scaled sum of task vectors.
//! * [`regmean`]: per linear layer, the closed-form least-squares merge
//!   `W = (sum G_i)^-1 (sum G_i W_i)` driven by activation gram matrices;
//!   everything that is not an attention or MLP weight matrix is averaged.
//!
//! Classifier heads are never merged. Each merged model carries the head of
//! one explicitly chosen task, selected by task id.

use std::collections::BTreeMap;

use crate::numkit::{gemm_at_b, matmul, solve, Tensor};
use crate::train::Dataset;
use crate::vit::{forward_trace, ViTParams};
use crate::{Error, Result};

/// A fine-tuned model tagged with the task it was trained on.
///
/// Merging functions sort their inputs by `task_id` before any arithmetic,
/// which makes every result exactly invariant under reordering of the input
/// list, not merely up to floating-point reassociation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub task_id: usize,
    pub params: ViTParams,
}

/// Which static merge to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMethod {
    AvgMean,
    TaskArithmetic,
    RegMean,
}

/// Full description of a static merge.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    /// Task-vector scale; only read by [`MergeMethod::TaskArithmetic`].
    pub lambda: f64,
    /// Off-diagonal gram damping; only read by [`MergeMethod::RegMean`].
    pub alpha: f64,
    /// Task id whose classifier head the merged model keeps.
    pub classifier_choice: usize,
}

impl MergeRecipe {
    pub fn new(method: MergeMethod, classifier_choice: usize) -> MergeRecipe {
        MergeRecipe { method, lambda: 0.75, alpha: 0.9, classifier_choice }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !self.alpha.is_finite() || !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// True for tensors the RegMean solve covers: attention and MLP weight
/// matrices. Everything else (biases, norms, embedding, classifier) is
/// averaged.
pub(crate) fn is_solved_layer(name: &str) -> bool {
    name.ends_with(".weight") && (name.contains(".attn.") || name.contains(".mlp."))
}

fn is_classifier(name: &str) -> bool {
    name.starts_with("classifier.")
}

/// Sorts by task id and checks ids are unique and shapes line up.
pub(crate) fn sorted_models<'a>(models: &'a [TaskModel]) -> Result<Vec<&'a TaskModel>> {
    if models.is_empty() {
        return Err(Error::Merge("no models to merge".into()));
    }
    let mut sorted: Vec<&TaskModel> = models.iter().collect();
    sorted.sort_by_key(|m| m.task_id);
    for w in sorted.windows(2) {
        if w[0].task_id == w[1].task_id {
            return Err(Error::Merge(format!("duplicate task_id {}", w[0].task_id)));
        }
    }
    let reference = sorted[0].params.named();
    for m in &sorted[1..] {
        let named = m.params.named();
        if named.len() != reference.len() {
            return Err(Error::Merge(format!(
                "task {} has {} tensors, task {} has {}",
                sorted[0].task_id,
                reference.len(),
                m.task_id,
                named.len()
            )));
        }
        for ((name_a, _, a), (name_b, _, b)) in reference.iter().zip(&named) {
            if name_a != name_b {
                return Err(Error::Merge(format!("tensor name mismatch: {name_a} vs {name_b}")));
            }
            if !is_classifier(name_a) && a.shape() != b.shape() {
                return Err(Error::Merge(format!(
                    "shape mismatch at {}: task {} has {:?}, task {} has {:?}",
                    name_a,
                    sorted[0].task_id,
                    a.shape(),
                    m.task_id,
                    b.shape()
                )));
            }
        }
    }
    Ok(sorted)
}

/// Installs the chosen task's classifier head on `out`.
fn adopt_classifier(out: &mut ViTParams, sorted: &[&TaskModel], choice: usize) -> Result<()> {
    let donor = sorted
        .iter()
        .find(|m| m.task_id == choice)
        .ok_or_else(|| Error::Merge(format!("classifier_choice {choice} is not a merged task")))?;
    *out = out.with_classifier(&donor.params.classifier_w, &donor.params.classifier_b)?;
    Ok(())
}

/// Element-wise mean of every non-classifier tensor, in task-id order.
/// No minimum model count; public entry points enforce their own.
fn mean_params(sorted: &[&TaskModel]) -> ViTParams {
    let mut out = sorted[0].params.clone();
    let n = sorted.len() as f64;
    let names: Vec<String> = out.named().iter().map(|(name, _, _)| name.clone()).collect();
    for name in &names {
        if is_classifier(name) {
            continue;
        }
        let mut acc = Tensor::zeros(sorted[0].params.get(name).unwrap().shape());
        for m in sorted {
            for (a, &v) in acc.data_mut().iter_mut().zip(m.params.get(name).unwrap().data()) {
                *a += v;
            }
        }
        for a in acc.data_mut() {
            *a /= n;
        }
        *out.get_mut(name).unwrap() = acc;
    }
    out
}

/// Element-wise average of at least two models; the classifier head comes
/// from the task named by `classifier_choice`.
pub fn avg_mean(models: &[TaskModel], classifier_choice: usize) -> Result<ViTParams> {
    let sorted = sorted_models(models)?;
    if sorted.len() < 2 {
        return Err(Error::Merge("avg_mean needs at least two models".into()));
    }
    let mut out = mean_params(&sorted);
    adopt_classifier(&mut out, &sorted, classifier_choice)?;
    Ok(out)
}

/// Task-vector merge: `W_B + lambda * sum_i (W_i - W_B)` per tensor.
///
/// Evaluated as `(1 - lambda*N) * W_B + lambda * sum_i W_i`, which is the
/// same expression with the cancellations done algebraically; this makes
/// `lambda = 0` return the base and `lambda = 1` with one model return that
/// model without floating-point residue.
pub fn task_arithmetic(
    base: &ViTParams,
    models: &[TaskModel],
    lambda: f64,
    classifier_choice: usize,
) -> Result<ViTParams> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let sorted = sorted_models(models)?;
    let base_named = base.named();
    let first = sorted[0].params.named();
    for ((name_a, _, a), (name_b, _, b)) in base_named.iter().zip(&first) {
        if name_a != name_b || (!is_classifier(name_a) && a.shape() != b.shape()) {
            return Err(Error::Merge(format!(
                "base does not match models at {name_a}: {:?} vs {name_b} {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }

    let mut out = base.clone();
    let base_coef = 1.0 - lambda * sorted.len() as f64;
    let names: Vec<String> = out.named().iter().map(|(name, _, _)| name.clone()).collect();
    for name in &names {
        if is_classifier(name) {
            continue;
        }
        let mut acc = Tensor::zeros(base.get(name).unwrap().shape());
        for m in sorted.iter() {
            for (a, &v) in acc.data_mut().iter_mut().zip(m.params.get(name).unwrap().data()) {
                *a += v;
            }
        }
        let t = out.get_mut(name).unwrap();
        for (o, &s) in t.data_mut().iter_mut().zip(acc.data()) {
            *o = base_coef * *o + lambda * s;
        }
    }
    adopt_classifier(&mut out, &sorted, classifier_choice)?;
    Ok(out)
}

/// One layer's accumulated gram matrix and the number of activation rows
/// that went into it.
#[derive(Debug, Clone, PartialEq)]
pub struct GramEntry {
    /// `[d_in, d_in]`, the running sum of `X^T X` in 64-bit.
    pub gram: Tensor,
    pub samples: u64,
}

/// Gram matrices of one model's linear-layer inputs on an unlabeled pool.
#[derive(Debug, Clone, PartialEq)]
pub struct GramStats {
    pub task_id: usize,
    pub entries: BTreeMap<String, GramEntry>,
}

impl GramStats {
    pub fn validate(&self) -> Result<()> {
        for (name, e) in &self.entries {
            if e.samples == 0 {
                return Err(Error::Merge(format!("gram for {name} has zero samples")));
            }
            let d = e.gram.shape();
            if d.len() != 2 || d[0] != d[1] {
                return Err(Error::Merge(format!("gram for {name} is not square: {d:?}")));
            }
        }
        Ok(())
    }
}

/// Runs the model over `unlabeled` and accumulates, for every attention and
/// MLP weight matrix, the gram `X^T X` of that layer's input rows.
///
/// Capture points per block: the post-norm hidden states feed `wq`, `wk`
/// and `wv` (one shared gram), the concatenated attention context feeds
/// `wo`, the second post-norm states feed `fc1`, and the activated hidden
/// states feed `fc2`. Accumulation order is the dataset order, so the
/// result is deterministic.
pub fn collect_grams(model: &TaskModel, unlabeled: &Dataset) -> Result<GramStats> {
    if unlabeled.is_empty() {
        return Err(Error::Merge("cannot collect grams from an empty dataset".into()));
    }
    let p = &model.params;
    let dim = p.config.dim;
    let hidden = p.config.hidden();
    let depth = p.config.depth;

    let mut entries: BTreeMap<String, GramEntry> = BTreeMap::new();
    for b in 1..=depth {
        for tail in ["attn.wq.weight", "attn.wk.weight", "attn.wv.weight", "attn.wo.weight"] {
            entries.insert(
                format!("block{b}.{tail}"),
                GramEntry { gram: Tensor::zeros(&[dim, dim]), samples: 0 },
            );
        }
        entries.insert(
            format!("block{b}.mlp.fc1.weight"),
            GramEntry { gram: Tensor::zeros(&[dim, dim]), samples: 0 },
        );
        entries.insert(
            format!("block{b}.mlp.fc2.weight"),
            GramEntry { gram: Tensor::zeros(&[hidden, hidden]), samples: 0 },
        );
    }

    let indices: Vec<usize> = (0..unlabeled.len()).collect();
    for chunk in indices.chunks(64) {
        let (images, _) = unlabeled.batch(chunk);
        let (_, trace) = forward_trace(p, &images)?;
        for (bi, bt) in trace.blocks.iter().enumerate() {
            let b = bi + 1;
            let qkv_gram = gram_of(&bt.y1);
            for tail in ["attn.wq.weight", "attn.wk.weight", "attn.wv.weight"] {
                accumulate(&mut entries, &format!("block{b}.{tail}"), &qkv_gram, &bt.y1);
            }
            let wo_gram = gram_of(&bt.ctx);
            accumulate(&mut entries, &format!("block{b}.attn.wo.weight"), &wo_gram, &bt.ctx);
            let fc1_gram = gram_of(&bt.y2);
            accumulate(&mut entries, &format!("block{b}.mlp.fc1.weight"), &fc1_gram, &bt.y2);
            let fc2_gram = gram_of(&bt.g1);
            accumulate(&mut entries, &format!("block{b}.mlp.fc2.weight"), &fc2_gram, &bt.g1);
        }
    }
    Ok(GramStats { task_id: model.task_id, entries })
}

/// `X^T X` for row-major `x` of shape `[rows, d]`.
fn gram_of(x: &Tensor) -> Tensor {
    let rows = x.shape()[0];
    let d = x.shape()[1];
    let mut g = Tensor::zeros(&[d, d]);
    gemm_at_b(rows, d, d, x.data(), x.data(), g.data_mut(), false);
    g
}

fn accumulate(entries: &mut BTreeMap<String, GramEntry>, name: &str, gram: &Tensor, x: &Tensor) {
    let e = entries.get_mut(name).expect("preallocated gram entry");
    for (a, &v) in e.gram.data_mut().iter_mut().zip(gram.data()) {
        *a += v;
    }
    e.samples += x.shape()[0] as u64;
}

/// Copies `g` with every off-diagonal entry scaled by `alpha`.
fn scale_off_diagonal(g: &Tensor, alpha: f64) -> Tensor {
    let d = g.shape()[0];
    let mut out = g.clone();
    for i in 0..d {
        for j in 0..d {
            if i != j {
                out.data_mut()[i * d + j] *= alpha;
            }
        }
    }
    out
}

/// Closed-form merge of one linear layer.
///
/// Dampens each gram's off-diagonal by `alpha` first, then solves
/// `(sum G_i) W = sum (G_i W_i)`. Both the static merge and the gated
/// model's static cache go through this function, so their outputs are
/// bitwise identical for the same inputs.
///
/// Grams captured behind a layer norm can be rank-deficient: a norm with
/// zero shift makes every activation row sum to zero, putting the all-ones
/// vector in the gram's null space. The solver's ridge fallback covers that
/// case (trained models have non-zero shifts and stay clear of it).
pub(crate) fn regmean_layer(
    name: &str,
    weights: &[&Tensor],
    grams: &[&Tensor],
    alpha: f64,
) -> Result<Tensor> {
    debug_assert_eq!(weights.len(), grams.len());
    let d_in = weights[0].shape()[0];
    let mut lhs = Tensor::zeros(&[d_in, d_in]);
    let mut rhs = Tensor::zeros(weights[0].shape());
    for (w, g) in weights.iter().zip(grams) {
        if g.shape() != [d_in, d_in] {
            return Err(Error::Merge(format!(
                "gram shape {:?} does not match layer {name} with input width {d_in}",
                g.shape()
            )));
        }
        let damped = scale_off_diagonal(g, alpha);
        for (a, &v) in lhs.data_mut().iter_mut().zip(damped.data()) {
            *a += v;
        }
        let gw = matmul(&damped, w)?;
        for (a, &v) in rhs.data_mut().iter_mut().zip(gw.data()) {
            *a += v;
        }
    }
    let outcome = solve(&lhs, &rhs)
        .map_err(|e| Error::Merge(format!("regmean solve failed for {name}: {e}")))?;
    if outcome.regularized {
        log::warn!("regmean: ridge fallback fired for {name}");
    }
    Ok(outcome.solution)
}

/// Gram-weighted merge. Attention and MLP weight matrices are solved in
/// closed form from the models' activation grams; all other tensors are
/// averaged; the classifier head comes from `classifier_choice`.
pub fn regmean(
    models: &[TaskModel],
    grams: &[GramStats],
    alpha: f64,
    classifier_choice: usize,
) -> Result<ViTParams> {
    if !alpha.is_finite() || !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let sorted = sorted_models(models)?;
    let mut sorted_grams: Vec<&GramStats> = grams.iter().collect();
    sorted_grams.sort_by_key(|g| g.task_id);
    if sorted.len() != sorted_grams.len()
        || sorted.iter().zip(&sorted_grams).any(|(m, g)| m.task_id != g.task_id)
    {
        return Err(Error::Merge(format!(
            "gram stats do not cover the model set: models {:?}, grams {:?}",
            sorted.iter().map(|m| m.task_id).collect::<Vec<_>>(),
            sorted_grams.iter().map(|g| g.task_id).collect::<Vec<_>>()
        )));
    }
    for g in &sorted_grams {
        g.validate()?;
    }

    let mut out = mean_params(&sorted);
    let names: Vec<String> = out.named().iter().map(|(name, _, _)| name.clone()).collect();
    for name in &names {
        if !is_solved_layer(name) {
            continue;
        }
        let weights: Vec<&Tensor> =
            sorted.iter().map(|m| m.params.get(name).unwrap()).collect();
        let layer_grams: Vec<&Tensor> = sorted_grams
            .iter()
            .map(|g| {
                g.entries
                    .get(name)
                    .map(|e| &e.gram)
                    .ok_or_else(|| Error::Merge(format!("task {} has no gram for {name}", g.task_id)))
            })
            .collect::<Result<_>>()?;
        *out.get_mut(name).unwrap() = regmean_layer(name, &weights, &layer_grams, alpha)?;
    }
    adopt_classifier(&mut out, &sorted, classifier_choice)?;
    Ok(out)
}
