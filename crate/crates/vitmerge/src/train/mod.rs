//! Training: synthetic data, SGD with momentum and cosine decay, the task
//! pipeline (pretrain on the union, fine-tune per task), and the gating
//! network that predicts which task an input belongs to.

mod data;
mod grad;

pub use data::{
    ensure_distinct_tasks, generate, template, Dataset, Family, Split, SyntheticTaskSpec,
    MAX_CLASSES,
};
pub use grad::loss_and_grads;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numkit::{gemm, gemm_a_bt, gemm_at_b, Tensor};
use crate::vit::{forward, gelu, gelu_prime, ViTConfig, ViTParams};
use crate::{Error, Result};

/// SGD hyperparameters. `epochs == 0` is a valid no-op run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!("bad learning_rate {}", self.learning_rate)));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("bad weight_decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable derivation of purpose-specific seeds from one base seed.
/// Mixes a base seed with a stream tag so distinct pipeline stages never
/// share an RNG stream even when they start from the same experiment seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    splitmix64(base ^ splitmix64(tag))
}

const SEED_INIT: u64 = 1;
const SEED_SHUFFLE: u64 = 2_000_000;
const SEED_CLASSIFIER: u64 = 3_000_000;

/// Cosine-decayed learning rate for step `step` of `total` (both 0-based).
fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Trained parameters plus the mean loss of each epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ViTParams,
    pub epoch_losses: Vec<f64>,
}

/// Epoch-shuffled index order, deterministic in `(seed, epoch)`.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SEED_SHUFFLE + epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Momentum SGD over one dataset. Mutates `params`; returns epoch losses.
fn run_sgd(params: &mut ViTParams, data: &Dataset, tc: &TrainConfig) -> Result<Vec<f64>> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let n = data.len();
    let steps_per_epoch = n.div_ceil(tc.batch_size);
    let total_steps = tc.epochs * steps_per_epoch;
    let mut velocity = params.zeros_like();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut step = 0usize;

    for epoch in 0..tc.epochs {
        let order = epoch_order(n, tc.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let (images, labels) = data.batch(chunk);
            let (loss, grads) = loss_and_grads(params, &images, &labels, tc.weight_decay)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, step {step} (lr {:.3e})",
                    cosine_lr(tc.learning_rate, step, total_steps)
                )));
            }
            let lr = cosine_lr(tc.learning_rate, step, total_steps);
            for (((_, _, p), (_, _, g)), (_, _, v)) in params
                .named_mut()
                .into_iter()
                .zip(grads.named())
                .zip(velocity.named_mut())
            {
                for ((pv, &gv), vv) in
                    p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut())
                {
                    *vv = tc.momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
                p.quantize_f32();
            }
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        epoch_losses.push(loss_sum / n as f64);
    }
    Ok(epoch_losses)
}

/// Builds the union of the tasks' splits under a joint label space.
///
/// Tasks are sorted by `task_id`; the returned offsets give each task's
/// first label in that order.
pub fn union_dataset(
    tasks: &[SyntheticTaskSpec],
    split: Split,
    samples_per_task: usize,
    channels: usize,
    image_size: usize,
) -> Result<(Dataset, Vec<usize>)> {
    ensure_distinct_tasks(tasks)?;
    if tasks.is_empty() {
        return Err(Error::Config("no tasks given".into()));
    }
    let mut sorted: Vec<&SyntheticTaskSpec> = tasks.iter().collect();
    sorted.sort_by_key(|t| t.task_id);

    let mut offsets = Vec::with_capacity(sorted.len());
    let mut next = 0usize;
    for t in &sorted {
        offsets.push(next);
        next += t.num_classes;
    }

    let plane = channels * image_size * image_size;
    let n_total = samples_per_task * sorted.len();
    let mut images = Tensor::zeros(&[n_total, channels, image_size, image_size]);
    let mut labels = Vec::with_capacity(n_total);
    for (k, task) in sorted.iter().enumerate() {
        let part = generate(task, split, samples_per_task, channels, image_size)?;
        images.data_mut()[k * samples_per_task * plane..(k + 1) * samples_per_task * plane]
            .copy_from_slice(part.images.data());
        labels.extend(part.labels.iter().map(|&l| l + offsets[k]));
    }
    Ok((Dataset { images, labels, split }, offsets))
}

/// Trains one base model on the union of all tasks' train splits.
///
/// The classifier covers the joint label space (sum of the tasks' class
/// counts, offset in task-id order). Zero epochs returns the freshly
/// initialized model unchanged.
pub fn pretrain(
    config: &ViTConfig,
    tasks: &[SyntheticTaskSpec],
    tc: &TrainConfig,
    samples_per_task: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    tc.validate()?;
    let (data, offsets) = union_dataset(
        tasks,
        Split::Train,
        samples_per_task,
        config.channels,
        config.image_size,
    )?;
    let total_classes = offsets.last().unwrap() + {
        let mut sorted: Vec<&SyntheticTaskSpec> = tasks.iter().collect();
        sorted.sort_by_key(|t| t.task_id);
        sorted.last().unwrap().num_classes
    };
    let mut union_config = config.clone();
    union_config.num_classes = total_classes;
    let mut params = ViTParams::init(&union_config, derive_seed(tc.seed, SEED_INIT))?;
    let epoch_losses = run_sgd(&mut params, &data, tc)?;
    Ok(TrainOutcome { params, epoch_losses })
}

/// Fine-tunes `base` on one task.
///
/// The classifier is re-drawn for `task.num_classes` labels (seeded from the
/// train seed and the task id); everything else continues from `base`.
pub fn finetune(
    base: &ViTParams,
    task: &SyntheticTaskSpec,
    tc: &TrainConfig,
    samples: usize,
) -> Result<TrainOutcome> {
    task.validate()?;
    tc.validate()?;
    let mut params = base.clone();
    params.reinit_classifier(
        task.num_classes,
        derive_seed(tc.seed, SEED_CLASSIFIER + task.task_id as u64),
    );
    let data =
        generate(task, Split::Train, samples, base.config.channels, base.config.image_size)?;
    let epoch_losses = run_sgd(&mut params, &data, tc)?;
    Ok(TrainOutcome { params, epoch_losses })
}

/// Argmax predictions over a dataset, batched.
pub fn predictions(params: &ViTParams, data: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(64) {
        let (images, _) = data.batch(chunk);
        let logits = forward(params, &images)?;
        let k = logits.cols();
        for r in 0..chunk.len() {
            let row = logits.row(r);
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Classification accuracy of `params` on `data`.
pub fn evaluate(params: &ViTParams, data: &Dataset) -> Result<f64> {
    let preds = predictions(params, data)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// One linear layer of the gating network.
#[derive(Debug, Clone, PartialEq)]
pub struct GateLayer {
    pub w: Tensor,
    pub b: Tensor,
}

/// Task-ID network: flattened image in, one logit per task out.
///
/// The body is a GELU MLP whose hidden widths are free (an empty list makes
/// it a plain linear map), so alternative gating capacities can be swapped
/// in through configuration alone.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNet {
    pub input_dim: usize,
    pub num_tasks: usize,
    pub layers: Vec<GateLayer>,
}

impl GateNet {
    /// Fresh gate with the given hidden widths, truncated-normal weights.
    pub fn new(input_dim: usize, num_tasks: usize, hidden: &[usize], seed: u64) -> Result<GateNet> {
        if input_dim == 0 || num_tasks < 2 {
            return Err(Error::Gate(format!(
                "gate needs input_dim >= 1 and num_tasks >= 2, got {input_dim}/{num_tasks}"
            )));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::Gate("hidden widths must be positive".into()));
        }
        // Reuse the ViT initializer by drawing layer-shaped tensors in order.
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_tasks);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, crate::vit::INIT_STD).expect("valid std");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (din, dout) = (win[0], win[1]);
            let mut w = Tensor::zeros(&[din, dout]);
            for v in w.data_mut() {
                loop {
                    let draw: f64 = rand_distr::Distribution::sample(&normal, &mut rng);
                    if draw.abs() <= 2.0 * crate::vit::INIT_STD {
                        *v = draw as f32 as f64;
                        break;
                    }
                }
            }
            layers.push(GateLayer { w, b: Tensor::zeros(&[dout]) });
        }
        Ok(GateNet { input_dim, num_tasks, layers })
    }

    /// Canonical tensor listing for serialization.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("gate.layer{}.weight", i + 1), &l.w));
            v.push((format!("gate.layer{}.bias", i + 1), &l.b));
        }
        v
    }

    /// Logits for flattened inputs `[n, input_dim]`, keeping per-layer
    /// intermediates for the backward pass.
    fn forward_traced(&self, x: &Tensor) -> (Tensor, Vec<Tensor>, Vec<Tensor>) {
        let n = x.shape()[0];
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (din, dout) = (layer.w.shape()[0], layer.w.shape()[1]);
            let mut a = Tensor::zeros(&[n, dout]);
            gemm(n, din, dout, h.data(), layer.w.data(), a.data_mut());
            for row in a.data_mut().chunks_mut(dout) {
                for (v, &bv) in row.iter_mut().zip(layer.b.data()) {
                    *v += bv;
                }
            }
            inputs.push(h);
            preacts.push(a.clone());
            if i + 1 < self.layers.len() {
                for v in a.data_mut() {
                    *v = gelu(*v);
                }
            }
            h = a;
        }
        (h, inputs, preacts)
    }

    /// Logits for flattened inputs `[n, input_dim]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim {
            return Err(Error::Gate(format!(
                "gate expects [n, {}] inputs, got {:?}",
                self.input_dim,
                x.shape()
            )));
        }
        Ok(self.forward_traced(x).0)
    }

    /// Parameter count of the gating network.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Forward FLOPs for one input, matrix products only, two per MAC.
    pub fn flops_estimate(&self) -> u64 {
        self.layers.iter().map(|l| 2 * (l.w.len() as u64)).sum()
    }
}

/// Draws the gate's training pool: a seeded sample of `frac` of `data`
/// (without replacement, at least one element, indices kept in order).
pub fn gate_pool(data: &Dataset, frac: f64, seed: u64) -> Result<Dataset> {
    Ok(gate_split(data, frac, seed)?.0)
}

/// Like [`gate_pool`], but also returns the unsampled remainder so callers
/// can score the gate on data it never trained on. The remainder is empty
/// when `frac` rounds to the whole set.
pub fn gate_split(data: &Dataset, frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Config(format!("gate pool fraction must be in (0, 1], got {frac}")));
    }
    let k = ((data.len() as f64) * frac).floor() as usize;
    if k == 0 {
        return Err(Error::Config(format!(
            "gate pool of {} samples at fraction {frac} is empty",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    let mut rest = order[k..].to_vec();
    rest.sort_unstable();
    let (images, labels) = data.batch(&picked);
    let (rest_images, rest_labels) = data.batch(&rest);
    Ok((
        Dataset { images, labels, split: data.split },
        Dataset { images: rest_images, labels: rest_labels, split: data.split },
    ))
}

fn sorted_task_pools(pools: &[(Dataset, usize)]) -> Result<Vec<(&Dataset, usize)>> {
    if pools.len() < 2 {
        return Err(Error::Gate("gate training needs at least two tasks".into()));
    }
    let mut sorted: Vec<(&Dataset, usize)> = pools.iter().map(|(d, id)| (d, *id)).collect();
    sorted.sort_by_key(|(_, id)| *id);
    for w in sorted.windows(2) {
        if w[0].1 == w[1].1 {
            return Err(Error::Gate(format!("duplicate task_id {} in gate pools", w[0].1)));
        }
    }
    Ok(sorted)
}

/// Trains the gate to predict which task an image came from.
///
/// `pools` pairs each task's (unlabeled) image pool with its task id; the
/// gate's class index is the rank of the task id in ascending order. Labels
/// inside the datasets are ignored.
pub fn train_gate(
    gate: GateNet,
    pools: &[(Dataset, usize)],
    tc: &TrainConfig,
) -> Result<(GateNet, Vec<f64>)> {
    tc.validate()?;
    let sorted = sorted_task_pools(pools)?;
    if gate.num_tasks != sorted.len() {
        return Err(Error::Gate(format!(
            "gate has {} outputs but {} task pools were given",
            gate.num_tasks,
            sorted.len()
        )));
    }
    let image_len = sorted[0].0.image_len();
    if gate.input_dim != image_len {
        return Err(Error::Gate(format!(
            "gate expects {} inputs but images have {} pixels",
            gate.input_dim, image_len
        )));
    }

    // Flatten all pools into one labeled table.
    let n: usize = sorted.iter().map(|(d, _)| d.len()).sum();
    let mut xs = Tensor::zeros(&[n, image_len]);
    let mut ys = Vec::with_capacity(n);
    let mut row = 0;
    for (rank, (d, _)) in sorted.iter().enumerate() {
        let flat = d.flat_batch(&(0..d.len()).collect::<Vec<_>>());
        xs.data_mut()[row * image_len..(row + d.len()) * image_len]
            .copy_from_slice(flat.data());
        ys.extend(std::iter::repeat(rank).take(d.len()));
        row += d.len();
    }

    let mut gate = gate;
    let steps_per_epoch = n.div_ceil(tc.batch_size);
    let total_steps = tc.epochs * steps_per_epoch;
    let mut velocity: Vec<GateLayer> = gate
        .layers
        .iter()
        .map(|l| GateLayer { w: Tensor::zeros(l.w.shape()), b: Tensor::zeros(l.b.shape()) })
        .collect();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let mut step = 0usize;

    for epoch in 0..tc.epochs {
        let order = epoch_order(n, tc.seed, epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let bsz = chunk.len();
            let mut bx = Tensor::zeros(&[bsz, image_len]);
            for (r, &i) in chunk.iter().enumerate() {
                bx.data_mut()[r * image_len..(r + 1) * image_len]
                    .copy_from_slice(&xs.data()[i * image_len..(i + 1) * image_len]);
            }
            let (logits, inputs, preacts) = gate.forward_traced(&bx);

            let k = gate.num_tasks;
            let mut dlogits = Tensor::zeros(&[bsz, k]);
            let mut loss = 0.0;
            for (r, &i) in chunk.iter().enumerate() {
                let zrow = logits.row(r);
                let max = zrow.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let sum: f64 = zrow.iter().map(|&z| (z - max).exp()).sum();
                let lse = max + sum.ln();
                loss += lse - zrow[ys[i]];
                let dst = &mut dlogits.data_mut()[r * k..(r + 1) * k];
                for (j, &z) in zrow.iter().enumerate() {
                    let p = (z - lse).exp();
                    dst[j] = (p - if j == ys[i] { 1.0 } else { 0.0 }) / bsz as f64;
                }
            }
            loss /= bsz as f64;
            if tc.weight_decay != 0.0 {
                let sq: f64 = gate
                    .layers
                    .iter()
                    .flat_map(|l| l.w.data().iter().chain(l.b.data()))
                    .map(|&v| v * v)
                    .sum();
                loss += 0.5 * tc.weight_decay * sq;
            }
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "gate loss went non-finite at epoch {epoch}, step {step}"
                )));
            }

            // Backward through the MLP stack.
            let mut grads: Vec<GateLayer> = gate
                .layers
                .iter()
                .map(|l| GateLayer { w: Tensor::zeros(l.w.shape()), b: Tensor::zeros(l.b.shape()) })
                .collect();
            let mut da = dlogits;
            for li in (0..gate.layers.len()).rev() {
                let (din, dout) = (gate.layers[li].w.shape()[0], gate.layers[li].w.shape()[1]);
                gemm_at_b(bsz, din, dout, inputs[li].data(), da.data(), grads[li].w.data_mut(), true);
                for row in da.data().chunks(dout) {
                    for (g, &v) in grads[li].b.data_mut().iter_mut().zip(row) {
                        *g += v;
                    }
                }
                if li > 0 {
                    let mut dh = Tensor::zeros(&[bsz, din]);
                    gemm_a_bt(bsz, dout, din, da.data(), gate.layers[li].w.data(), dh.data_mut(), false);
                    for (v, &a) in dh.data_mut().iter_mut().zip(preacts[li - 1].data()) {
                        *v *= gelu_prime(a);
                    }
                    da = dh;
                }
            }
            if tc.weight_decay != 0.0 {
                for (g, l) in grads.iter_mut().zip(&gate.layers) {
                    for (gv, &wv) in g.w.data_mut().iter_mut().zip(l.w.data()) {
                        *gv += tc.weight_decay * wv;
                    }
                    for (gv, &bv) in g.b.data_mut().iter_mut().zip(l.b.data()) {
                        *gv += tc.weight_decay * bv;
                    }
                }
            }

            let lr = cosine_lr(tc.learning_rate, step, total_steps);
            for ((l, g), v) in gate.layers.iter_mut().zip(&grads).zip(velocity.iter_mut()) {
                for ((pv, &gv), vv) in
                    l.w.data_mut().iter_mut().zip(g.w.data()).zip(v.w.data_mut())
                {
                    *vv = tc.momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
                l.w.quantize_f32();
                for ((pv, &gv), vv) in
                    l.b.data_mut().iter_mut().zip(g.b.data()).zip(v.b.data_mut())
                {
                    *vv = tc.momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
                l.b.quantize_f32();
            }
            loss_sum += loss * bsz as f64;
            step += 1;
        }
        epoch_losses.push(loss_sum / n as f64);
    }
    Ok((gate, epoch_losses))
}

/// Accuracy of the gate's task-ID prediction over labeled pools.
pub fn evaluate_gate(gate: &GateNet, pools: &[(Dataset, usize)]) -> Result<f64> {
    let sorted = sorted_task_pools(pools)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (rank, (d, _)) in sorted.iter().enumerate() {
        let indices: Vec<usize> = (0..d.len()).collect();
        for chunk in indices.chunks(64) {
            let flat = d.flat_batch(chunk);
            let logits = gate.logits(&flat)?;
            let k = logits.cols();
            for r in 0..chunk.len() {
                let row = logits.row(r);
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best == rank {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ViTConfig {
        ViTConfig::desk_default(3)
    }

    fn stripes_task() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task_id: 1,
            num_classes: 3,
            family: Family::Stripes,
            noise_std: 0.05,
            seed: 11,
        }
    }

    fn checker_task() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task_id: 2,
            num_classes: 3,
            family: Family::Checker,
            noise_std: 0.05,
            seed: 12,
        }
    }

    #[test]
    fn uniform_logits_give_log_k_loss() {
        let config = tiny_config();
        let mut params = ViTParams::init(&config, 5).unwrap();
        params.classifier_w.data_mut().fill(0.0);
        params.classifier_b.data_mut().fill(0.0);
        let data = generate(&stripes_task(), Split::Train, 6, 1, 16).unwrap();
        let (images, labels) = data.batch(&[0, 1, 2, 3, 4, 5]);
        let (loss, _) = loss_and_grads(&params, &images, &labels, 0.0).unwrap();
        assert!((loss - (3.0f64).ln()).abs() <= 1e-6, "loss {loss}");
    }

    #[test]
    fn duplicated_batch_changes_nothing() {
        let config = tiny_config();
        let params = ViTParams::init(&config, 6).unwrap();
        let data = generate(&stripes_task(), Split::Train, 4, 1, 16).unwrap();
        let (images, labels) = data.batch(&[0, 1, 2, 3]);
        let (images2, labels2) = data.batch(&[0, 1, 2, 3, 0, 1, 2, 3]);
        let (l1, g1) = loss_and_grads(&params, &images, &labels, 1e-4).unwrap();
        let (l2, g2) = loss_and_grads(&params, &images2, &labels2, 1e-4).unwrap();
        assert!((l1 - l2).abs() / l1.abs() <= 1e-12);
        // Scale by the global gradient norm: some tensors (the key biases,
        // which softmax's shift invariance makes gradient-free) hold only
        // cancellation residue, so per-tensor relative error is meaningless.
        let global: f64 = g1.named().iter().map(|(_, _, t)| t.norm_l2().powi(2)).sum::<f64>().sqrt();
        for ((name, _, a), (_, _, b)) in g1.named().into_iter().zip(g2.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * global, "{name}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let config = tiny_config();
        let params = ViTParams::init(&config, 6).unwrap();
        let data = generate(&stripes_task(), Split::Train, 2, 1, 16).unwrap();
        let (images, mut labels) = data.batch(&[0, 1]);
        labels[1] = 7;
        assert!(matches!(
            loss_and_grads(&params, &images, &labels, 0.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn zero_epochs_pretrain_returns_init() {
        let config = tiny_config();
        let tc = TrainConfig { epochs: 0, seed: 37, ..TrainConfig::default() };
        let out = pretrain(&config, &[stripes_task(), checker_task()], &tc, 12).unwrap();
        let mut want_config = config.clone();
        want_config.num_classes = 6;
        let want = ViTParams::init(&want_config, derive_seed(37, SEED_INIT)).unwrap();
        assert_eq!(out.params, want);
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn zero_learning_rate_freezes_non_classifier_weights() {
        let config = tiny_config();
        let base = ViTParams::init(&config, 8).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 8,
            learning_rate: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = finetune(&base, &stripes_task(), &tc, 8).unwrap();
        for ((name, _, a), (_, _, b)) in base.named().into_iter().zip(out.params.named()) {
            if name.starts_with("classifier.") {
                continue;
            }
            assert_eq!(a, b, "{name} moved under lr 0");
        }
    }

    #[test]
    fn finetune_is_bitwise_deterministic() {
        let config = tiny_config();
        let base = ViTParams::init(&config, 9).unwrap();
        let tc = TrainConfig { epochs: 1, batch_size: 16, seed: 21, ..TrainConfig::default() };
        let a = finetune(&base, &stripes_task(), &tc, 16).unwrap();
        let b = finetune(&base, &stripes_task(), &tc, 16).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn trained_weights_stay_on_f32_grid() {
        let config = tiny_config();
        let base = ViTParams::init(&config, 10).unwrap();
        let tc = TrainConfig { epochs: 1, batch_size: 16, seed: 22, ..TrainConfig::default() };
        let out = finetune(&base, &stripes_task(), &tc, 16).unwrap();
        for (name, _, t) in out.params.named() {
            for &v in t.data() {
                assert_eq!(v, v as f32 as f64, "{name} left the f32 grid");
            }
        }
    }

    #[test]
    fn short_training_reduces_loss_within_noise_band() {
        let config = tiny_config();
        let tc = TrainConfig {
            epochs: 12,
            batch_size: 64,
            learning_rate: 0.02,
            seed: 55,
            ..TrainConfig::default()
        };
        let out = pretrain(&config, &[stripes_task()], &tc, 192).unwrap();
        let losses = &out.epoch_losses;
        assert_eq!(losses.len(), 12);
        // Mean loss over consecutive 5-epoch windows must not grow by more
        // than 5 percent.
        for t in 0..losses.len() - 5 {
            let w0: f64 = losses[t..t + 5].iter().sum::<f64>() / 5.0;
            let w1: f64 = losses[t + 1..t + 6].iter().sum::<f64>() / 5.0;
            assert!(w1 <= w0 * 1.05, "window {t}: {w0} -> {w1}");
        }
    }

    #[test]
    fn gate_pool_is_budgeted_and_deterministic() {
        let data = generate(&stripes_task(), Split::Test, 40, 1, 16).unwrap();
        let a = gate_pool(&data, 0.15, 77).unwrap();
        assert_eq!(a.len(), 6); // floor(40 * 0.15)
        let b = gate_pool(&data, 0.15, 77).unwrap();
        assert_eq!(a, b);
        let c = gate_pool(&data, 0.15, 78).unwrap();
        assert_ne!(a.images, c.images);
        assert!(gate_pool(&data, 0.0, 1).is_err());
        assert!(gate_pool(&data, 1.5, 1).is_err());
    }

    #[test]
    fn gate_learns_two_trivial_families() {
        let a = generate(&stripes_task(), Split::Test, 30, 1, 16).unwrap();
        let b = generate(&checker_task(), Split::Test, 30, 1, 16).unwrap();
        let gate = GateNet::new(256, 2, &[16], 5).unwrap();
        let tc = TrainConfig { epochs: 20, batch_size: 16, seed: 9, ..TrainConfig::default() };
        let pools = vec![(a, 1), (b, 2)];
        let (trained, losses) = train_gate(gate, &pools, &tc).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap());
        let acc = evaluate_gate(&trained, &pools).unwrap();
        assert!(acc >= 0.9, "gate accuracy {acc}");
    }

    #[test]
    fn gate_shape_mismatches_are_gate_errors() {
        let a = generate(&stripes_task(), Split::Test, 10, 1, 16).unwrap();
        let b = generate(&checker_task(), Split::Test, 10, 1, 16).unwrap();
        let tc = TrainConfig::default();
        // Wrong output width.
        let gate = GateNet::new(256, 3, &[8], 5).unwrap();
        assert!(matches!(
            train_gate(gate, &[(a.clone(), 1), (b.clone(), 2)], &tc),
            Err(Error::Gate(_))
        ));
        // Wrong input width.
        let gate = GateNet::new(128, 2, &[8], 5).unwrap();
        assert!(matches!(
            train_gate(gate, &[(a.clone(), 1), (b.clone(), 2)], &tc),
            Err(Error::Gate(_))
        ));
        // One pool only.
        let gate = GateNet::new(256, 2, &[8], 5).unwrap();
        assert!(matches!(train_gate(gate, &[(a, 1)], &tc), Err(Error::Gate(_))));
        assert!(GateNet::new(256, 1, &[8], 5).is_err());
    }
}
