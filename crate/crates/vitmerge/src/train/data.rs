//! Synthetic task families.
//!
//! Each task owns one procedural family; a class is a fixed template image
//! and samples are that template plus seeded Gaussian pixel noise. Every
//! sample is a pure function of `(task seed, family, split, index)`, so
//! datasets never need to be stored to be reproduced, and the label of index
//! `i` is `i mod num_classes`, which keeps class counts balanced.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numkit::Tensor;
use crate::{Error, Result};

/// Procedural image families. Distinct tasks must use distinct families so
/// task identity is visually decidable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Horizontal bands; the class sets the band height.
    Stripes,
    /// Checkerboard; the class sets the cell size.
    Checker,
    /// One Gaussian bump; the class sets its grid position.
    Blobs,
    /// Concentric ring; the class sets the radius.
    Rings,
    /// Linear ramp; the class sets the orientation.
    Ramps,
}

impl Family {
    pub fn from_name(name: &str) -> Result<Family> {
        match name {
            "stripes" => Ok(Family::Stripes),
            "checker" => Ok(Family::Checker),
            "blobs" => Ok(Family::Blobs),
            "rings" => Ok(Family::Rings),
            "ramps" => Ok(Family::Ramps),
            other => Err(Error::Config(format!("unknown family \"{other}\""))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Stripes => "stripes",
            Family::Checker => "checker",
            Family::Blobs => "blobs",
            Family::Rings => "rings",
            Family::Ramps => "ramps",
        }
    }

    fn id(&self) -> u64 {
        match self {
            Family::Stripes => 1,
            Family::Checker => 2,
            Family::Blobs => 3,
            Family::Rings => 4,
            Family::Ramps => 5,
        }
    }
}

/// The largest class count any family keeps visually distinct at 16x16.
pub const MAX_CLASSES: usize = 8;

/// One synthetic classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    /// One-based task identity; merging tracks models by this id.
    pub task_id: usize,
    pub num_classes: usize,
    pub family: Family,
    /// Standard deviation of the additive pixel noise.
    pub noise_std: f64,
    /// Data seed; train and test splits derive disjoint streams from it.
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.task_id == 0 {
            return Err(Error::Config("task_id must be >= 1".into()));
        }
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return Err(Error::Config(format!(
                "task {}: num_classes must be in 2..={MAX_CLASSES}, got {}",
                self.task_id, self.num_classes
            )));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "task {}: noise_std must be finite and >= 0, got {}",
                self.task_id, self.noise_std
            )));
        }
        Ok(())
    }
}

/// Rejects task lists with duplicate ids or shared families.
pub fn ensure_distinct_tasks(tasks: &[SyntheticTaskSpec]) -> Result<()> {
    for (i, a) in tasks.iter().enumerate() {
        a.validate()?;
        for b in &tasks[i + 1..] {
            if a.task_id == b.task_id {
                return Err(Error::Config(format!("duplicate task_id {}", a.task_id)));
            }
            if a.family == b.family {
                return Err(Error::Config(format!(
                    "tasks {} and {} share family \"{}\"; families must be disjoint",
                    a.task_id,
                    b.task_id,
                    a.family.name()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn id(&self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// Labeled image set. `images` is `[n, channels, size, size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pixels per image.
    pub fn image_len(&self) -> usize {
        let s = self.images.shape();
        s[1] * s[2] * s[3]
    }

    /// Gathers the indexed samples into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.images.shape();
        let il = self.image_len();
        let mut images = Tensor::zeros(&[indices.len(), s[1], s[2], s[3]]);
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images.data_mut()[row * il..(row + 1) * il]
                .copy_from_slice(&self.images.data()[i * il..(i + 1) * il]);
            labels.push(self.labels[i]);
        }
        (images, labels)
    }

    /// Gathers the indexed samples as flattened rows `[n, image_len]`.
    pub fn flat_batch(&self, indices: &[usize]) -> Tensor {
        let il = self.image_len();
        let mut out = Tensor::zeros(&[indices.len(), il]);
        for (row, &i) in indices.iter().enumerate() {
            out.data_mut()[row * il..(row + 1) * il]
                .copy_from_slice(&self.images.data()[i * il..(i + 1) * il]);
        }
        out
    }
}

/// Noise-free class template: one `size * size` plane in `[0, 1]`.
pub fn template(family: Family, class: usize, size: usize) -> Vec<f64> {
    let s = size;
    let mut img = vec![0.0; s * s];
    match family {
        Family::Stripes => {
            let band = class + 1;
            for y in 0..s {
                let v = if (y / band) % 2 == 0 { 1.0 } else { 0.0 };
                for x in 0..s {
                    img[y * s + x] = v;
                }
            }
        }
        Family::Checker => {
            let cell = class + 1;
            for y in 0..s {
                for x in 0..s {
                    img[y * s + x] = if ((x / cell) + (y / cell)) % 2 == 0 { 1.0 } else { 0.0 };
                }
            }
        }
        Family::Blobs => {
            let (gx, gy) = ((class % 3) as f64, (class / 3) as f64);
            let cx = (gx + 0.5) * s as f64 / 3.0;
            let cy = (gy + 0.5) * s as f64 / 3.0;
            let sigma = s as f64 / 8.0;
            for y in 0..s {
                for x in 0..s {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    img[y * s + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        Family::Rings => {
            let c = (s as f64 - 1.0) / 2.0;
            let radius = (class as f64 + 1.0) * s as f64 / 18.0;
            let sigma = s as f64 / 20.0;
            for y in 0..s {
                for x in 0..s {
                    let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                    img[y * s + x] = (-(d - radius).powi(2) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        Family::Ramps => {
            let theta = std::f64::consts::PI * class as f64 / MAX_CLASSES as f64;
            let (ct, st) = (theta.cos(), theta.sin());
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for y in 0..s {
                for x in 0..s {
                    let u = ct * x as f64 + st * y as f64;
                    lo = lo.min(u);
                    hi = hi.max(u);
                }
            }
            let span = (hi - lo).max(1e-12);
            for y in 0..s {
                for x in 0..s {
                    let u = ct * x as f64 + st * y as f64;
                    img[y * s + x] = (u - lo) / span;
                }
            }
        }
    }
    img
}

/// RNG stream for one sample, keyed by every coordinate that identifies it.
fn sample_rng(seed: u64, family: Family, split: Split, index: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[0..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&family.id().to_le_bytes());
    bytes[16..24].copy_from_slice(&split.id().to_le_bytes());
    bytes[24..32].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

/// Generates `n` samples of a split.
///
/// The label of index `i` is `i % num_classes`; the image is the class
/// template replicated over `channels`, plus `noise_std` Gaussian noise per
/// pixel, rounded to the f32 grid. Sample `i` is identical no matter how
/// large `n` is or in which batch it is produced.
pub fn generate(
    spec: &SyntheticTaskSpec,
    split: Split,
    n: usize,
    channels: usize,
    image_size: usize,
) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Data(format!("task {}: cannot generate an empty split", spec.task_id)));
    }
    if channels == 0 || image_size == 0 {
        return Err(Error::Config("channels and image_size must be positive".into()));
    }
    let plane = image_size * image_size;
    let templates: Vec<Vec<f64>> =
        (0..spec.num_classes).map(|c| template(spec.family, c, image_size)).collect();

    let mut images = Tensor::zeros(&[n, channels, image_size, image_size]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        labels.push(class);
        let base = i * channels * plane;
        let mut rng = sample_rng(spec.seed, spec.family, split, i as u64);
        for ch in 0..channels {
            let dst = &mut images.data_mut()[base + ch * plane..base + (ch + 1) * plane];
            for (d, &t) in dst.iter_mut().zip(&templates[class]) {
                let noise: f64 =
                    if spec.noise_std > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
                *d = (t + spec.noise_std * noise) as f32 as f64;
            }
        }
    }
    Ok(Dataset { images, labels, split })
}
