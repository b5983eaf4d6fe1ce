//! Dataset and gram-matrix files.
//!
//! Both formats follow the checkpoint conventions: a fixed 16-byte magic,
//! a u32 version, a JSON echo of the producing configuration, then raw
//! little-endian payloads. Pixels are stored in 32-bit precision (they are
//! generated on that grid); gram matrices keep all 64 bits because the
//! merge solves consume them directly and must not lose accumulation
//! precision across a save/load cycle.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vitmerge::merge::{GramEntry, GramStats};
use vitmerge::{Dataset, Split, SyntheticTaskSpec, Tensor};

use crate::error::{Error, Result};
use crate::wire::{read_file, write_file, Reader, Writer};

pub const DATA_MAGIC: &[u8; 16] = b"VITMERGE-DATA-1\0";
pub const GRAM_MAGIC: &[u8; 16] = b"VITMERGE-GRAM-1\0";
pub const ARTIFACT_VERSION: u32 = 1;

/// Provenance of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataEcho {
    pub spec: SyntheticTaskSpec,
    pub split: Split,
    pub samples: usize,
    pub channels: usize,
    pub image_size: usize,
}

pub fn save_dataset(path: &Path, data: &Dataset, echo: &DataEcho) -> Result<()> {
    let mut w = Writer::new();
    w.magic(DATA_MAGIC);
    w.u32(ARTIFACT_VERSION);
    w.string(&serde_json::to_string(echo)?);
    let shape = data.images.shape();
    w.u64(shape.len() as u64);
    for &d in shape {
        w.u64(d as u64);
    }
    w.f32s_from_f64(data.images.data());
    w.u64(data.labels.len() as u64);
    for &l in &data.labels {
        w.u64(l as u64);
    }
    write_file(path, &w.into_bytes())
}

pub fn load_dataset(path: &Path, hint: &str) -> Result<(Dataset, DataEcho)> {
    let bytes = read_file(path, hint)?;
    let mut r = Reader::new(path, &bytes);
    r.expect_magic(DATA_MAGIC, "dataset")?;
    let version = r.u32("version")?;
    if version != ARTIFACT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported dataset version {version}, expected {ARTIFACT_VERSION}"),
        ));
    }
    let echo: DataEcho = serde_json::from_str(&r.string("echo")?)
        .map_err(|e| Error::format(path, format!("echo does not parse: {e}")))?;
    let ndim = r.u64("image ndim")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64("image extent")? as usize);
    }
    let len: usize = shape.iter().product();
    let pixels = r.f32s_to_f64(len, "pixels")?;
    let n_labels = r.u64("label count")? as usize;
    if shape.first().copied() != Some(n_labels) {
        return Err(Error::format(
            path,
            format!("{n_labels} labels for {:?} images", shape),
        ));
    }
    let mut labels = Vec::with_capacity(n_labels);
    for _ in 0..n_labels {
        labels.push(r.u64("label")? as usize);
    }
    r.finish()?;
    let images = Tensor::from_vec(&shape, pixels)?;
    Ok((Dataset { images, labels, split: echo.split }, echo))
}

/// Provenance of a gram file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramEcho {
    pub task_id: usize,
    /// How many pool images fed the accumulation.
    pub pool_samples: usize,
}

pub fn save_grams(path: &Path, stats: &GramStats, pool_samples: usize) -> Result<()> {
    let echo = GramEcho { task_id: stats.task_id, pool_samples };
    let mut w = Writer::new();
    w.magic(GRAM_MAGIC);
    w.u32(ARTIFACT_VERSION);
    w.string(&serde_json::to_string(&echo)?);
    w.u64(stats.task_id as u64);
    w.u64(stats.entries.len() as u64);
    for (name, e) in &stats.entries {
        w.string(name);
        w.u64(e.samples);
        w.u64(e.gram.shape()[0] as u64);
        w.f64s(e.gram.data());
    }
    write_file(path, &w.into_bytes())
}

pub fn load_grams(path: &Path, hint: &str) -> Result<(GramStats, GramEcho)> {
    let bytes = read_file(path, hint)?;
    let mut r = Reader::new(path, &bytes);
    r.expect_magic(GRAM_MAGIC, "gram")?;
    let version = r.u32("version")?;
    if version != ARTIFACT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported gram version {version}, expected {ARTIFACT_VERSION}"),
        ));
    }
    let echo: GramEcho = serde_json::from_str(&r.string("echo")?)
        .map_err(|e| Error::format(path, format!("echo does not parse: {e}")))?;
    let task_id = r.u64("task id")? as usize;
    let count = r.u64("entry count")? as usize;
    let mut entries = std::collections::BTreeMap::new();
    for _ in 0..count {
        let name = r.string("entry name")?;
        let samples = r.u64(&format!("{name} samples"))?;
        let dim = r.u64(&format!("{name} dim"))? as usize;
        let values = r.f64s(dim * dim, &format!("{name} values"))?;
        let gram = Tensor::from_vec(&[dim, dim], values)?;
        if entries.insert(name.clone(), GramEntry { gram, samples }).is_some() {
            return Err(Error::format(path, format!("duplicate gram entry {name}")));
        }
    }
    r.finish()?;
    let stats = GramStats { task_id, entries };
    stats.validate()?;
    Ok((stats, echo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use vitmerge::merge::{collect_grams, TaskModel};
    use vitmerge::train::generate;
    use vitmerge::vit::ViTParams;
    use vitmerge::{Family, ViTConfig};

    fn spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task_id: 1,
            num_classes: 3,
            family: Family::Stripes,
            noise_std: 0.1,
            seed: 42,
        }
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.data");
        let data = generate(&spec(), Split::Train, 6, 1, 8).unwrap();
        let echo =
            DataEcho { spec: spec(), split: Split::Train, samples: 6, channels: 1, image_size: 8 };
        save_dataset(&path, &data, &echo).unwrap();
        let (loaded, got_echo) = load_dataset(&path, "test").unwrap();
        assert_eq!(got_echo, echo);
        assert_eq!(loaded.labels, data.labels);
        assert_eq!(loaded.images.shape(), data.images.shape());
        for (a, b) in loaded.images.data().iter().zip(data.images.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Same content saved twice gives identical bytes.
        let second = dir.path().join("u.data");
        save_dataset(&second, &data, &echo).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&second).unwrap());
    }

    #[test]
    fn gram_round_trip_preserves_all_64_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gram");
        let config = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
        };
        let model =
            TaskModel { task_id: 1, params: ViTParams::init(&config, 5).unwrap() };
        let pool = generate(&spec(), Split::Test, 5, 1, 8).unwrap();
        let stats = collect_grams(&model, &pool).unwrap();
        save_grams(&path, &stats, pool.len()).unwrap();
        let (loaded, echo) = load_grams(&path, "test").unwrap();
        assert_eq!(echo.task_id, 1);
        assert_eq!(echo.pool_samples, 5);
        assert_eq!(loaded.task_id, stats.task_id);
        assert_eq!(loaded.entries.len(), stats.entries.len());
        for (name, e) in &stats.entries {
            let l = &loaded.entries[name];
            assert_eq!(l.samples, e.samples);
            for (a, b) in l.gram.data().iter().zip(e.gram.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.data");
        let data = generate(&spec(), Split::Train, 4, 1, 8).unwrap();
        let echo =
            DataEcho { spec: spec(), split: Split::Train, samples: 4, channels: 1, image_size: 8 };
        save_dataset(&path, &data, &echo).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Chop off one trailing label; the count field now overruns.
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_dataset(&path, "test"), Err(Error::Format { .. })));
    }
}
