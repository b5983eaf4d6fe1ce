//! Binary model snapshots.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! magic "VITMERGE-CKPT-1\0"  (16 bytes)
//! u32  format version (1)
//! str  kind             ("vit" or "gate"; u32 length prefix, UTF-8)
//! str  lineage          ("pretrained", "from-scratch", "merged" or "n/a")
//! str  config echo      (JSON; enough to rebuild the parameter skeleton)
//! u64  seed             (the experiment seed that produced the weights)
//! u64  entry count
//! per entry: str name | u64 ndim | ndim x u64 extents | f32 values
//! ```
//!
//! Values are stored in 32-bit precision. Parameters produced by
//! initialization and SGD already sit on the 32-bit grid, so for them
//! `load(save(p))` reproduces `p` bit for bit; merged weights, which the
//! merge math leaves in full 64-bit precision, are narrowed once when
//! checkpointed. Nothing in the file depends on wall-clock time, so equal
//! inputs yield byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use vitmerge::train::GateLayer;
use vitmerge::vit::ViTParams;
use vitmerge::{GateNet, SyntheticTaskSpec, Tensor, ViTConfig};

use crate::error::{Error, Result};
use crate::wire::{read_file, write_file, Reader, Writer};

pub const CKPT_MAGIC: &[u8; 16] = b"VITMERGE-CKPT-1\0";
pub const CKPT_VERSION: u32 = 1;

pub const KIND_VIT: &str = "vit";
pub const KIND_GATE: &str = "gate";

pub const LINEAGE_PRETRAINED: &str = "pretrained";
pub const LINEAGE_FROM_SCRATCH: &str = "from-scratch";
pub const LINEAGE_MERGED: &str = "merged";
pub const LINEAGE_NONE: &str = "n/a";

/// One named tensor. Values are kept as f64 in memory to match [`Tensor`],
/// but every value is on the 32-bit grid once it has passed through a file.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// A parsed checkpoint, independent of what model kind it holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub lineage: String,
    pub config_json: String,
    pub seed: u64,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.magic(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.string(&self.kind);
        w.string(&self.lineage);
        w.string(&self.config_json);
        w.u64(self.seed);
        w.u64(self.entries.len() as u64);
        for e in &self.entries {
            w.string(&e.name);
            w.u64(e.shape.len() as u64);
            for &d in &e.shape {
                w.u64(d as u64);
            }
            w.f32s_from_f64(&e.values);
        }
        write_file(path, &w.into_bytes())
    }

    pub fn load(path: &Path, hint: &str) -> Result<Checkpoint> {
        let bytes = read_file(path, hint)?;
        let mut r = Reader::new(path, &bytes);
        r.expect_magic(CKPT_MAGIC, "checkpoint")?;
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version}, expected {CKPT_VERSION}"),
            ));
        }
        let kind = r.string("kind")?;
        let lineage = r.string("lineage")?;
        let config_json = r.string("config echo")?;
        let seed = r.u64("seed")?;
        let count = r.u64("entry count")? as usize;
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let name = r.string(&format!("entry {i} name"))?;
            let ndim = r.u64(&format!("{name} ndim"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64(&format!("{name} extent"))? as usize);
            }
            let len: usize = shape.iter().product();
            let values = r.f32s_to_f64(len, &format!("{name} values"))?;
            entries.push(Entry { name, shape, values });
        }
        r.finish()?;
        Ok(Checkpoint { kind, lineage, config_json, seed, entries })
    }
}

/// Extra provenance carried by merged-model checkpoints so evaluation can
/// find the source task models without re-reading the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEcho {
    /// CLI method name, e.g. "avgmean" or "regmean".
    pub method: String,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    /// Task id whose classifier head the merged weights carry.
    pub classifier_choice: usize,
    /// Task ids of the merged source models, ascending.
    pub sources: Vec<usize>,
    /// True when the sources were fine-tuned from independent random
    /// initializations instead of the shared base.
    pub scratch: bool,
}

/// Config echo of a ViT checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitEcho {
    pub model: ViTConfig,
    /// The task a fine-tuned model was trained on; absent for the base.
    #[serde(default)]
    pub task: Option<SyntheticTaskSpec>,
    /// Merge provenance; absent for trained models.
    #[serde(default)]
    pub merge: Option<MergeEcho>,
}

/// Header fields of a loaded ViT checkpoint.
#[derive(Debug, Clone)]
pub struct VitMeta {
    pub lineage: String,
    pub seed: u64,
    pub echo: VitEcho,
}

pub fn save_vit(
    path: &Path,
    params: &ViTParams,
    lineage: &str,
    seed: u64,
    task: Option<&SyntheticTaskSpec>,
    merge: Option<MergeEcho>,
) -> Result<()> {
    let echo = VitEcho { model: params.config.clone(), task: task.cloned(), merge };
    let entries = params
        .named()
        .into_iter()
        .map(|(name, _, t)| Entry { name, shape: t.shape().to_vec(), values: t.data().to_vec() })
        .collect();
    let ckpt = Checkpoint {
        kind: KIND_VIT.to_string(),
        lineage: lineage.to_string(),
        config_json: serde_json::to_string(&echo)?,
        seed,
        entries,
    };
    ckpt.save(path)
}

pub fn load_vit(path: &Path, hint: &str) -> Result<(ViTParams, VitMeta)> {
    let ckpt = Checkpoint::load(path, hint)?;
    if ckpt.kind != KIND_VIT {
        return Err(Error::format(path, format!("expected a vit checkpoint, found '{}'", ckpt.kind)));
    }
    let echo: VitEcho = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::format(path, format!("config echo does not parse: {e}")))?;
    // The skeleton comes from the echoed geometry; every tensor is then
    // overwritten from the file, so the init seed below never shows through.
    let mut params = ViTParams::init(&echo.model, 0)?;
    let mut by_name: std::collections::BTreeMap<&str, &Entry> =
        ckpt.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    if by_name.len() != ckpt.entries.len() {
        return Err(Error::format(path, "duplicate tensor name".to_string()));
    }
    for (name, _, t) in params.named_mut() {
        let entry = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::format(path, format!("tensor {name} is missing from the checkpoint"))
        })?;
        if entry.shape != t.shape() {
            return Err(Error::format(
                path,
                format!("tensor {name} has shape {:?}, expected {:?}", entry.shape, t.shape()),
            ));
        }
        t.data_mut().copy_from_slice(&entry.values);
    }
    if let Some(stray) = by_name.keys().next() {
        return Err(Error::format(path, format!("unknown tensor {stray} in checkpoint")));
    }
    let meta = VitMeta { lineage: ckpt.lineage, seed: ckpt.seed, echo };
    Ok((params, meta))
}

/// Config echo of a gate checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEcho {
    pub input_dim: usize,
    pub num_tasks: usize,
    pub hidden: Vec<usize>,
}

pub fn save_gate(path: &Path, gate: &GateNet, seed: u64) -> Result<()> {
    let hidden: Vec<usize> =
        gate.layers.iter().take(gate.layers.len() - 1).map(|l| l.w.shape()[1]).collect();
    let echo = GateEcho { input_dim: gate.input_dim, num_tasks: gate.num_tasks, hidden };
    let entries = gate
        .named()
        .into_iter()
        .map(|(name, t)| Entry { name, shape: t.shape().to_vec(), values: t.data().to_vec() })
        .collect();
    let ckpt = Checkpoint {
        kind: KIND_GATE.to_string(),
        lineage: LINEAGE_NONE.to_string(),
        config_json: serde_json::to_string(&echo)?,
        seed,
        entries,
    };
    ckpt.save(path)
}

pub fn load_gate(path: &Path, hint: &str) -> Result<(GateNet, u64)> {
    let ckpt = Checkpoint::load(path, hint)?;
    if ckpt.kind != KIND_GATE {
        return Err(Error::format(
            path,
            format!("expected a gate checkpoint, found '{}'", ckpt.kind),
        ));
    }
    let echo: GateEcho = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::format(path, format!("config echo does not parse: {e}")))?;
    let mut dims = vec![echo.input_dim];
    dims.extend_from_slice(&echo.hidden);
    dims.push(echo.num_tasks);

    let by_name: std::collections::BTreeMap<&str, &Entry> =
        ckpt.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let expected = 2 * (dims.len() - 1);
    if ckpt.entries.len() != expected {
        return Err(Error::format(
            path,
            format!("gate has {} tensors, expected {expected}", ckpt.entries.len()),
        ));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for i in 1..dims.len() {
        let (din, dout) = (dims[i - 1], dims[i]);
        let w = fetch(path, &by_name, &format!("gate.layer{i}.weight"), &[din, dout])?;
        let b = fetch(path, &by_name, &format!("gate.layer{i}.bias"), &[dout])?;
        layers.push(GateLayer { w, b });
    }
    Ok((GateNet { input_dim: echo.input_dim, num_tasks: echo.num_tasks, layers }, ckpt.seed))
}

fn fetch(
    path: &Path,
    by_name: &std::collections::BTreeMap<&str, &Entry>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor> {
    let entry = by_name
        .get(name)
        .ok_or_else(|| Error::format(path, format!("tensor {name} is missing from the checkpoint")))?;
    if entry.shape != shape {
        return Err(Error::format(
            path,
            format!("tensor {name} has shape {:?}, expected {shape:?}", entry.shape),
        ));
    }
    Ok(Tensor::from_vec(&entry.shape, entry.values.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use vitmerge::train::derive_seed;

    fn small_config() -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    #[test]
    fn vit_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = ViTParams::init(&small_config(), derive_seed(9, 1)).unwrap();
        save_vit(&path, &params, LINEAGE_PRETRAINED, 9, None, None).unwrap();
        let (loaded, meta) = load_vit(&path, "test").unwrap();
        assert_eq!(meta.lineage, LINEAGE_PRETRAINED);
        assert_eq!(meta.seed, 9);
        assert_eq!(meta.echo.model, params.config);
        for ((na, _, ta), (nb, _, tb)) in params.named().iter().zip(loaded.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{na} changed across the round trip");
            }
        }
    }

    #[test]
    fn saved_files_are_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let params = ViTParams::init(&small_config(), 7).unwrap();
        let task = SyntheticTaskSpec {
            task_id: 2,
            num_classes: 3,
            family: vitmerge::Family::Checker,
            noise_std: 0.1,
            seed: 5,
        };
        save_vit(&a, &params, LINEAGE_FROM_SCRATCH, 7, Some(&task), None).unwrap();
        save_vit(&b, &params, LINEAGE_FROM_SCRATCH, 7, Some(&task), None).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let (_, meta) = load_vit(&a, "test").unwrap();
        assert_eq!(meta.echo.task.unwrap().task_id, 2);
    }

    #[test]
    fn gate_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let gate = GateNet::new(16, 3, &[5, 4], 11).unwrap();
        save_gate(&path, &gate, 11).unwrap();
        let (loaded, seed) = load_gate(&path, "test").unwrap();
        assert_eq!(seed, 11);
        assert_eq!(loaded, gate);
    }

    #[test]
    fn linear_gate_round_trips_too() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let gate = GateNet::new(16, 4, &[], 3).unwrap();
        save_gate(&path, &gate, 3).unwrap();
        let (loaded, _) = load_gate(&path, "test").unwrap();
        assert_eq!(loaded, gate);
    }

    #[test]
    fn missing_file_names_the_path_and_hint() {
        let err = load_vit(Path::new("/nonexistent/base.ckpt"), "run pretrain first").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/nonexistent/base.ckpt"), "{msg}");
        assert!(msg.contains("run pretrain first"), "{msg}");
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = ViTParams::init(&small_config(), 1).unwrap();
        save_vit(&path, &params, LINEAGE_PRETRAINED, 1, None, None).unwrap();

        // Wrong magic.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_vit(&path, "test"), Err(Error::Format { .. })));

        // Truncation.
        save_vit(&path, &params, LINEAGE_PRETRAINED, 1, None, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_vit(&path, "test"), Err(Error::Format { .. })));

        // Trailing garbage.
        save_vit(&path, &params, LINEAGE_PRETRAINED, 1, None, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_vit(&path, "test"), Err(Error::Format { .. })));
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let gate = GateNet::new(8, 2, &[4], 0).unwrap();
        save_gate(&path, &gate, 0).unwrap();
        assert!(matches!(load_vit(&path, "test"), Err(Error::Format { .. })));
    }
}
