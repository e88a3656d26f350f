//! Versioned binary checkpoints.
//!
//! ```text
//! magic    b"PDCK"
//! version  u32
//! hash     u32 length + UTF-8 config hash
//! spec     u32 length + TOML model spec
//! stats    u32 length + NormStats JSON
//! count    u32
//! params   count × (u32 name length, name, u32 rank, rank × u64 dims, f64 data)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{model_hash, DiffusionConfig, ModelConfig};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::PhysDiff;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PDCK";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild the network skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub m: usize,
    pub n: usize,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
}

impl ModelSpec {
    pub fn of(model: &PhysDiff) -> Self {
        Self { m: model.m, n: model.n, model: model.cfg.clone(), diffusion: model.diffusion.clone() }
    }

    pub fn hash(&self) -> String {
        model_hash(&self.model, &self.diffusion, (self.m, self.n))
    }
}

pub fn write_checkpoint<W: Write>(model: &PhysDiff, stats: &NormStats, mut w: W) -> Result<()> {
    let spec = ModelSpec::of(model);
    let spec_text = toml::to_string(&spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for block in [spec.hash().as_bytes(), spec_text.as_bytes(), serde_json::to_string(stats)?.as_bytes()] {
        w.write_all(&(block.len() as u32).to_le_bytes())?;
        w.write_all(block)?;
    }
    let leaves = model.ps.leaves();
    w.write_all(&(leaves.len() as u32).to_le_bytes())?;
    for leaf in leaves {
        w.write_all(&(leaf.name.len() as u32).to_le_bytes())?;
        w.write_all(leaf.name.as_bytes())?;
        w.write_all(&(leaf.value.shape().len() as u32).to_le_bytes())?;
        for &d in leaf.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in leaf.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &PhysDiff, stats: &NormStats, path: &Path) -> Result<()> {
    write_checkpoint(model, stats, BufWriter::new(File::create(path)?))
}

struct Reader<R> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated while reading {what}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        if n > 1 << 24 {
            return Err(Error::Checkpoint(format!("implausible {what} length {n}")));
        }
        String::from_utf8(self.bytes(n, what)?).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Raw checkpoint contents before they are bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub hash: String,
    pub spec: ModelSpec,
    pub stats: NormStats,
    pub params: Vec<(String, Tensor)>,
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = Reader { r };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let hash = r.string("config hash")?;
    let spec: ModelSpec =
        toml::from_str(&r.string("model spec")?).map_err(|e| Error::Checkpoint(format!("model spec: {e}")))?;
    if spec.hash() != hash {
        return Err(Error::Checkpoint("stored config hash does not match the stored model spec".into()));
    }
    let stats: NormStats = serde_json::from_str(&r.string("normalization stats")?)?;
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string("parameter name")?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64("shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.bytes(len * 8, &name)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameter table".into()));
    }
    Ok(Checkpoint { hash, spec, stats, params })
}

impl Checkpoint {
    /// Rebuilds the model from the embedded spec and restores every parameter.
    pub fn into_model(self) -> Result<(PhysDiff, NormStats)> {
        let s = &self.spec;
        let mut model = PhysDiff::new(&s.model, &s.diffusion, s.m, s.n, 0)?;
        let leaves = model.ps.leaves_mut();
        if leaves.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter table has {} entries, model has {}",
                self.params.len(),
                leaves.len()
            )));
        }
        for (leaf, (name, value)) in leaves.iter_mut().zip(self.params) {
            if leaf.name != name || leaf.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match model parameter {} {:?}",
                    value.shape(),
                    leaf.name,
                    leaf.value.shape()
                )));
            }
            leaf.value = value;
        }
        Ok((model, self.stats))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(PhysDiff, NormStats)> {
    read_checkpoint(BufReader::new(File::open(path)?))?.into_model()
}

/// Loads only if the checkpoint was written for exactly this configuration.
pub fn load_checkpoint_for(
    path: &Path,
    model: &ModelConfig,
    diffusion: &DiffusionConfig,
    window: (usize, usize),
) -> Result<(PhysDiff, NormStats)> {
    let ck = read_checkpoint(BufReader::new(File::open(path)?))?;
    let want = model_hash(model, diffusion, window);
    if ck.hash != want {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: checkpoint {} vs requested {want} (ablation {} vs {})",
            ck.hash,
            ck.spec.model.ablation().tag(),
            model.ablation().tag()
        )));
    }
    ck.into_model()
}
