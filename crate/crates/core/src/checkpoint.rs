//! Binary weight serialization and transfer-style initialization.
//!
//! File layout: magic `C3DW`, version u32 LE, config-echo JSON (u32 LE length
//! plus bytes), entry count u32 LE, then per entry: name length u16 LE, UTF-8
//! name, dtype u8 (0 = f32), rank u8, dims u32 LE per axis, and the f32 LE
//! row-major payload. Loads validate the whole file before any model is
//! touched, so corruption never leaves a half-updated model.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{build_model, Model, ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"C3DW";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: usize,
        detail: String,
    },
    #[error("config echo: {0}")]
    ConfigEcho(String),
    #[error("{0}")]
    EntryMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    /// JSON object echoing how the weights were produced. The model config
    /// lives under `"model"`; callers may attach further keys (for example
    /// the preprocessing target) before saving.
    pub config: serde_json::Value,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let entries = model
            .entries()
            .into_iter()
            .map(|(name, shape, values)| CheckpointEntry {
                name,
                shape,
                values: values.to_vec(),
            })
            .collect();
        let config = serde_json::json!({
            "model": serde_json::to_value(&model.config).expect("model config serializes"),
        });
        Checkpoint { version: VERSION, config, entries }
    }

    pub fn model_config(&self) -> Result<ModelConfig, CheckpointError> {
        let value = self
            .config
            .get("model")
            .ok_or_else(|| CheckpointError::ConfigEcho("missing \"model\" key".to_string()))?;
        serde_json::from_value(value.clone()).map_err(|e| CheckpointError::ConfigEcho(e.to_string()))
    }

    fn by_name(&self) -> HashMap<&str, &CheckpointEntry> {
        self.entries.iter().map(|e| (e.name.as_str(), e)).collect()
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// Writes via a temporary sibling file and rename, so a crash mid-write never
/// leaves a truncated checkpoint at the destination.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.version.to_le_bytes());
    let config = serde_json::to_vec(&ckpt.config).expect("config echo serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(ckpt.entries.len() as u32).to_le_bytes());
    for e in &ckpt.entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(0); // dtype f32
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("c3dw.tmp");
    fs::write(&tmp, &out).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: String) -> CheckpointError {
        CheckpointError::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            detail,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated while reading {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        r.pos = 0;
        return Err(r.err(format!("bad magic {magic:?}, expected \"C3DW\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config echo")?;
    let config: serde_json::Value = serde_json::from_slice(config_bytes)
        .map_err(|e| r.err(format!("config echo is not valid JSON: {e}")))?;

    let count = r.u32("entry count")? as usize;
    if count == 0 {
        return Err(r.err("empty checkpoint".to_string()));
    }
    let mut entries = Vec::with_capacity(count);
    let mut seen = HashMap::new();
    for i in 0..count {
        let name_len = r.u16(&format!("entry {i} name length"))? as usize;
        let name_bytes = r.take(name_len, &format!("entry {i} name"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| r.err(format!("entry {i} name is not UTF-8: {e}")))?
            .to_string();
        if let Some(prev) = seen.insert(name.clone(), i) {
            return Err(r.err(format!("duplicate entry name {name:?} (entries {prev} and {i})")));
        }
        let dtype = r.u8(&format!("entry {name} dtype"))?;
        if dtype != 0 {
            r.pos -= 1;
            return Err(r.err(format!("entry {name}: unknown dtype tag {dtype}")));
        }
        let rank = r.u8(&format!("entry {name} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for a in 0..rank {
            shape.push(r.u32(&format!("entry {name} dim {a}"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4, &format!("entry {name} payload"))?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(CheckpointEntry { name, shape, values });
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes after last entry", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { version, config, entries })
}

// ---------------------------------------------------------------------------
// Applying weights to models
// ---------------------------------------------------------------------------

/// Strict full restore: every model entry must appear in the checkpoint with
/// a matching shape and no checkpoint entry may be left over. The model is
/// only mutated once the whole mapping has validated.
pub fn load_into_model(ckpt: &Checkpoint, model: &mut Model) -> Result<(), CheckpointError> {
    let by_name = ckpt.by_name();
    let model_entries = model.entries();
    let mut problems = Vec::new();
    for (name, shape, _) in &model_entries {
        match by_name.get(name.as_str()) {
            None => problems.push(format!("{name}: absent from checkpoint")),
            Some(e) if &e.shape != shape => problems.push(format!(
                "{name}: checkpoint shape {:?} vs model shape {shape:?}",
                e.shape
            )),
            Some(_) => {}
        }
    }
    let model_names: HashMap<&str, ()> =
        model_entries.iter().map(|(n, _, _)| (n.as_str(), ())).collect();
    for e in &ckpt.entries {
        if !model_names.contains_key(e.name.as_str()) {
            problems.push(format!("{}: not a model entry", e.name));
        }
    }
    if !problems.is_empty() {
        return Err(CheckpointError::EntryMismatch(format!(
            "checkpoint does not match model ({} problems): {}",
            problems.len(),
            problems.join("; ")
        )));
    }
    let names: Vec<String> = model_entries.into_iter().map(|(n, _, _)| n).collect();
    for name in names {
        model.set_entry(&name, &by_name[name.as_str()].values)?;
    }
    Ok(())
}

/// Rebuilds the model described by the checkpoint's config echo and restores
/// every entry.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model, CheckpointError> {
    let config = ckpt.model_config()?;
    let mut model = build_model(config, 0)?;
    load_into_model(ckpt, &mut model)?;
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct TransferPolicy {
    /// Skip entries whose name or shape has no counterpart instead of failing.
    pub skip_mismatched: bool,
    /// Freshly initialize classifier parameters instead of loading them.
    pub reinit_head: bool,
    pub head_prefix: String,
    /// Seed for the head reinitialization draws.
    pub reinit_seed: u64,
}

impl Default for TransferPolicy {
    fn default() -> Self {
        TransferPolicy {
            skip_mismatched: true,
            reinit_head: true,
            head_prefix: "head.".to_string(),
            reinit_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<(String, String)>,
}

/// Copies name-and-shape-matched entries from the checkpoint into the model.
///
/// With `reinit_head`, entries under `head_prefix` are redrawn from
/// `reinit_seed` rather than loaded. Mismatches elsewhere are either reported
/// as skipped or, with `skip_mismatched` off, collected into one error before
/// any mutation happens.
pub fn transfer_init(
    model: &mut Model,
    ckpt: &Checkpoint,
    policy: &TransferPolicy,
) -> Result<LoadReport, CheckpointError> {
    let by_name = ckpt.by_name();
    let plan: Vec<(String, Vec<usize>)> = model
        .entries()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();

    let mut mismatches = Vec::new();
    for (name, shape) in &plan {
        if policy.reinit_head && name.starts_with(&policy.head_prefix) {
            continue;
        }
        match by_name.get(name.as_str()) {
            None => mismatches.push(format!("{name}: absent from checkpoint")),
            Some(e) if &e.shape != shape => mismatches.push(format!(
                "{name}: checkpoint shape {:?} vs model shape {shape:?}",
                e.shape
            )),
            Some(_) => {}
        }
    }
    if !policy.skip_mismatched && !mismatches.is_empty() {
        return Err(CheckpointError::EntryMismatch(format!(
            "transfer found {} mismatched entries: {}",
            mismatches.len(),
            mismatches.join("; ")
        )));
    }

    let mut report = LoadReport::default();
    let mut head_rng = ChaCha8Rng::seed_from_u64(policy.reinit_seed);
    for (name, shape) in &plan {
        if policy.reinit_head && name.starts_with(&policy.head_prefix) {
            model.reinit_param(name, &mut head_rng)?;
            report.skipped.push((name.clone(), "head reinitialized".to_string()));
            continue;
        }
        match by_name.get(name.as_str()) {
            None => report.skipped.push((name.clone(), "absent from checkpoint".to_string())),
            Some(e) if &e.shape != shape => report.skipped.push((
                name.clone(),
                format!("checkpoint shape {:?} vs model shape {shape:?}", e.shape),
            )),
            Some(e) => {
                model.set_entry(name, &e.values)?;
                report.loaded.push(name.clone());
            }
        }
    }
    Ok(report)
}
