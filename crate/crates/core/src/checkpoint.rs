//! Single-file tensor container used for training checkpoints and dataset caches.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DFU1" | version u32 | meta_len u64 | metadata JSON | table_len u64 | table JSON
//!        | payload (contiguous tensors) | SHA-256 of everything before
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::grid::{GridFunction, MultiResDataset, Normalization};
use crate::model::{ModelSpec, ModelState};
use crate::trainer::{Adam, TrainState};

pub const MAGIC: &[u8; 4] = b"DFU1";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            Self::F32(_) => "f32",
            Self::F64(_) => "f64",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Self::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Self::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: u64,
    bytes: u64,
}

/// Metadata plus an ordered list of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, TensorData)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Bounds-checked little-endian reader.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("file ends inside the {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let b = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(b.try_into().unwrap())).map_err(|_| corrupt(format!("{what} too large")))
    }
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = BTreeSet::new();
        let mut table = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Contract(format!("tensor `{name}` listed twice")));
            }
            let offset = payload.len() as u64;
            t.write(&mut payload);
            table.push(TableEntry {
                name: name.clone(),
                dtype: t.dtype().into(),
                shape: t.shape().to_vec(),
                offset,
                bytes: payload.len() as u64 - offset,
            });
        }
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| Error::Contract(e.to_string()))?;
        let table = serde_json::to_vec(&table).map_err(|e| Error::Contract(e.to_string()))?;
        let mut out = Vec::with_capacity(24 + meta.len() + table.len() + payload.len() + DIGEST);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(table.len() as u64).to_le_bytes());
        out.extend_from_slice(&table);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(digest.as_slice());
        Ok(out)
    }

    /// Checks magic, version and checksum before parsing anything else, so a
    /// damaged file never yields a partial result.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 || &buf[..4] != MAGIC {
            return Err(corrupt("missing DFU1 magic"));
        }
        let found = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if found != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            });
        }
        if buf.len() < 8 + DIGEST {
            return Err(corrupt("checksum mismatch (file truncated)"));
        }
        let (body, digest) = buf.split_at(buf.len() - DIGEST);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let mut rd = Reader { buf: body, pos: 8 };
        let n = rd.u64("metadata length")?;
        let metadata = serde_json::from_slice(rd.take(n, "metadata")?).map_err(|e| corrupt(format!("metadata: {e}")))?;
        let n = rd.u64("table length")?;
        let table: Vec<TableEntry> =
            serde_json::from_slice(rd.take(n, "tensor table")?).map_err(|e| corrupt(format!("tensor table: {e}")))?;
        let payload = &body[rd.pos..];
        let mut names = BTreeSet::new();
        let mut tensors = Vec::with_capacity(table.len());
        let mut expected_offset = 0u64;
        for e in table {
            if !names.insert(e.name.clone()) {
                return Err(corrupt(format!("tensor `{}` appears twice", e.name)));
            }
            let count: usize = e.shape.iter().product();
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(corrupt(format!("tensor `{}` has unknown dtype {other}", e.name))),
            };
            if e.offset != expected_offset || e.bytes != (count * width) as u64 {
                return Err(corrupt(format!("tensor `{}` has an inconsistent table entry", e.name)));
            }
            let start = e.offset as usize;
            let bytes = payload
                .get(start..start + count * width)
                .ok_or_else(|| corrupt(format!("tensor `{}` runs past the payload", e.name)))?;
            let data = if width == 4 {
                let v = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                TensorData::F32(Tensor::from_vec(&e.shape, v))
            } else {
                let v = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                TensorData::F64(Tensor::from_vec(&e.shape, v))
            };
            expected_offset += e.bytes;
            tensors.push((e.name, data));
        }
        if expected_offset as usize != payload.len() {
            return Err(corrupt("payload has trailing bytes"));
        }
        Ok(Self { metadata, tensors })
    }

    /// Writes through a temporary sibling and renames, so readers never see a half-written file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a resolved configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    /// Fully resolved run configuration text.
    pub config: String,
    pub config_hash: String,
    /// Seed of the run; with the step count it fixes every random stream on resume.
    pub seed: u64,
}

impl RunInfo {
    pub fn new(config: String, seed: u64) -> Self {
        Self {
            config_hash: config_hash(&config),
            config,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    kind: String,
    step: u64,
    spec: ModelSpec,
    frozen: BTreeMap<String, bool>,
    adam_steps: BTreeMap<String, u64>,
    run: RunInfo,
}

const GROUPS: [&str; 4] = ["param", "ema", "adam.m", "adam.v"];

pub fn checkpoint_container(state: &TrainState, run: &RunInfo) -> Result<Container> {
    let meta = StateMeta {
        kind: "train-state".into(),
        step: state.step,
        spec: state.model.spec.clone(),
        frozen: state.model.frozen.clone(),
        adam_steps: state.adam.t.clone(),
        run: run.clone(),
    };
    let mut tensors = Vec::new();
    for (group, store) in GROUPS.iter().zip([&state.model.params, &state.ema, &state.adam.m, &state.adam.v]) {
        for (k, t) in store {
            tensors.push((format!("{group}/{k}"), TensorData::F32(t.clone())));
        }
    }
    Ok(Container {
        metadata: serde_json::to_value(meta).map_err(|e| Error::Contract(e.to_string()))?,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, state: &TrainState, run: &RunInfo) -> Result<()> {
    checkpoint_container(state, run)?.save(path)
}

pub fn state_from_container(c: Container) -> Result<(TrainState, RunInfo)> {
    let meta: StateMeta = serde_json::from_value(c.metadata).map_err(|e| corrupt(format!("metadata: {e}")))?;
    if meta.kind != "train-state" {
        return Err(corrupt(format!("expected a train-state checkpoint, found `{}`", meta.kind)));
    }
    let mut stores: [ParamStore<f32>; 4] = Default::default();
    for (name, t) in c.tensors {
        let (group, key) = name.split_once('/').ok_or_else(|| corrupt(format!("tensor `{name}` has no group")))?;
        let slot = GROUPS.iter().position(|g| *g == group).ok_or_else(|| corrupt(format!("unknown tensor group `{group}`")))?;
        let TensorData::F32(t) = t else {
            return Err(corrupt(format!("tensor `{name}` must be f32")));
        };
        stores[slot].insert(key.to_string(), t);
    }
    let [params, ema, m, v] = stores;
    let keys: Vec<&String> = params.keys().collect();
    for (group, s) in GROUPS[1..].iter().zip([&ema, &m, &v]) {
        if s.keys().collect::<Vec<_>>() != keys || s.iter().any(|(k, t)| t.shape() != params[k].shape()) {
            return Err(corrupt(format!("`{group}` tensors do not match the parameter set")));
        }
    }
    if meta.adam_steps.keys().collect::<Vec<_>>() != keys {
        return Err(corrupt("optimizer step counts do not match the parameter set"));
    }
    let state = TrainState {
        model: ModelState {
            spec: meta.spec,
            params,
            frozen: meta.frozen,
        },
        ema,
        adam: Adam { m, v, t: meta.adam_steps },
        step: meta.step,
    };
    Ok((state, meta.run))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, RunInfo)> {
    state_from_container(Container::load(path)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    kind: String,
    count: usize,
    channels: usize,
    resolutions: Vec<usize>,
    normalization: Vec<Normalization>,
    run: RunInfo,
}

/// Stores each level as one `[N, C, r, r]` f64 tensor.
pub fn save_dataset(path: &Path, ds: &MultiResDataset, run: &RunInfo) -> Result<()> {
    let meta = DatasetMeta {
        kind: "dataset".into(),
        count: ds.len(),
        channels: ds.channels(),
        resolutions: ds.resolutions().to_vec(),
        normalization: ds.normalization().to_vec(),
        run: run.clone(),
    };
    let tensors = ds
        .resolutions()
        .iter()
        .map(|&r| {
            let data: Vec<f64> = ds.iter(r).flat_map(|g| g.values().iter().copied()).collect();
            (format!("level/{r}"), TensorData::F64(Tensor::from_vec(&[ds.len(), ds.channels(), r, r], data)))
        })
        .collect();
    Container {
        metadata: serde_json::to_value(meta).map_err(|e| Error::Contract(e.to_string()))?,
        tensors,
    }
    .save(path)
}

pub fn load_dataset(path: &Path) -> Result<(MultiResDataset, RunInfo)> {
    let c = Container::load(path)?;
    let meta: DatasetMeta = serde_json::from_value(c.metadata).map_err(|e| corrupt(format!("metadata: {e}")))?;
    if meta.kind != "dataset" {
        return Err(corrupt(format!("expected a dataset cache, found `{}`", meta.kind)));
    }
    let mut entries: Vec<BTreeMap<usize, GridFunction>> = vec![BTreeMap::new(); meta.count];
    for (name, t) in c.tensors {
        let r: usize = name
            .strip_prefix("level/")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(format!("unexpected tensor `{name}` in dataset")))?;
        let TensorData::F64(t) = t else {
            return Err(corrupt(format!("level {r} must be f64")));
        };
        if t.shape() != [meta.count, meta.channels, r, r] {
            return Err(corrupt(format!("level {r} has shape {:?}", t.shape())));
        }
        let per = meta.channels * r * r;
        for (e, chunk) in entries.iter_mut().zip(t.data().chunks_exact(per.max(1))) {
            e.insert(r, GridFunction::new(meta.channels, r, chunk.to_vec())?);
        }
    }
    let ds = MultiResDataset::from_parts(entries, meta.resolutions, meta.channels, meta.normalization)
        .map_err(|e| corrupt(format!("dataset levels: {e}")))?;
    Ok((ds, meta.run))
}
