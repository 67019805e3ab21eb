//! On-disk checkpoints.
//!
//! A checkpoint directory holds `weights.bin` (learnable tensors),
//! `optimizer.bin` (Adam moments, same layout) and `checkpoint.json`
//! (everything else needed to evaluate or resume).
//!
//! Tensor files start with the 8-byte magic `VGCL0001`, followed by records
//! of: name length (u32), UTF-8 name, rank (u32), dims (u64 each), then the
//! values as little-endian f64 in row-major order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderConfig, ParamKind, Params, VariationalParams, Weights};
use crate::ndiff::{AdamState, DenseMatrix};
use crate::rng::StreamPos;
use crate::train::{EpochRecord, Mode, TrainConfig};

pub const MAGIC: &[u8; 8] = b"VGCL0001";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const META_FILE: &str = "checkpoint.json";

pub fn write_tensors(path: &Path, tensors: &[(String, &DenseMatrix)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    for (name, t) in tensors {
        put(&(name.len() as u32).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&2u32.to_le_bytes())?;
        put(&(t.rows() as u64).to_le_bytes())?;
        put(&(t.cols() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        put(&buf)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, DenseMatrix)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(bad("missing VGCL0001 header".into()));
    }
    let mut cur = Cursor { bytes: &bytes, pos: 8 };
    let mut out = Vec::new();
    while !cur.at_end() {
        let truncated = |cur: &Cursor| bad(format!("truncated at byte {}", cur.pos));
        let name_len = cur.u32().ok_or_else(|| truncated(&cur))? as usize;
        let name = cur.take(name_len).ok_or_else(|| truncated(&cur))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        let rank = cur.u32().ok_or_else(|| truncated(&cur))?;
        let mut dims = Vec::new();
        for _ in 0..rank.min(2) {
            dims.push(cur.u64().ok_or_else(|| truncated(&cur))? as usize);
        }
        let (rows, cols) = match (rank, &dims[..]) {
            (1, &[c]) => (1, c),
            (2, &[r, c]) => (r, c),
            _ => return Err(bad(format!("tensor {name} has unsupported rank {rank}"))),
        };
        let bytes_needed = rows
            .checked_mul(cols)
            .and_then(|l| l.checked_mul(8))
            .ok_or_else(|| bad(format!("tensor {name} is too large")))?;
        let raw = cur.take(bytes_needed).ok_or_else(|| truncated(&cur))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, DenseMatrix::from_vec(rows, cols, data)));
    }
    Ok(out)
}

/// Best contrastive loss among the epochs recorded so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestSoFar {
    pub epoch: usize,
    pub infonce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Epoch whose contrastive loss is `loss`.
    pub epoch: usize,
    pub loss: f64,
    pub mode: Mode,
    pub config_hash: String,
    pub encoder: EncoderConfig,
    pub dataset: String,
    pub num_nodes: usize,
    pub config: TrainConfig,
    /// First epoch a resumed run computes.
    pub next_epoch: usize,
    pub adam_t: u64,
    pub augment_rng: StreamPos,
    pub weights_rng: StreamPos,
    pub best: Option<BestSoFar>,
    /// Records of epochs `1..next_epoch`.
    pub log: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Params,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let names = self.params.tensor_names();
        let tensors: Vec<(String, &DenseMatrix)> = names.iter().cloned().zip(self.params.tensors()).collect();
        write_tensors(&dir.join(WEIGHTS_FILE), &tensors)?;

        let moments: Vec<(String, &DenseMatrix)> = names
            .iter()
            .map(|n| format!("m/{n}"))
            .zip(&self.optimizer.m)
            .chain(names.iter().map(|n| format!("v/{n}")).zip(&self.optimizer.v))
            .collect();
        write_tensors(&dir.join(OPTIMIZER_FILE), &moments)?;

        let path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&self.meta).expect("checkpoint metadata serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;

        let weights_path = dir.join(WEIGHTS_FILE);
        let kind = meta.mode.param_kind();
        let tensors = read_tensors(&weights_path)?;
        let params = params_from_tensors(&weights_path, kind, tensors)?;
        if params.config() != meta.encoder {
            return Err(Error::Checkpoint {
                path: weights_path,
                message: format!("tensor shapes {:?} disagree with metadata {:?}", params.config(), meta.encoder),
            });
        }

        let opt_path = dir.join(OPTIMIZER_FILE);
        let moments = read_tensors(&opt_path)?;
        let count = params.tensors().len();
        if moments.len() != 2 * count
            || moments
                .iter()
                .zip(params.tensors().iter().chain(params.tensors().iter()))
                .any(|((_, m), p)| m.shape() != p.shape())
        {
            return Err(Error::Checkpoint {
                path: opt_path,
                message: "optimizer moments do not match the parameters".into(),
            });
        }
        let mut moments = moments.into_iter().map(|(_, m)| m);
        let m: Vec<DenseMatrix> = moments.by_ref().take(count).collect();
        let v: Vec<DenseMatrix> = moments.collect();
        let mut optimizer = AdamState::new(meta.config.lr, params.tensors());
        optimizer.t = meta.adam_t;
        optimizer.m = m;
        optimizer.v = v;

        Ok(Checkpoint { meta, params, optimizer })
    }
}

fn params_from_tensors(path: &Path, kind: ParamKind, tensors: Vec<(String, DenseMatrix)>) -> Result<Params> {
    let expected = match kind {
        ParamKind::Deterministic => 6,
        ParamKind::Variational => 12,
    };
    let bad = |message: String| Error::Checkpoint {
        path: PathBuf::from(path),
        message,
    };
    if tensors.len() != expected {
        return Err(bad(format!("expected {expected} tensors, found {}", tensors.len())));
    }
    let (names, mats): (Vec<String>, Vec<DenseMatrix>) = tensors.into_iter().unzip();
    let mut mats = mats.into_iter();
    let mut half = || Weights::from_tensors(mats.by_ref().take(6).collect()).map_err(|e| bad(e.to_string()));
    let params = match kind {
        ParamKind::Deterministic => Params::Deterministic(half()?),
        ParamKind::Variational => {
            let mean = half()?;
            let spread = half()?;
            if spread.config() != mean.config() {
                return Err(bad("spread shapes differ from mean shapes".into()));
            }
            Params::Variational(VariationalParams { mean, spread })
        }
    };
    if params.tensor_names() != names {
        return Err(bad(format!("unexpected tensor names {names:?}")));
    }
    Ok(params)
}
