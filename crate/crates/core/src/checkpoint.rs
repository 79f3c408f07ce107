//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `NEGMCKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, the JSON header, every matrix listed in
//! the header as little-endian `f64`s in order, and finally the SHA-256 of
//! everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::optim::{Optimizer, ParamSet};
use crate::rng::RngState;
use crate::synthworld::write_atomic;

pub const MAGIC: &[u8; 8] = b"NEGMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub world_hash: String,
    /// Next epoch to run.
    pub epoch: usize,
    /// Next global step.
    pub step: u64,
    pub model_opt_step: u64,
    pub sched_opt_step: u64,
    pub sched_baseline: f64,
    pub sched_updates: u64,
    pub order: Vec<usize>,
    pub cache_epoch: Option<usize>,
    pub rng: BTreeMap<String, RngState>,
    pub blocks: Vec<BlockEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blocks: Vec<Matrix>,
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                blocks: Vec::new(),
                ..header
            },
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: &Matrix) {
        self.header.blocks.push(BlockEntry {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
        });
        self.blocks.push(m.clone());
    }

    pub fn push_params<P: ParamSet>(&mut self, prefix: &str, p: &P) {
        for (name, m) in p.blocks() {
            self.push(format!("{prefix}/{name}"), m);
        }
    }

    pub fn push_optimizer(&mut self, prefix: &str, opt: &Optimizer) {
        for (i, m) in opt.first_moment.iter().enumerate() {
            self.push(format!("{prefix}/m/{i}"), m);
        }
        for (i, m) in opt.second_moment.iter().enumerate() {
            self.push(format!("{prefix}/v/{i}"), m);
        }
    }

    pub fn block(&self, name: &str) -> Option<&Matrix> {
        self.header
            .blocks
            .iter()
            .position(|b| b.name == name)
            .map(|i| &self.blocks[i])
    }

    /// Overwrites every block of `p` from `prefix/<block>`; shapes must match.
    pub fn fill_params<P: ParamSet>(&self, prefix: &str, p: &mut P) -> Result<()> {
        for (name, dst) in p.blocks_mut() {
            let key = format!("{prefix}/{name}");
            let src = self
                .block(&key)
                .ok_or_else(|| Error::StateCorruption(format!("checkpoint lacks block {key}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::StateCorruption(format!(
                    "block {key} has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Moment buffers stored under `prefix/m/*` and `prefix/v/*`.
    pub fn moments(&self, prefix: &str) -> (Vec<Matrix>, Vec<Matrix>) {
        let collect = |kind: &str| {
            let mut out = Vec::new();
            while let Some(m) = self.block(&format!("{prefix}/{kind}/{}", out.len())) {
                out.push(m.clone());
            }
            out
        };
        (collect("m"), collect("v"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::StateCorruption(format!("cannot encode checkpoint header: {e}")))?;
        let floats: usize = self.blocks.iter().map(|b| b.as_slice().len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * floats + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.blocks {
            for x in b.as_slice() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 20 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::format(
                origin,
                format!("checkpoint version {version}, this build reads {VERSION}"),
            ));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::StateCorruption(format!(
                "{}: checksum mismatch (truncated or modified)",
                origin.display()
            )));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::StateCorruption("header length exceeds file".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[20..hend])
            .map_err(|e| Error::StateCorruption(format!("bad checkpoint header: {e}")))?;
        let mut pos = hend;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for entry in &header.blocks {
            let n = entry.rows * entry.cols;
            let end = pos + 8 * n;
            if end > body.len() {
                return Err(Error::StateCorruption(format!("block {} is truncated", entry.name)));
            }
            let data = body[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blocks.push(Matrix::from_vec(entry.rows, entry.cols, data));
            pos = end;
        }
        if pos != body.len() {
            return Err(Error::StateCorruption("trailing bytes after the last block".into()));
        }
        Ok(Checkpoint { header, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
