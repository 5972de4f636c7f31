//! Versioned binary checkpoint.
//!
//! Layout: magic, format version (u32), a JSON metadata block, then the
//! online, target, Adam moment and snapshot parameter stores as named
//! little-endian f32 arrays, then the replay buffer as episode recipes.
//! Integers are little-endian; strings and blobs are u64-length-prefixed.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::qnet::{NetArchitecture, ParamStore, ParamTensor};
use crate::replay::EpisodeRecipe;

pub const MAGIC: &[u8; 8] = b"ECHOLOC\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub arch: NetArchitecture,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Epsilon scheduled for the next epoch.
    pub epsilon: f64,
    pub global_iter: u64,
    pub next_episode_id: u64,
    pub opt_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySnapshot {
    pub capacity: usize,
    /// Episode id and recipe, oldest first.
    pub episodes: Vec<(u64, EpisodeRecipe)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub online: ParamStore<f32>,
    pub target: ParamStore<f32>,
    pub opt_m: ParamStore<f32>,
    pub opt_v: ParamStore<f32>,
    /// Online parameter history for delayed target updates, oldest first.
    pub snapshots: Vec<ParamStore<f32>>,
    pub replay: ReplaySnapshot,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn params(&mut self, p: &ParamStore<f32>) {
        self.u64(p.tensors().len() as u64);
        for t in p.tensors() {
            self.bytes(t.name.as_bytes());
            self.u64(t.shape.len() as u64);
            for d in &t.shape {
                self.u64(*d as u64);
            }
            self.u64(t.data.len() as u64);
            for v in &t.data {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|n| *n <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {v}")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn params(&mut self) -> Result<ParamStore<f32>> {
        let n = self.len()?;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = String::from_utf8(self.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dims = self.len()?;
            let shape = (0..dims).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
            let count = self.len()?;
            if count != shape.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} size disagrees with its shape"
                )));
            }
            let raw = self.take(count * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(ParamTensor { name, shape, data });
        }
        Ok(ParamStore::from_tensors(tensors))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.bytes(&serde_json::to_vec(&self.meta)?);
        for p in [&self.online, &self.target, &self.opt_m, &self.opt_v] {
            w.params(p);
        }
        w.u64(self.snapshots.len() as u64);
        for s in &self.snapshots {
            w.params(s);
        }
        w.u64(self.replay.capacity as u64);
        w.u64(self.replay.episodes.len() as u64);
        for (id, recipe) in &self.replay.episodes {
            w.u64(*id);
            w.u64(recipe.reset_seed);
            let actions: Vec<u8> = recipe.actions.iter().map(|a| a.to_byte()).collect();
            w.bytes(&actions);
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} unsupported (expected {FORMAT_VERSION})"
            )));
        }
        let meta: CheckpointMeta = serde_json::from_slice(r.bytes()?)?;
        let online = r.params()?;
        let target = r.params()?;
        let opt_m = r.params()?;
        let opt_v = r.params()?;
        let n_snap = r.len()?;
        let snapshots = (0..n_snap).map(|_| r.params()).collect::<Result<Vec<_>>>()?;
        let capacity = r.len()?;
        let n_ep = r.len()?;
        let mut episodes = Vec::with_capacity(n_ep);
        for _ in 0..n_ep {
            let id = r.u64()?;
            let reset_seed = r.u64()?;
            let actions = r
                .bytes()?
                .iter()
                .map(|b| Action::from_byte(*b))
                .collect::<Result<_>>()?;
            episodes.push((id, EpisodeRecipe { reset_seed, actions }));
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        for p in [&target, &opt_m, &opt_v].into_iter().chain(&snapshots) {
            online.check_layout(p)?;
        }
        online.check_arch(&meta.arch)?;
        Ok(Self {
            meta,
            online,
            target,
            opt_m,
            opt_v,
            snapshots,
            replay: ReplaySnapshot { capacity, episodes },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialised checkpoint, hex encoded.
    pub fn hash_hex(&self) -> Result<String> {
        Ok(Sha256::digest(self.to_bytes()?)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}
