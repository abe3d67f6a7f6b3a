//! Server checkpoints.
//!
//! ```text
//! "SRGTCKPT"  magic, 8 bytes
//! u32         format version
//! u32 n, n*u32                layer widths
//! u64 p, p*f32, p*f32, p*f32  parameters, Adam first and second moments
//! u64, 3*f64                  Adam step count, beta1, beta2, eps
//! u64, u64                    samples seen (all ranks), batches
//! u32 ranks, then per rank:
//!     u32 k, k * (u32 client, u32 sim, u32 m, m*u32 t)   reception log
//!     u32 d, d*u32                                       simulations finished on this rank
//!     32 bytes seed, u64 stream, u128 word position      buffer RNG
//! u32 f, f*u32                simulations permanently failed
//! 32 bytes                    SHA-256 of everything above
//! ```
//!
//! All integers and floats little-endian. Buffer contents are not saved.

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{AdamConfig, AdamState, Mlp};
use crate::seed::RngState;

use super::reception::ReceptionLog;

pub const MAGIC: &[u8; 8] = b"SRGTCKPT";
pub const VERSION: u32 = 1;
const DIGEST_BYTES: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct RankCheckpoint {
    pub log: ReceptionLog,
    pub done: BTreeSet<u32>,
    pub buffer_rng: RngState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerCheckpoint {
    pub model: Mlp<f32>,
    pub adam: AdamState<f32>,
    pub samples_seen: u64,
    pub batches: u64,
    pub ranks: Vec<RankCheckpoint>,
    pub failed: BTreeSet<u32>,
}

impl ServerCheckpoint {
    /// Simulations finished on every rank.
    pub fn completed(&self) -> BTreeSet<u32> {
        let mut ranks = self.ranks.iter();
        let Some(first) = ranks.next() else {
            return BTreeSet::new();
        };
        ranks.fold(first.done.clone(), |acc, r| {
            acc.intersection(&r.done).copied().collect()
        })
    }

    pub fn unique_samples(&self) -> usize {
        self.ranks.iter().map(|r| r.log.len()).sum()
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {VERSION}")]
    Version { found: u32 },
    #[error("checkpoint digest mismatch: file is corrupt")]
    Digest,
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("malformed checkpoint at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

struct Enc(Vec<u8>);

impl Enc {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("checkpoint section exceeds u32 entries"));
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn set(&mut self, s: &BTreeSet<u32>) {
        self.len(s.len());
        s.iter().for_each(|&v| self.u32(v));
    }
}

struct Dec<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated { offset: self.at })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(
            self.take(16)?.try_into().expect("16 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }
    /// A count whose entries occupy at least `min_entry` bytes each.
    fn count(&mut self, min_entry: usize) -> Result<usize, CheckpointError> {
        let at = self.at;
        let n = self.u32()? as usize;
        if n.saturating_mul(min_entry) > self.bytes.len() - self.at {
            return Err(CheckpointError::Malformed {
                offset: at,
                message: format!("count {n} overruns file"),
            });
        }
        Ok(n)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or(CheckpointError::Truncated { offset: self.at })?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
    fn set(&mut self) -> Result<BTreeSet<u32>, CheckpointError> {
        let n = self.count(4)?;
        (0..n).map(|_| self.u32()).collect()
    }
}

pub fn encode_checkpoint(ck: &ServerCheckpoint) -> Vec<u8> {
    let mut e = Enc(Vec::new());
    e.0.extend_from_slice(MAGIC);
    e.u32(VERSION);
    e.len(ck.model.widths().len());
    ck.model.widths().iter().for_each(|&w| e.len(w));
    e.u64(ck.model.n_params() as u64);
    e.f32s(ck.model.params());
    e.f32s(&ck.adam.m);
    e.f32s(&ck.adam.v);
    e.u64(ck.adam.step);
    e.f64(ck.adam.cfg.beta1);
    e.f64(ck.adam.cfg.beta2);
    e.f64(ck.adam.cfg.eps);
    e.u64(ck.samples_seen);
    e.u64(ck.batches);
    e.len(ck.ranks.len());
    for r in &ck.ranks {
        let entries: Vec<_> = r.log.iter().collect();
        e.len(entries.len());
        for ((client, sim), steps) in entries {
            e.u32(client);
            e.u32(sim);
            e.set(steps);
        }
        e.set(&r.done);
        e.0.extend_from_slice(&r.buffer_rng.seed);
        e.u64(r.buffer_rng.stream);
        e.0.extend_from_slice(&r.buffer_rng.word_pos.to_le_bytes());
    }
    e.set(&ck.failed);
    let digest = Sha256::digest(&e.0);
    e.0.extend_from_slice(&digest);
    e.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ServerCheckpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    if bytes.len() < 12 + DIGEST_BYTES {
        return Err(CheckpointError::Truncated {
            offset: bytes.len(),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_BYTES);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Digest);
    }
    let mut d = Dec {
        bytes: body,
        at: 12,
    };
    let n_widths = d.count(4)?;
    let widths = (0..n_widths)
        .map(|_| d.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let at = d.at;
    let n_params = d.u64()? as usize;
    if n_params.saturating_mul(12) > body.len() - d.at {
        return Err(CheckpointError::Malformed {
            offset: at,
            message: format!("{n_params} parameters overrun file"),
        });
    }
    let params = d.f32s(n_params)?;
    let model = Mlp::from_params(&widths, params).map_err(|e| CheckpointError::Malformed {
        offset: at,
        message: e.to_string(),
    })?;
    let m = d.f32s(n_params)?;
    let v = d.f32s(n_params)?;
    let step = d.u64()?;
    let cfg = AdamConfig {
        beta1: d.f64()?,
        beta2: d.f64()?,
        eps: d.f64()?,
    };
    let samples_seen = d.u64()?;
    let batches = d.u64()?;
    let n_ranks = d.count(4 + 4 + 32 + 8 + 16)?;
    let mut ranks = Vec::with_capacity(n_ranks);
    for _ in 0..n_ranks {
        let n_entries = d.count(12)?;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let client = d.u32()?;
            let sim = d.u32()?;
            entries.push(((client, sim), d.set()?));
        }
        let done = d.set()?;
        let seed: [u8; 32] = d.take(32)?.try_into().expect("32 bytes");
        let stream = d.u64()?;
        let word_pos = d.u128()?;
        ranks.push(RankCheckpoint {
            log: ReceptionLog::from_entries(entries),
            done,
            buffer_rng: RngState {
                seed,
                stream,
                word_pos,
            },
        });
    }
    let failed = d.set()?;
    if d.at != body.len() {
        return Err(CheckpointError::Malformed {
            offset: d.at,
            message: "trailing bytes".into(),
        });
    }
    Ok(ServerCheckpoint {
        model,
        adam: AdamState { m, v, step, cfg },
        samples_seen,
        batches,
        ranks,
        failed,
    })
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(path: &Path, ck: &ServerCheckpoint) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_checkpoint(ck))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ServerCheckpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
