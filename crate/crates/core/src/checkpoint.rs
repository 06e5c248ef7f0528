//! Binary checkpoints: model parameters, the training log and, optionally,
//! the optimizer position needed to resume.
//!
//! Layout: `MAGIC`, header length (u64 LE), JSON header, parameters as f64 LE,
//! optimizer moments (two more parameter-sized blocks) when resumable, then
//! the SHA-256 of everything before it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::write_atomically;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::scalar::Scalar;
use crate::training::{AdamW, ResumeState, TrainLog};

const MAGIC: &[u8; 8] = b"BMCCKPT1";
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    seed: u64,
    scalar: String,
    num_params: usize,
    log: TrainLog,
    resume: Option<OptimizerHeader>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    step: usize,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    best_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub log: TrainLog,
    pub resume: Option<ResumeState<T>>,
}

fn push_block<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
    }
}

fn encode<T: Scalar>(model: &Model<T>, log: &TrainLog, resume: Option<&ResumeState<T>>) -> Result<Vec<u8>> {
    let header = Header {
        architecture: model.architecture().clone(),
        seed: model.seed(),
        scalar: T::NAME.to_string(),
        num_params: model.num_params(),
        log: log.clone(),
        resume: resume.map(|s| OptimizerHeader {
            step: s.step,
            t: s.optimizer.t,
            beta1: s.optimizer.beta1,
            beta2: s.optimizer.beta2,
            eps: s.optimizer.eps,
            weight_decay: s.optimizer.weight_decay,
            best_accuracy: s.best_accuracy,
        }),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * model.num_params() * 3 + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    push_block(&mut out, model.params());
    if let Some(s) = resume {
        let (m, v) = s.optimizer.moments();
        push_block(&mut out, m);
        push_block(&mut out, v);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomically(path, |w| w.write_all(bytes).map_err(|e| Error::io(path, e)))
}

pub fn save_checkpoint<T: Scalar>(policy: &Model<T>, log: &TrainLog, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode(policy, log, None)?)
}

/// Saves the policy together with the optimizer position in `state`; the
/// log stored is `state.log`.
pub fn save_resumable<T: Scalar>(policy: &Model<T>, state: &ResumeState<T>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode(policy, &state.log, Some(state))?)
}

fn read_block<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
        .collect()
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let corrupt = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let rest = body.get(16..).ok_or_else(|| corrupt("truncated"))?;
    if rest.len() < header_len {
        return Err(corrupt("truncated header"));
    }
    let (json, blocks) = rest.split_at(header_len);
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.scalar != T::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, requested {}",
            header.scalar,
            T::NAME
        )));
    }
    let n = header.num_params;
    let expected = 8 * n * if header.resume.is_some() { 3 } else { 1 };
    if blocks.len() != expected {
        return Err(corrupt("parameter block has the wrong size"));
    }
    let model = Model::from_parts(header.architecture, header.seed, read_block(&blocks[..8 * n]))?;
    let resume = header.resume.map(|o| {
        let mut opt = AdamW::new(0, o.weight_decay)
            .from_moments(read_block(&blocks[8 * n..16 * n]), read_block(&blocks[16 * n..]));
        opt.t = o.t;
        opt.beta1 = o.beta1;
        opt.beta2 = o.beta2;
        opt.eps = o.eps;
        ResumeState {
            step: o.step,
            optimizer: opt,
            best_accuracy: o.best_accuracy,
            log: header.log.clone(),
        }
    });
    Ok(Checkpoint {
        model,
        log: header.log,
        resume,
    })
}

pub fn load_full<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, TrainLog)> {
    let c = load_full(path)?;
    Ok((c.model, c.log))
}

/// Like [`load_checkpoint`], but fails unless the stored architecture equals
/// `expected`.
pub fn load_checkpoint_for<T: Scalar>(
    path: impl AsRef<Path>,
    expected: &Architecture,
) -> Result<(Model<T>, TrainLog)> {
    let (model, log) = load_checkpoint(path)?;
    if model.architecture() != expected {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: file has {:?}, expected {:?}",
            model.architecture(),
            expected
        )));
    }
    Ok((model, log))
}
