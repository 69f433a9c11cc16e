//! Checkpoint files.
//!
//! Layout: the 8-byte magic `DIVACKPT`, a `u32` format version and a `u64`
//! header length (all little-endian), then a JSON header, then one
//! little-endian `f64` blob per entry of the header's `tensors` list, in
//! that order. Blobs are named `param/<name>`, `adam.m/<name>`,
//! `adam.v/<name>`, `shadow/<i>` and `queue`.
//!
//! The header carries the full [`TrainConfig`], the epoch counters, the
//! generator state and the history, so a restored [`Trainer`] continues
//! exactly as the uninterrupted run would have.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DivaError, Result};
use crate::model::ModelState;
use crate::queue::MemoryQueue;
use crate::tensor::Tensor;
use crate::trainer::{Adam, TrainConfig, TrainHistory, Trainer};

pub const MAGIC: &[u8; 8] = b"DIVACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueMeta {
    pub capacity: usize,
    pub dim: usize,
    pub cursor: usize,
    pub filled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub rng: ChaCha8Rng,
    pub adam: AdamMeta,
    pub queue: Option<QueueMeta>,
    pub tensors: Vec<BlobEntry>,
    pub history: TrainHistory,
}

fn entries(trainer: &Trainer) -> Vec<(String, &Tensor)> {
    let names = trainer.model.param_names();
    let params = trainer.model.params();
    let mut out: Vec<(String, &Tensor)> = Vec::new();
    for (n, p) in names.iter().zip(&params) {
        out.push((format!("param/{n}"), *p));
    }
    for (n, m) in names.iter().zip(&trainer.optimizer.m) {
        out.push((format!("adam.m/{n}"), m));
    }
    for (n, v) in names.iter().zip(&trainer.optimizer.v) {
        out.push((format!("adam.v/{n}"), v));
    }
    if let Some(shadow) = &trainer.model.shadow {
        for (i, t) in shadow.tensors().into_iter().enumerate() {
            out.push((format!("shadow/{i}"), t));
        }
    }
    out
}

/// Serializes the full training state.
pub fn encode_checkpoint(trainer: &Trainer) -> Result<Vec<u8>> {
    let tensors = entries(trainer);
    let mut blobs: Vec<BlobEntry> =
        tensors.iter().map(|(n, t)| BlobEntry { name: n.clone(), shape: t.shape().to_vec() }).collect();
    let queue = trainer.queue.as_ref().map(|q| {
        blobs.push(BlobEntry { name: "queue".into(), shape: vec![q.capacity(), q.dim()] });
        QueueMeta { capacity: q.capacity(), dim: q.dim(), cursor: q.cursor(), filled: q.fill_count() }
    });
    let opt = &trainer.optimizer;
    let header = CheckpointHeader {
        input_dim: trainer.model.input_dim(),
        embed_dim: trainer.model.embed_dim(),
        config: trainer.config.clone(),
        epoch: trainer.epoch,
        step_in_epoch: trainer.step_in_epoch,
        global_step: trainer.global_step,
        rng: trainer.rng.clone(),
        adam: AdamMeta { beta1: opt.beta1, beta2: opt.beta2, eps: opt.eps, t: opt.t },
        queue,
        tensors: blobs,
        history: trainer.history.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 20);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut push = |data: &[f64]| {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (_, t) in &tensors {
        push(t.data());
    }
    if let Some(q) = &trainer.queue {
        push(q.buffer());
    }
    Ok(buf)
}

fn mismatch(name: &str, expected: &[usize], found: &[usize]) -> DivaError {
    DivaError::Incompatible(format!("blob {name}: expected shape {expected:?}, found {found:?}"))
}

/// Parses a checkpoint and rebuilds the trainer it describes.
pub fn decode_checkpoint(buf: &[u8]) -> Result<Trainer> {
    if buf.len() < 8 {
        return Err(DivaError::format(buf.len() as u64, "truncated magic"));
    }
    if &buf[..8] != MAGIC {
        return Err(DivaError::format(0, "bad magic, not a checkpoint"));
    }
    if buf.len() < 20 {
        return Err(DivaError::format(buf.len() as u64, "truncated preamble"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(DivaError::format(8, format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize;
    if buf.len() - body < hlen {
        return Err(DivaError::format(buf.len() as u64, "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&buf[body..body + hlen])
        .map_err(|e| DivaError::format(body as u64, format!("header: {e}")))?;
    header.config.validate()?;
    if header.embed_dim != header.config.model.embed_dim || header.input_dim != header.config.model.encoder.input_dim {
        return Err(DivaError::Incompatible(format!(
            "header declares input {} / embedding {}, config says {} / {}",
            header.input_dim, header.embed_dim, header.config.model.encoder.input_dim, header.config.model.embed_dim
        )));
    }

    // Fresh state with the right structure; every value is overwritten below.
    let mut scratch = ChaCha8Rng::seed_from_u64(0);
    let mut model = ModelState::new(header.config.model.clone(), &mut scratch)?;
    let mut optimizer = Adam::new(&model.params());
    let mut queue = match &header.queue {
        Some(m) => Some(MemoryQueue::from_parts(m.capacity, m.dim, vec![0.0; m.capacity * m.dim], m.cursor, m.filled)?),
        None => None,
    };
    if queue.is_some() != model.shadow.is_some() {
        return Err(DivaError::Incompatible("queue present without a contrastive head, or vice versa".into()));
    }

    let mut offset = body + hlen;
    let mut blobs = header.tensors.iter();
    let mut read = |expected_name: &str, expected_shape: &[usize]| -> Result<Vec<f64>> {
        let entry = blobs.next().ok_or_else(|| DivaError::Incompatible(format!("missing blob {expected_name}")))?;
        if entry.name != expected_name {
            return Err(DivaError::Incompatible(format!("expected blob {expected_name}, found {}", entry.name)));
        }
        if entry.shape != expected_shape {
            return Err(mismatch(&entry.name, expected_shape, &entry.shape));
        }
        let n: usize = entry.shape.iter().product();
        if buf.len() < offset + 8 * n {
            return Err(DivaError::format(buf.len() as u64, format!("truncated blob {}", entry.name)));
        }
        let data = buf[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * n;
        Ok(data)
    };

    let names = model.param_names();
    for (n, p) in names.iter().zip(model.params_mut()) {
        let shape = p.shape().to_vec();
        *p = Tensor::new(shape.clone(), read(&format!("param/{n}"), &shape)?)?;
    }
    for (prefix, slots) in [("adam.m", &mut optimizer.m), ("adam.v", &mut optimizer.v)] {
        for (n, slot) in names.iter().zip(slots.iter_mut()) {
            let shape = slot.shape().to_vec();
            *slot = Tensor::new(shape.clone(), read(&format!("{prefix}/{n}"), &shape)?)?;
        }
    }
    if let Some(shadow) = &mut model.shadow {
        for (i, t) in shadow.tensors_mut().into_iter().enumerate() {
            let shape = t.shape().to_vec();
            *t = Tensor::new(shape.clone(), read(&format!("shadow/{i}"), &shape)?)?;
        }
    }
    if let Some(q) = &mut queue {
        let (c, d) = (q.capacity(), q.dim());
        if d != model.embed_dim() {
            return Err(mismatch("queue", &[c, model.embed_dim()], &[c, d]));
        }
        let data = read("queue", &[c, d])?;
        *q = MemoryQueue::from_parts(c, d, data, q.cursor(), q.fill_count())?;
    }
    if let Some(extra) = blobs.next() {
        return Err(DivaError::Incompatible(format!("unexpected blob {}", extra.name)));
    }
    if offset != buf.len() {
        return Err(DivaError::format(offset as u64, format!("{} trailing bytes", buf.len() - offset)));
    }
    optimizer.beta1 = header.adam.beta1;
    optimizer.beta2 = header.adam.beta2;
    optimizer.eps = header.adam.eps;
    optimizer.t = header.adam.t;

    Ok(Trainer {
        config: header.config,
        model,
        optimizer,
        queue,
        rng: header.rng,
        epoch: header.epoch,
        step_in_epoch: header.step_in_epoch,
        global_step: header.global_step,
        history: header.history,
    })
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(trainer)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    decode_checkpoint(&fs::read(path)?)
}
