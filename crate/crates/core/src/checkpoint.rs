//! Versioned binary checkpoints.
//!
//! Layout: 8 magic bytes, a little-endian `u32` version, a `u32` block
//! count, the blocks, and a SHA-256 digest of everything before it. A block
//! is a length-prefixed UTF-8 name, a kind byte and a length-prefixed
//! payload. Tensors carry their element width and shape; all numbers are
//! little-endian IEEE-754 or unsigned integers.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::memory::{LayerMemory, MemoryState};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::training::{OptimizerState, Pending, TrainSchedule, Trainer};

pub const MAGIC: [u8; 8] = *b"CMPRSTF\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Text(String),
    /// Raw little-endian elements of `width` bytes.
    Tensor { width: u8, shape: Vec<u64>, data: Vec<u8> },
    Words(Vec<u64>),
    Reals(Vec<f64>),
}

impl Block {
    fn kind(&self) -> u8 {
        match self {
            Block::Text(_) => 0,
            Block::Tensor { .. } => 1,
            Block::Words(_) => 2,
            Block::Reals(_) => 3,
        }
    }

    pub fn tensor<T: Scalar>(t: &Tensor<T>) -> Block {
        let mut data = Vec::with_capacity(t.len() * T::WIDTH);
        for &v in t.data() {
            v.write_le(&mut data);
        }
        Block::Tensor {
            width: T::WIDTH as u8,
            shape: t.shape().iter().map(|&d| d as u64).collect(),
            data,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        let mut payload = Vec::new();
        match self {
            Block::Text(s) => payload.extend_from_slice(s.as_bytes()),
            Block::Tensor { width, shape, data } => {
                payload.push(*width);
                payload.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                for d in shape {
                    payload.extend_from_slice(&d.to_le_bytes());
                }
                payload.extend_from_slice(data);
            }
            Block::Words(w) => w.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            Block::Reals(r) => r.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
        }
        out.push(self.kind());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}

fn decode_block(kind: u8, payload: &[u8]) -> Result<Block> {
    let words = |p: &[u8]| -> Result<Vec<[u8; 8]>> {
        if p.len() % 8 != 0 {
            return Err(Error::Checkpoint("misaligned numeric block".into()));
        }
        Ok(p.chunks_exact(8).map(|c| c.try_into().expect("8 bytes")).collect())
    };
    Ok(match kind {
        0 => Block::Text(
            String::from_utf8(payload.to_vec()).map_err(|_| Error::Checkpoint("text block is not UTF-8".into()))?,
        ),
        1 => {
            let mut r = Reader { bytes: payload, at: 0 };
            let width = r.u8()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
            let data = payload[r.at..].to_vec();
            let count: u64 = shape.iter().product();
            if !matches!(width, 4 | 8) || count.checked_mul(width as u64) != Some(data.len() as u64) {
                return Err(Error::Checkpoint("tensor block size does not match its shape".into()));
            }
            Block::Tensor { width, shape, data }
        }
        2 => Block::Words(words(payload)?.into_iter().map(u64::from_le_bytes).collect()),
        3 => Block::Reals(words(payload)?.into_iter().map(f64::from_le_bytes).collect()),
        k => return Err(Error::Checkpoint(format!("unknown block kind {k}"))),
    })
}

/// An ordered list of named blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub blocks: Vec<(String, Block)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, block: Block) {
        self.blocks.push((name.into(), block));
    }

    pub fn get(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::Checkpoint(format!("missing block {name:?}")))
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name)? {
            Block::Text(s) => Ok(s),
            _ => Err(Error::Checkpoint(format!("block {name:?} is not text"))),
        }
    }

    pub fn words(&self, name: &str) -> Result<&[u64]> {
        match self.get(name)? {
            Block::Words(w) => Ok(w),
            _ => Err(Error::Checkpoint(format!("block {name:?} is not integers"))),
        }
    }

    pub fn reals(&self, name: &str) -> Result<&[f64]> {
        match self.get(name)? {
            Block::Reals(r) => Ok(r),
            _ => Err(Error::Checkpoint(format!("block {name:?} is not reals"))),
        }
    }

    /// Decodes a tensor block into `T`, converting between widths.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let Block::Tensor { width, shape, data } = self.get(name)? else {
            return Err(Error::Checkpoint(format!("block {name:?} is not a tensor")));
        };
        let values: Vec<T> = match width {
            4 => data.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
            _ => data.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
        };
        Tensor::new(shape.iter().map(|&d| d as usize).collect::<Vec<_>>(), values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, block) in &self.blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            block.encode(&mut out);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        let mut r = Reader {
            bytes: body,
            at: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::default();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
            let kind = r.u8()?;
            let len = r.len()?;
            let block = decode_block(kind, r.take(len)?)?;
            ckpt.blocks.push((name, block));
        }
        if r.at != body.len() {
            return Err(Error::Checkpoint("trailing bytes after the last block".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

/// Everything needed to rebuild a trainer besides tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerEcho {
    pub seed: u64,
    pub rows: usize,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
}

fn push_store<T: Scalar>(c: &mut Checkpoint, prefix: &str, store: &ParamStore<T>) {
    for p in store.iter() {
        c.push(format!("{prefix}/{}", p.name), Block::tensor(&p.value));
    }
}

/// Gradients accumulated by micro-steps that have not been applied yet.
fn push_grads<T: Scalar>(c: &mut Checkpoint, prefix: &str, store: &ParamStore<T>) {
    for p in store.iter() {
        c.push(format!("{prefix}.grad/{}", p.name), Block::tensor(&p.grad));
    }
}

fn load_grads<T: Scalar>(c: &Checkpoint, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
    for p in store.iter_mut() {
        let g: Tensor<T> = c.tensor(&format!("{prefix}.grad/{}", p.name))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!("{prefix}.grad/{} has shape {:?}", p.name, g.shape())));
        }
        p.grad = g;
    }
    Ok(())
}

fn push_opt(c: &mut Checkpoint, prefix: &str, store_names: &[String], opt: &OptimizerState) {
    c.push(format!("{prefix}/updates"), Block::Words(vec![opt.updates]));
    for (name, (m, v)) in store_names.iter().zip(opt.first.iter().zip(&opt.second)) {
        c.push(format!("{prefix}/first/{name}"), Block::tensor(m));
        c.push(format!("{prefix}/second/{name}"), Block::tensor(v));
    }
}

fn names<T: Scalar>(store: &ParamStore<T>) -> Vec<String> {
    store.iter().map(|p| p.name.clone()).collect()
}

/// Serializes a trainer: configuration echo, counters, parameters, both
/// optimizers and every carried memory.
pub fn trainer_checkpoint<T: Scalar>(trainer: &Trainer<T>) -> Result<Checkpoint> {
    let mut c = Checkpoint::default();
    let echo = TrainerEcho {
        seed: trainer.seed,
        rows: trainer.rows(),
        model: trainer.model.config().clone(),
        schedule: trainer.schedule,
    };
    let text = toml::to_string(&echo).map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    c.push("config", Block::Text(text));
    let p = trainer.pending;
    c.push(
        "counters",
        Block::Words(vec![trainer.step, p.micro_steps, p.tokens, u64::from(trainer.train_compression)]),
    );
    c.push("pending_losses", Block::Reals(vec![p.task_nats, p.aux]));
    push_store(&mut c, "transformer", trainer.model.params());
    push_store(&mut c, "compression", trainer.model.compressor().params());
    push_grads(&mut c, "transformer", trainer.model.params());
    push_grads(&mut c, "compression", trainer.model.compressor().params());
    push_opt(&mut c, "adam.transformer", &names(trainer.model.params()), &trainer.transformer_opt);
    push_opt(
        &mut c,
        "adam.compression",
        &names(trainer.model.compressor().params()),
        &trainer.compression_opt,
    );
    for (row, state) in trainer.memories.iter().enumerate() {
        for (i, layer) in state.layers.iter().enumerate() {
            let at = format!("memory/{row}/layer{i}");
            c.push(format!("{at}/mem"), Block::tensor(&layer.mem));
            c.push(format!("{at}/cmem"), Block::tensor(&layer.cmem));
            c.push(format!("{at}/usage"), Block::Reals(layer.usage.clone()));
            c.push(
                format!("{at}/fill"),
                Block::Words(vec![layer.mem_fill as u64, layer.cmem_fill as u64]),
            );
        }
    }
    Ok(c)
}

pub fn read_echo(c: &Checkpoint) -> Result<TrainerEcho> {
    toml::from_str(c.text("config")?).map_err(|e| Error::Checkpoint(format!("config echo: {e}")))
}

fn load_store<T: Scalar>(c: &Checkpoint, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
    for p in store.iter_mut() {
        let t: Tensor<T> = c.tensor(&format!("{prefix}/{}", p.name))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{prefix}/{} has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    Ok(())
}

fn load_opt(c: &Checkpoint, prefix: &str, store_names: &[String], opt: &mut OptimizerState) -> Result<()> {
    opt.updates = *c
        .words(&format!("{prefix}/updates"))?
        .first()
        .ok_or_else(|| Error::Checkpoint(format!("{prefix}/updates is empty")))?;
    for (i, name) in store_names.iter().enumerate() {
        opt.first[i] = c.tensor(&format!("{prefix}/first/{name}"))?;
        opt.second[i] = c.tensor(&format!("{prefix}/second/{name}"))?;
    }
    Ok(())
}

/// Builds just the model stored in a checkpoint.
pub fn model_from_checkpoint<T: Scalar>(c: &Checkpoint) -> Result<Model<T>> {
    let echo = read_echo(c)?;
    let mut model = Model::new(echo.model, echo.seed)?;
    load_store(c, "transformer", model.params_mut())?;
    load_store(c, "compression", model.compressor_mut().params_mut())?;
    Ok(model)
}

pub fn restore_trainer<T: Scalar>(c: &Checkpoint) -> Result<Trainer<T>> {
    let echo = read_echo(c)?;
    let model = model_from_checkpoint(c)?;
    let mut t = Trainer::new(model, echo.schedule, echo.rows, echo.seed)?;
    let counters = c.words("counters")?;
    let losses = c.reals("pending_losses")?;
    if counters.len() != 4 || losses.len() != 2 {
        return Err(Error::Checkpoint("malformed trainer counters".into()));
    }
    t.step = counters[0];
    t.pending = Pending {
        micro_steps: counters[1],
        tokens: counters[2],
        task_nats: losses[0],
        aux: losses[1],
    };
    t.train_compression = counters[3] != 0;
    load_grads(c, "transformer", t.model.params_mut())?;
    load_grads(c, "compression", t.model.compressor_mut().params_mut())?;
    let main_names = names(t.model.params());
    let comp_names = names(t.model.compressor().params());
    load_opt(c, "adam.transformer", &main_names, &mut t.transformer_opt)?;
    load_opt(c, "adam.compression", &comp_names, &mut t.compression_opt)?;
    if !t.transformer_opt.matches(t.model.params()) || !t.compression_opt.matches(t.model.compressor().params()) {
        return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
    }
    for row in 0..echo.rows {
        let state = &mut t.memories[row];
        for (i, layer) in state.layers.iter_mut().enumerate() {
            let at = format!("memory/{row}/layer{i}");
            let fill = c.words(&format!("{at}/fill"))?;
            if fill.len() != 2 {
                return Err(Error::Checkpoint(format!("{at}/fill is malformed")));
            }
            *layer = LayerMemory {
                mem: c.tensor(&format!("{at}/mem"))?,
                cmem: c.tensor(&format!("{at}/cmem"))?,
                usage: c.reals(&format!("{at}/usage"))?.to_vec(),
                mem_fill: fill[0] as usize,
                cmem_fill: fill[1] as usize,
            };
        }
        check_state(state)?;
    }
    Ok(t)
}

fn check_state<T: Scalar>(state: &MemoryState<T>) -> Result<()> {
    state
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored memory is inconsistent: {e}")))
}
