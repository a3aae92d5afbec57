//! Binary checkpoints: metadata, parameters, Adam moments and the batch RNG
//! position, enough to resume a run exactly.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::binfmt::{Reader, Writer};
use crate::error::{Error, Result};
use crate::eval::Head;
use crate::model::{Parameters, SpeechModel, SpeechModelConfig, VisionProjection};
use crate::numerics::{Precision, Real};
use crate::optim::{Adam, BlockState};

pub const CKPT_MAGIC: &[u8; 8] = b"VGKWCKPT";
pub const CKPT_VERSION: u32 = 1;
pub const BEST_FILE: &str = "best.ckpt";
pub const LAST_FILE: &str = "last.ckpt";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub precision: Precision,
    pub model: SpeechModelConfig,
    pub train: TrainConfig,
    /// Word ids of the visual head's outputs.
    pub vis_vocab: Vec<usize>,
    /// Word ids of the bag-of-words head's outputs.
    pub bow_vocab: Vec<usize>,
    /// Heads that received gradient during training.
    pub trained_heads: Vec<Head>,
    pub stop_head: Head,
    pub step: u64,
    pub best_step: u64,
    pub best_f1: Option<f64>,
    pub evals_since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub meta: CheckpointMeta,
    pub model: SpeechModel<F>,
    pub projection: VisionProjection<F>,
    pub adam: Option<Adam<F>>,
    pub rng: Option<RngState>,
}

fn write_params<F: Real, P: Parameters<F>>(w: &mut Writer, p: &P) {
    let mut blocks = Vec::new();
    p.visit(&mut |_, name, t| blocks.push((name.to_string(), t.to_f64_vec())));
    w.u64(blocks.len() as u64);
    for (name, data) in blocks {
        w.str(&name);
        w.u64(data.len() as u64);
        w.f64s(&data);
    }
}

fn read_params<F: Real, P: Parameters<F>>(r: &mut Reader<'_>, p: &mut P) -> Result<()> {
    let n = r.u64()? as usize;
    let mut blocks = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = r.str()?;
        let len = r.u64()? as usize;
        blocks.push((name, r.f64s(len)?));
    }
    let mut i = 0;
    let mut err = None;
    p.visit_mut(&mut |_, name, t| {
        if err.is_some() {
            return;
        }
        match blocks.get(i) {
            Some((n, data)) if n == name && data.len() == t.len() => {
                for (x, &v) in t.data_mut().iter_mut().zip(data) {
                    *x = F::of(v);
                }
            }
            _ => err = Some(format!("checkpoint: parameter block {name} missing or misshapen")),
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(Error::Format(e));
    }
    if i != blocks.len() {
        return Err(Error::Format(format!("checkpoint: {} parameter blocks, model has {i}", blocks.len())));
    }
    Ok(())
}

pub fn encode_checkpoint<F: Real>(ckpt: &Checkpoint<F>) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.str(&serde_json::to_string(&ckpt.meta)?);
    write_params(&mut w, &ckpt.model);
    write_params(&mut w, &ckpt.projection);
    match &ckpt.adam {
        Some(adam) => {
            w.u8(1);
            w.str(&serde_json::to_string(&adam.config)?);
            w.u64(adam.blocks.len() as u64);
            for b in &adam.blocks {
                w.str(&b.name);
                w.u64(b.step);
                w.u64(b.m.len() as u64);
                w.f64s(&b.m.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
                w.f64s(&b.v.iter().map(|x| x.as_f64()).collect::<Vec<_>>());
            }
        }
        None => w.u8(0),
    }
    match &ckpt.rng {
        Some(s) => {
            w.u8(1);
            w.raw(&s.seed);
            w.u64(s.stream);
            w.u128(s.word_pos);
        }
        None => w.u8(0),
    }
    Ok(w.seal(CKPT_MAGIC, CKPT_VERSION))
}

pub fn decode_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let mut r = Reader::open(bytes, CKPT_MAGIC, CKPT_VERSION, "checkpoint")?;
    Ok(serde_json::from_str(&r.str()?)?)
}

/// Decodes a checkpoint into precision `F`, whatever precision it was written in.
pub fn decode_checkpoint<F: Real>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader::open(bytes, CKPT_MAGIC, CKPT_VERSION, "checkpoint")?;
    let meta: CheckpointMeta = serde_json::from_str(&r.str()?)?;
    let mut model = SpeechModel::<F>::init(&meta.model, 0)?;
    read_params(&mut r, &mut model)?;
    let mut projection = VisionProjection::<F>::init(&meta.model, 0)?;
    read_params(&mut r, &mut projection)?;
    let adam = if r.u8()? == 1 {
        let config = serde_json::from_str(&r.str()?)?;
        let n = r.u64()? as usize;
        let mut blocks = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.str()?;
            let step = r.u64()?;
            let len = r.u64()? as usize;
            let m = r.f64s(len)?.into_iter().map(F::of).collect();
            let v = r.f64s(len)?.into_iter().map(F::of).collect();
            blocks.push(BlockState { name, step, m, v });
        }
        Some(Adam { config, blocks })
    } else {
        None
    };
    let rng = if r.u8()? == 1 {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.raw(32)?);
        Some(RngState {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        })
    } else {
        None
    };
    if !r.at_end() {
        return Err(Error::Format("checkpoint: trailing bytes".into()));
    }
    Ok(Checkpoint {
        meta,
        model,
        projection,
        adam,
        rng,
    })
}

pub fn save_checkpoint<F: Real>(ckpt: &Checkpoint<F>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn load_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_meta(&bytes)
}
