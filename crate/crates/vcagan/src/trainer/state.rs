//! Full-precision training state for bit-exact resume: parameters, Adam
//! moments, the sampling RNG and the step counter. Distinct from the VCAG
//! model checkpoint, which carries f32 weights for interchange.

use super::{AdamState, TrainConfig, TrainError, Trainer};
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;
use rand_chacha::ChaCha12Rng;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"VCST";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::State(msg.into())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape.len() as u32);
        for &d in &t.shape {
            self.u32(d as u32);
        }
        for &v in &t.data {
            self.f64(v);
        }
    }
    fn tensors(&mut self, ts: &[Tensor]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(bad("truncated state file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<Tensor, TrainError> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Ok(Tensor::new(shape, data))
    }
    fn tensors(&mut self) -> Result<Vec<Tensor>, TrainError> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }
}

fn write_rng(w: &mut Writer, rng: &ChaCha12Rng) {
    w.bytes(&rng.get_seed());
    w.bytes(&rng.get_word_pos().to_le_bytes());
    w.u64(rng.get_stream());
}

fn read_rng(r: &mut Reader) -> Result<ChaCha12Rng, TrainError> {
    use rand::SeedableRng;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let stream = r.u64()?;
    let mut rng = ChaCha12Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(rng)
}

fn write_opt(w: &mut Writer, opt: &AdamState) {
    w.u64(opt.step);
    w.tensors(&opt.m);
    w.tensors(&opt.v);
}

fn read_opt_into(r: &mut Reader, opt: &mut AdamState) -> Result<(), TrainError> {
    opt.step = r.u64()?;
    opt.m = r.tensors()?;
    opt.v = r.tensors()?;
    Ok(())
}

pub fn save_state(path: &Path, trainer: &Trainer) -> Result<(), TrainError> {
    let mut w = Writer { buf: Vec::new() };
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(trainer.step);
    write_rng(&mut w, &trainer.rng);
    // model architecture + parameters at full precision
    let cfg_text = format!("{:?}", trainer.model.config);
    w.u32(cfg_text.len() as u32);
    w.bytes(cfg_text.as_bytes());
    let params: Vec<Tensor> = trainer
        .model
        .params
        .ids()
        .map(|id| trainer.model.params.value(id).clone())
        .collect();
    w.tensors(&params);
    write_opt(&mut w, &trainer.opt_g);
    write_opt(&mut w, &trainer.opt_d);
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&w.buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuild a trainer from `config` and the saved state. The architecture is
/// reconstructed from the config (including the attention ablation flag) and
/// must match the stored parameter shapes.
pub fn load_state(path: &Path, config: &TrainConfig) -> Result<Trainer, TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("missing VCST magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!(
            "unsupported state version {version}, this build reads {VERSION}"
        )));
    }
    let step = r.u64()?;
    let rng = read_rng(&mut r)?;
    let cfg_len = r.u32()? as usize;
    let stored_cfg = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| bad("config is not UTF-8"))?
        .to_string();
    let params = r.tensors()?;

    let mut trainer = Trainer::new(config.clone(), crate::model::ModelConfig::default())?;
    if format!("{:?}", trainer.model.config) != stored_cfg {
        return Err(bad(format!(
            "architecture mismatch: state was written for {stored_cfg}"
        )));
    }
    let ids: Vec<_> = trainer.model.params.ids().collect();
    if ids.len() != params.len() {
        return Err(bad("parameter count mismatch"));
    }
    for (id, t) in ids.into_iter().zip(params) {
        if trainer.model.params.value(id).shape != t.shape {
            return Err(bad(format!(
                "parameter {} shape mismatch",
                trainer.model.params.name(id)
            )));
        }
        *trainer.model.params.value_mut(id) = t;
    }
    read_opt_into(&mut r, &mut trainer.opt_g)?;
    read_opt_into(&mut r, &mut trainer.opt_d)?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    trainer.rng = rng;
    trainer.step = step;
    Ok(trainer)
}

/// Guard used by `load_state`: models are rebuilt from the trainer config, so
/// expose the same constructor path for callers that need it.
pub fn rebuild_model(config: &TrainConfig) -> Result<Model, ModelError> {
    let mut mc = crate::model::ModelConfig::default();
    mc.use_attention = config.use_attention;
    Model::new(mc, config.seed)
}
