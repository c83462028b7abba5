//! PCKPT checkpoints.
//!
//! Layout (little-endian): `"PCKPT"`, `u16` version, `u32` length + UTF-8 JSON
//! of the [`RunConfig`], `u32` parameter count, then per parameter `u16`
//! name length, name, `u8` rank, `u32` dims. After the table: `u64` optimizer
//! step, `u64` prototype-bank update count `t`, `u32 C`, `u32 D`, two RNG
//! states (`[u8; 32]` seed, `u64` stream, `u128` word position; noise then
//! batch). The f32 payload follows: each parameter's values, first moments and
//! second moments, then `P^g` as `C·D` values. The file must end exactly there.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::atomic_write;
use crate::decoder::PrototypeBank;
use crate::error::{Error, Result};
use crate::model::{OccModel, Trainer};
use crate::nn::ParamStore;
use crate::optim::OptimizerState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PCKPT";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub optimizer: OptimizerState<f32>,
    pub bank: PrototypeBank<f32>,
    /// Noise and batch RNGs.
    pub rngs: [RngState; 2],
}

impl Checkpoint {
    /// Snapshot a model, with its trainer when there is one (a fresh trainer
    /// state is stored otherwise).
    pub fn capture(config: &RunConfig, model: &OccModel<f32>, trainer: Option<&Trainer<f32>>) -> Result<Self> {
        let fresh;
        let trainer = match trainer {
            Some(t) => t,
            None => {
                fresh = Trainer::new(config.train.clone(), model)?;
                &fresh
            }
        };
        Ok(Self {
            config: config.clone(),
            params: model.params.clone(),
            optimizer: trainer.optimizer.clone(),
            bank: model.bank.clone(),
            rngs: [RngState::capture(&trainer.noise_rng), RngState::capture(&trainer.batch_rng)],
        })
    }

    /// Rebuild the model; every stored tensor must match the architecture
    /// the stored configuration describes.
    pub fn model(&self) -> Result<OccModel<f32>> {
        let mut model = OccModel::new(self.config.model_config(), self.config.model.seed)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, architecture has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, t) in self.params.iter() {
            model.params.assign(name, t.clone())?;
        }
        if model.bank.global.shape() != self.bank.global.shape() {
            return Err(Error::Shape("prototype bank does not match the architecture".into()));
        }
        model.bank = self.bank.clone();
        Ok(model)
    }

    /// Trainer positioned exactly where the checkpointed run stopped.
    pub fn trainer(&self, model: &OccModel<f32>) -> Result<Trainer<f32>> {
        let mut t = Trainer::new(self.config.train.clone(), model)?;
        t.optimizer = self.optimizer.clone();
        t.noise_rng = self.rngs[0].restore();
        t.batch_rng = self.rngs[1].restore();
        Ok(t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        put_u32(&mut buf, json.len())?;
        buf.extend_from_slice(&json);
        put_u32(&mut buf, self.params.len())?;
        for (name, t) in self.params.iter() {
            let n = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("parameter name too long: {name}")))?;
            buf.extend_from_slice(&n.to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(t.ndim() as u8);
            for &d in t.shape() {
                put_u32(&mut buf, d)?;
            }
        }
        buf.extend_from_slice(&self.optimizer.step.to_le_bytes());
        buf.extend_from_slice(&self.bank.updates.to_le_bytes());
        let [c, d] = [self.bank.global.shape()[0], self.bank.global.shape()[1]];
        put_u32(&mut buf, c)?;
        put_u32(&mut buf, d)?;
        for r in &self.rngs {
            buf.extend_from_slice(&r.seed);
            buf.extend_from_slice(&r.stream.to_le_bytes());
            buf.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        for (i, (_, t)) in self.params.iter().enumerate() {
            for src in [t, &self.optimizer.m[i], &self.optimizer.v[i]] {
                src.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            }
        }
        self.bank.global.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        Ok(buf)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        decode_inner(bytes).map_err(|reason| Error::corrupt(path, reason))
    }

    /// Atomic: a crash mid-write leaves any previous file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {} (needed {n} more)", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn tensor(&mut self, shape: &[usize]) -> std::result::Result<Tensor<f32>, String> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or("tensor too large")?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let json_len = r.u32()?;
    let config: RunConfig = serde_json::from_slice(r.take(json_len)?).map_err(|e| format!("config: {e}"))?;
    config.validate().map_err(|e| e.to_string())?;
    let count = r.u32()?;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| "parameter name is not UTF-8")?.to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        table.push((name, shape));
    }
    let step = r.u64()?;
    let updates = r.u64()?;
    let (c, d) = (r.u32()?, r.u32()?);
    let mut rngs = Vec::with_capacity(2);
    for _ in 0..2 {
        let seed = r.array()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        rngs.push(RngState { seed, stream, word_pos });
    }
    let mut params = ParamStore::new();
    let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
    for (name, shape) in &table {
        if params.find(name).is_some() {
            return Err(format!("duplicate parameter {name}"));
        }
        params.add(name.clone(), r.tensor(shape)?);
        m.push(r.tensor(shape)?);
        v.push(r.tensor(shape)?);
    }
    let global = r.tensor(&[c, d])?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let optimizer = OptimizerState { config: config.train.optimizer.clone(), step, m, v };
    let bank = PrototypeBank { global, alpha: config.model.ema_alpha, updates };
    let rngs = [rngs[0].clone(), rngs[1].clone()];
    Ok(Checkpoint { config, params, optimizer, bank, rngs })
}
