//! The `TSRC` checkpoint container.
//!
//! ```text
//! "TSRC" | version u16 | count u32 | count * record
//! record = name_len u32 | utf-8 name | ndim u32 | dims u32 * ndim | f32 * prod(dims)
//! ```
//!
//! Parameters and batch-norm buffers use their store names, optimizer
//! velocities are `velocity.<name>`, and configuration lives in `meta.*`
//! records whose payload words are raw `u32` bit patterns.

use std::collections::BTreeMap;
use std::path::Path;

use itsr_core::fusion::{FusionStrategy, TffConfig};
use itsr_core::model::{Model, ModelConfig};
use itsr_core::optim::Sgd;
use itsr_core::train::TrainState;
use itsr_core::{Float, Tensor};

use crate::error::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"TSRC";
pub const VERSION: u16 = 1;

const META_MODEL: &str = "meta.model";
const META_TRAIN: &str = "meta.train";
const VELOCITY: &str = "velocity.";

/// Training bookkeeping stored next to the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub train_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
struct Record {
    name: String,
    dims: Vec<u32>,
    words: Vec<u32>,
}

fn tensor_record(name: String, t: &Tensor) -> Record {
    Record {
        name,
        dims: t.shape().iter().map(|&d| d as u32).collect(),
        words: t.data().iter().map(|&v| (v as f32).to_bits()).collect(),
    }
}

fn record_tensor(r: &Record) -> itsr_core::Result<Tensor> {
    let shape: Vec<usize> = r.dims.iter().map(|&d| d as usize).collect();
    Tensor::new(&shape, r.words.iter().map(|&w| f32::from_bits(w) as Float).collect())
}

fn split_u64(v: u64) -> [u32; 2] {
    [v as u32, (v >> 32) as u32]
}

fn join_u64(lo: u32, hi: u32) -> u64 {
    lo as u64 | ((hi as u64) << 32)
}

fn model_words(c: &ModelConfig) -> Vec<u32> {
    let [lo, hi] = split_u64(c.seed);
    vec![
        c.strategy.code(),
        c.image_dim as u32,
        c.text_dim as u32,
        c.vocab as u32,
        c.tff.heads as u32,
        c.tff.head_dim as u32,
        c.tff.stages as u32,
        c.tff.ffn_hidden as u32,
        c.tff.kernel as u32,
        (c.tff.dropout as f32).to_bits(),
        c.head_hidden as u32,
        c.head_out as u32,
        c.clip_style_kappa as u32,
        c.train_text_encoder as u32,
        lo,
        hi,
    ]
}

fn model_config(w: &[u32]) -> itsr_core::Result<ModelConfig> {
    if w.len() != 16 {
        return Err(itsr_core::Error::Contract(format!("model metadata has {} words, expected 16", w.len())));
    }
    Ok(ModelConfig {
        strategy: FusionStrategy::from_code(w[0])?,
        image_dim: w[1] as usize,
        text_dim: w[2] as usize,
        vocab: w[3] as usize,
        tff: TffConfig {
            heads: w[4] as usize,
            head_dim: w[5] as usize,
            stages: w[6] as usize,
            ffn_hidden: w[7] as usize,
            kernel: w[8] as usize,
            dropout: f32::from_bits(w[9]) as Float,
        },
        head_hidden: w[10] as usize,
        head_out: w[11] as usize,
        clip_style_kappa: w[12] != 0,
        train_text_encoder: w[13] != 0,
        seed: join_u64(w[14], w[15]),
    })
}

fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
        for d in &r.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for w in &r.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.at)),
        }
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn decode(bytes: &[u8]) -> Result<Vec<Record>, String> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4)? != MAGIC {
        return Err("not a TSRC checkpoint (bad magic)".into());
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = c.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|e| format!("record name: {e}"))?.to_string();
        let ndim = c.u32()? as usize;
        let dims = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let n = n.ok_or_else(|| format!("record `{name}` is too large"))?;
        if n.checked_mul(4).is_none_or(|b| b > bytes.len()) {
            return Err(format!("record `{name}` claims {n} values, file is too short"));
        }
        let words = (0..n).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
        out.push(Record { name, dims, words });
    }
    if c.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - c.at));
    }
    Ok(out)
}

/// Serializes weights, buffers, optimizer velocities and metadata.
pub fn to_bytes(state: &TrainState, train_seed: u64) -> Vec<u8> {
    let model = &state.model;
    let [lo, hi] = split_u64(train_seed);
    let mut records = vec![
        Record {
            name: META_MODEL.into(),
            dims: vec![16],
            words: model_words(&model.config),
        },
        Record {
            name: META_TRAIN.into(),
            dims: vec![3],
            words: vec![state.epoch as u32, lo, hi],
        },
    ];
    for (name, t) in model.named_tensors() {
        records.push(tensor_record(name.to_string(), t));
    }
    for ((_, p), v) in model.params.iter().zip(state.optimizer.buffers()) {
        if let Some(v) = v {
            records.push(tensor_record(format!("{VELOCITY}{}", p.name), v));
        }
    }
    encode(&records)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(TrainState, CheckpointMeta), String> {
    let records = decode(bytes)?;
    let mut by_name: BTreeMap<&str, &Record> = BTreeMap::new();
    for r in &records {
        if by_name.insert(r.name.as_str(), r).is_some() {
            return Err(format!("duplicate record `{}`", r.name));
        }
    }
    let meta_model = by_name.remove(META_MODEL).ok_or("missing model metadata")?;
    let meta_train = by_name.remove(META_TRAIN).ok_or("missing training metadata")?;
    if meta_train.words.len() != 3 {
        return Err("malformed training metadata".into());
    }
    let config = model_config(&meta_model.words).map_err(|e| e.to_string())?;
    let mut model = Model::new(config).map_err(|e| e.to_string())?;
    let names: Vec<String> = model.named_tensors().iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        let r = by_name.remove(name.as_str()).ok_or_else(|| format!("missing tensor `{name}`"))?;
        let t = record_tensor(r).map_err(|e| e.to_string())?;
        model.assign(name, t).map_err(|e| e.to_string())?;
    }
    let mut velocity = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        let v = match by_name.remove(format!("{VELOCITY}{}", p.name).as_str()) {
            Some(r) => {
                let t = record_tensor(r).map_err(|e| e.to_string())?;
                if t.shape() != p.value.shape() {
                    return Err(format!("velocity of `{}` has shape {:?}", p.name, t.shape()));
                }
                Some(t)
            }
            None => None,
        };
        velocity.push(v);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(format!("unexpected record `{extra}`"));
    }
    let mut optimizer = Sgd::new();
    if velocity.iter().any(Option::is_some) {
        optimizer.set_buffers(velocity);
    }
    let meta = CheckpointMeta {
        epoch: meta_train.words[0] as usize,
        train_seed: join_u64(meta_train.words[1], meta_train.words[2]),
    };
    Ok((
        TrainState {
            model,
            optimizer,
            epoch: meta.epoch,
        },
        meta,
    ))
}

pub fn save(path: &Path, state: &TrainState, train_seed: u64) -> CliResult<()> {
    std::fs::write(path, to_bytes(state, train_seed)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<(TrainState, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    from_bytes(&bytes).map_err(|msg| CliError::format(path, msg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use itsr_core::data::BitemporalSample;
    use itsr_core::synth::{generate_synthetic_dataset, SynthConfig};
    use itsr_core::train::{train_epoch, TrainConfig};

    fn setup(strategy: FusionStrategy) -> (TrainState, Vec<BitemporalSample>, TrainConfig) {
        let pairs: Vec<_> = generate_synthetic_dataset(6, SynthConfig { embed_dim: 8, grid: 6, patch: 2, ..SynthConfig::default() }, 3)
            .unwrap()
            .into_iter()
            .map(|p| p.sample)
            .collect();
        let mut mc = ModelConfig::new(strategy, 8, 4);
        mc.head_hidden = 16;
        mc.head_out = 8;
        let cfg = TrainConfig { batch_size: 8, epochs: 3, seed: 9, ..TrainConfig::default() };
        (TrainState::new(Model::new(mc).unwrap()), pairs, cfg)
    }

    fn tensors(state: &TrainState) -> Vec<(String, Tensor)> {
        state.model.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        for strategy in FusionStrategy::ALL {
            let (mut state, pairs, cfg) = setup(strategy);
            train_epoch(&mut state, &cfg, &pairs).unwrap();
            let bytes = to_bytes(&state, 9);
            let (back, meta) = from_bytes(&bytes).unwrap();
            assert_eq!(meta, CheckpointMeta { epoch: 1, train_seed: 9 });
            assert_eq!(back.model.config, state.model.config);
            assert_eq!(tensors(&back), tensors(&state));
            assert_eq!(back.optimizer.buffers(), state.optimizer.buffers());
            assert_eq!(to_bytes(&back, 9), bytes);
        }
    }

    #[test]
    fn resuming_reproduces_the_next_epoch() {
        let (mut straight, pairs, cfg) = setup(FusionStrategy::Tff);
        train_epoch(&mut straight, &cfg, &pairs).unwrap();
        let (mut resumed, _) = from_bytes(&to_bytes(&straight, 9)).unwrap();
        let a = train_epoch(&mut straight, &cfg, &pairs).unwrap();
        let b = train_epoch(&mut resumed, &cfg, &pairs).unwrap();
        assert_eq!(a, b);
        assert_eq!(tensors(&straight), tensors(&resumed));
    }

    #[test]
    fn corrupt_or_mismatched_files_are_rejected() {
        let (state, _, _) = setup(FusionStrategy::GffSubtract);
        let bytes = to_bytes(&state, 1);
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(from_bytes(&trailing).unwrap_err().contains("trailing"));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(from_bytes(&magic).unwrap_err().contains("magic"));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(from_bytes(&version).unwrap_err().contains("version"));

        // A weight matrix with one extra row.
        let mut records = decode(&bytes).unwrap();
        let target = records.iter_mut().find(|r| !r.name.starts_with("meta.") && r.dims.len() == 2).unwrap();
        let wide = Tensor::zeros(&[target.dims[0] as usize + 1, target.dims[1] as usize]);
        *target = tensor_record(target.name.clone(), &wide);
        assert!(from_bytes(&encode(&records)).is_err());

        let mut missing = decode(&bytes).unwrap();
        missing.retain(|r| r.name != "kappa");
        assert!(from_bytes(&encode(&missing)).unwrap_err().contains("kappa"));
        let mut extra = decode(&bytes).unwrap();
        extra.push(tensor_record("stray".into(), &Tensor::zeros(&[1])));
        assert!(from_bytes(&encode(&extra)).unwrap_err().contains("stray"));
    }
}
