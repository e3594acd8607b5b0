//! Deterministic stand-in encoders.
//!
//! These are test substrates, not semantic models: the image encoder is a
//! frozen random patch projection and the text encoder a hashed embedding
//! table. Both add sinusoidal position offsets. Their class-token outputs
//! average `tanh` of the token rows, which keeps positional information in
//! the global feature (a plain mean of linear tokens would cancel it).

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float as _;

use crate::error::{Error, Result};
use crate::params::{ParamStore, ParamKind};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;
use crate::Float;

/// Sinusoidal offset for token `pos`, channel `j` of a `dim`-wide embedding.
pub fn position_offset(pos: usize, j: usize, dim: usize) -> Float {
    let pair = (j / 2) as Float;
    let angle = pos as Float / (10000.0 as Float).powf(2.0 * pair / dim as Float);
    if j.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

pub fn position_offsets(tokens: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[tokens, dim], |i| position_offset(i / dim, i % dim, dim))
}

fn mean_tanh_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    Tensor::from_fn(&[c], |j| (0..r).map(|i| t.at(i, j).tanh()).sum::<Float>() / r as Float)
}

/// Scale of the random projection relative to `1 / sqrt(fan_in)`. Large
/// enough that the `tanh` in the class token responds to single-patch edits
/// instead of being dominated by the position offsets.
pub const PROJECTION_GAIN: Float = 16.0;

/// Frozen random patch projection.
#[derive(Debug, Clone)]
pub struct ToyImageEncoder {
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    projection: Tensor,
}

impl ToyImageEncoder {
    pub fn new(channels: usize, patch: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::with_gain(channels, patch, dim, seed, PROJECTION_GAIN)
    }

    /// Projection entries uniform in `+-gain / sqrt(channels * patch^2)`.
    pub fn with_gain(channels: usize, patch: usize, dim: usize, seed: u64, gain: Float) -> Result<Self> {
        if channels == 0 || patch == 0 || dim == 0 {
            return Err(Error::Config("image encoder extents must be positive".into()));
        }
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::Config(format!("projection gain must be positive, got {gain}")));
        }
        let fan_in = channels * patch * patch;
        let bound = gain / (fan_in as Float).sqrt();
        let mut rng = rng::stream(seed, Purpose::Encoder, 0);
        let projection = Tensor::from_fn(&[fan_in, dim], |_| rng::uniform(&mut rng, -bound, bound));
        Ok(ToyImageEncoder {
            channels,
            patch,
            dim,
            projection,
        })
    }

    /// Encodes a `[c x h x w]` image into `(cls [dim], patches [T x dim])`
    /// with `T = (h / patch) * (w / patch)`, patches in row-major order.
    pub fn encode(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != self.channels {
            return Err(Error::shape("toy_image_encoder", s, &[self.channels]));
        }
        let (h, w, p) = (s[1], s[2], self.patch);
        if h % p != 0 || w % p != 0 {
            return Err(Error::shape("toy_image_encoder", s, &[p, p]));
        }
        let (gh, gw) = (h / p, w / p);
        let tokens = gh * gw;
        let fan_in = self.channels * p * p;
        let px = image.data();
        let mut patches = position_offsets(tokens, self.dim);
        let proj = self.projection.data();
        let out = patches.data_mut();
        let mut flat = Vec::with_capacity(fan_in);
        for t in 0..tokens {
            let (py, pxo) = ((t / gw) * p, (t % gw) * p);
            flat.clear();
            for c in 0..self.channels {
                for y in 0..p {
                    for x in 0..p {
                        flat.push(px[(c * h + py + y) * w + pxo + x]);
                    }
                }
            }
            let row = &mut out[t * self.dim..(t + 1) * self.dim];
            for (f, &v) in flat.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                for (o, pv) in row.iter_mut().zip(&proj[f * self.dim..(f + 1) * self.dim]) {
                    *o += v * pv;
                }
            }
        }
        Ok((mean_tanh_rows(&patches), patches))
    }
}

/// Convenience wrapper: builds the encoder and encodes one image.
pub fn toy_image_encoder(image: &Tensor, patch: usize, dim: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let channels = image.shape().first().copied().unwrap_or(0);
    ToyImageEncoder::new(channels, patch, dim, seed)?.encode(image)
}

/// 64-bit FNV-1a, used only to bucket words.
fn fnv1a(word: &str) -> u64 {
    word.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Hashed-vocabulary text encoder. The table itself lives in the model's
/// parameter store so it can optionally be trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTextEncoder {
    pub vocab: usize,
    pub dim: usize,
}

pub const TEXT_TABLE: &str = "text_encoder.table";

impl ToyTextEncoder {
    pub fn bucket(&self, word: &str) -> usize {
        (fnv1a(word) % self.vocab as u64) as usize
    }

    pub fn buckets(&self, words: &[impl AsRef<str>]) -> Vec<usize> {
        words.iter().map(|w| self.bucket(w.as_ref())).collect()
    }

    /// Seed-determined table with entries in `[-1, 1)`.
    pub fn init_table(&self, seed: u64) -> Tensor {
        let mut rng = rng::stream(seed, Purpose::Encoder, 1);
        Tensor::from_fn(&[self.vocab, self.dim], |_| rng::uniform(&mut rng, -1.0, 1.0))
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        store.add(TEXT_TABLE, self.init_table(seed), ParamKind::Frozen);
    }

    /// Token vectors `tanh(table[bucket(w_i)] + pos_i)` and their mean.
    pub fn encode(&self, table: &Tensor, words: &[impl AsRef<str>]) -> Result<(Tensor, Tensor)> {
        if words.is_empty() {
            return Err(Error::Contract("cannot encode an empty sentence".into()));
        }
        if table.shape() != [self.vocab, self.dim] {
            return Err(Error::shape("toy_text_encoder", table.shape(), &[self.vocab, self.dim]));
        }
        let ids = self.buckets(words);
        let tokens = Tensor::from_fn(&[ids.len(), self.dim], |i| {
            let (t, j) = (i / self.dim, i % self.dim);
            (table.at(ids[t], j) + position_offset(t, j, self.dim)).tanh()
        });
        let r = tokens.rows();
        let cls = Tensor::from_fn(&[self.dim], |j| (0..r).map(|i| tokens.at(i, j)).sum::<Float>() / r as Float);
        Ok((cls, tokens))
    }
}

/// Convenience wrapper over [`ToyTextEncoder`] with a freshly seeded table.
pub fn toy_text_encoder(words: &[impl AsRef<str>], vocab: usize, dim: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let enc = ToyTextEncoder { vocab, dim };
    enc.encode(&enc.init_table(seed), words)
}
