//! Samples, manifests and dataset splitting.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float as _;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;
use crate::Float;

pub const CAPTIONS_PER_PAIR: usize = 5;

/// Lowercases, drops punctuation and splits on whitespace.
///
/// Shared by the text encoder and every caption metric so that both see the
/// same token sequence.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len());
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cleaned.extend(ch.to_lowercase());
        } else if ch.is_whitespace() {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(String::from).collect()
}

/// One tokenized sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSample {
    pub text: String,
    pub words: Vec<String>,
}

impl TextSample {
    pub fn new(text: &str) -> Result<Self> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(Error::Contract(format!("caption `{text}` has no tokens")));
        }
        Ok(TextSample {
            text: String::from(text),
            words,
        })
    }
}

/// A co-registered image pair (as encoder features) with its captions.
#[derive(Debug, Clone, PartialEq)]
pub struct BitemporalSample {
    pub id: String,
    /// Patch embeddings `[T x d_E]` at t1 and t2.
    pub emb_t1: Tensor,
    pub emb_t2: Tensor,
    /// Global (class-token) features `[d_E]`.
    pub cls_t1: Tensor,
    pub cls_t2: Tensor,
    pub captions: Vec<TextSample>,
    pub change: bool,
}

impl BitemporalSample {
    pub fn new(
        id: String,
        emb_t1: Tensor,
        emb_t2: Tensor,
        cls_t1: Tensor,
        cls_t2: Tensor,
        captions: Vec<TextSample>,
        change: bool,
    ) -> Result<Self> {
        if emb_t1.shape() != emb_t2.shape() || emb_t1.shape().len() != 2 {
            return Err(Error::shape("bitemporal_sample", emb_t1.shape(), emb_t2.shape()));
        }
        let d = emb_t1.cols();
        if cls_t1.numel() != d || cls_t2.numel() != d {
            return Err(Error::shape("bitemporal_sample", cls_t1.shape(), &[d]));
        }
        if captions.len() != CAPTIONS_PER_PAIR {
            return Err(Error::Contract(format!(
                "pair `{id}` needs exactly 5 captions, got {}",
                captions.len()
            )));
        }
        Ok(BitemporalSample {
            id,
            emb_t1,
            emb_t2,
            cls_t1,
            cls_t2,
            captions,
            change,
        })
    }

    pub fn tokens(&self) -> usize {
        self.emb_t1.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.emb_t1.cols()
    }
}

/// One manifest record; embedding references are opaque paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub captions: Vec<String>,
    pub emb_t1: String,
    pub emb_t2: String,
    /// Optional precomputed global features; derived from the patches when absent.
    pub cls_t1: Option<String>,
    pub cls_t2: Option<String>,
    pub change: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let manifest = DatasetManifest { entries };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = alloc::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Contract(format!("duplicate id `{}`", e.id)));
            }
            if e.captions.len() != CAPTIONS_PER_PAIR {
                return Err(Error::Contract(format!(
                    "entry `{}` must have exactly 5 captions, got {}",
                    e.id,
                    e.captions.len()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const LEVIR_CC: SplitFractions = SplitFractions { train: 0.8, val: 0.1, test: 0.1 };
    pub const DUBAI_CCD: SplitFractions = SplitFractions { train: 0.6, val: 0.1, test: 0.3 };
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle split, then keeps `floor(keep * count)` of the training
/// no-change items (seeded choice, original order preserved).
pub fn split_and_subsample<T: Clone>(
    items: &[T],
    is_change: impl Fn(&T) -> bool,
    fractions: SplitFractions,
    nochange_keep: f64,
    seed: u64,
) -> Result<Splits<T>> {
    let sum = fractions.train + fractions.val + fractions.test;
    if (sum - 1.0).abs() > 1e-9 || [fractions.train, fractions.val, fractions.test].iter().any(|f| *f < 0.0) {
        return Err(Error::Config(format!("split fractions must be non-negative and sum to 1, got {sum}")));
    }
    if !(nochange_keep > 0.0 && nochange_keep <= 1.0) {
        return Err(Error::Config(format!("no-change keep ratio must be in (0, 1], got {nochange_keep}")));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::stream(seed, Purpose::Split, 0), &mut order);
    let n_train = ((fractions.train * n as f64).round() as usize).min(n);
    let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train);

    let mut train: Vec<usize> = order[..n_train].to_vec();
    let val = &order[n_train..n_train + n_val];
    let test = &order[n_train + n_val..];

    if nochange_keep < 1.0 {
        let mut unchanged: Vec<usize> = train.iter().copied().filter(|&i| !is_change(&items[i])).collect();
        let keep = (nochange_keep * unchanged.len() as f64 + 1e-9).floor() as usize;
        rng::shuffle(&mut rng::stream(seed, Purpose::Split, 1), &mut unchanged);
        let dropped: alloc::collections::BTreeSet<usize> = unchanged[keep..].iter().copied().collect();
        train.retain(|i| !dropped.contains(i));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        train: pick(&train),
        val: pick(val),
        test: pick(test),
    })
}

/// Arithmetic mean of the token rows: the global feature used when no
/// precomputed class token is supplied.
pub fn mean_row(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    Tensor::from_fn(&[c], |j| (0..r).map(|i| t.at(i, j)).sum::<Float>() / r as Float)
}
