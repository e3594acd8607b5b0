//! Desk-scale synthetic bitemporal dataset.
//!
//! Each pair shows the same random background twice; the second date either
//! gains a coloured block, loses one, or is left untouched. Captions come
//! from five paraphrase templates per edit kind. Images are encoded with the
//! toy image encoder, so the resulting samples carry patch embeddings and
//! class-token features like a real precomputed dataset would.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::{BitemporalSample, TextSample, CAPTIONS_PER_PAIR};
use crate::encoders::{ToyImageEncoder, PROJECTION_GAIN};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;
use crate::Float;

pub const REGIONS: [&str; 9] = [
    "north west",
    "north",
    "north east",
    "west",
    "center",
    "east",
    "south west",
    "south",
    "south east",
];

pub const COLORS: [(&str, [Float; 3]); 4] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
];

const APPEAR: [&str; 5] = [
    "a {color} block appears in the {region}",
    "a new {color} block is built in the {region}",
    "a {color} block has been added to the {region}",
    "the {region} now contains a {color} block",
    "there is a new {color} block in the {region} of the scene",
];

const DISAPPEAR: [&str; 5] = [
    "a {color} block disappears from the {region}",
    "the {color} block in the {region} is removed",
    "a {color} block has been taken away from the {region}",
    "the {region} no longer contains a {color} block",
    "there is no longer a {color} block in the {region} of the scene",
];

const UNCHANGED: [&str; 5] = [
    "the scene is unchanged",
    "there is no change",
    "nothing has changed in the scene",
    "the two images look the same",
    "no difference can be seen between the images",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edit {
    Appear { color: usize, region: usize },
    Disappear { color: usize, region: usize },
    NoChange,
}

impl Edit {
    /// Every distinct edit: no-change first, then appear/disappear for each
    /// colour and region.
    pub fn universe() -> Vec<Edit> {
        let mut all = alloc::vec![Edit::NoChange];
        for color in 0..COLORS.len() {
            for region in 0..REGIONS.len() {
                all.push(Edit::Appear { color, region });
                all.push(Edit::Disappear { color, region });
            }
        }
        all
    }

    pub fn is_change(self) -> bool {
        self != Edit::NoChange
    }

    /// The same block edit in the opposite temporal direction.
    pub fn reversed(self) -> Edit {
        match self {
            Edit::Appear { color, region } => Edit::Disappear { color, region },
            Edit::Disappear { color, region } => Edit::Appear { color, region },
            Edit::NoChange => Edit::NoChange,
        }
    }

    pub fn captions(self) -> Vec<String> {
        let (templates, color, region) = match self {
            Edit::Appear { color, region } => (&APPEAR, COLORS[color].0, REGIONS[region]),
            Edit::Disappear { color, region } => (&DISAPPEAR, COLORS[color].0, REGIONS[region]),
            Edit::NoChange => (&UNCHANGED, "", ""),
        };
        templates
            .iter()
            .map(|t| t.replace("{color}", color).replace("{region}", region))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    /// Image side in pixels; must split into a 3 x 3 region grid and into patches.
    pub grid: usize,
    pub patch: usize,
    pub embed_dim: usize,
    /// Background pixels are uniform in `[0, background)`.
    pub background: Float,
    /// Toy image encoder projection gain.
    pub gain: Float,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: 12,
            patch: 4,
            embed_dim: 32,
            background: 0.5,
            gain: PROJECTION_GAIN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub edit: Edit,
    pub image_t1: Tensor,
    pub image_t2: Tensor,
    pub sample: BitemporalSample,
}

pub fn pair_id(i: usize) -> String {
    format!("pair{i:05}")
}

fn paint_block(image: &mut Tensor, grid: usize, color: usize, region: usize) {
    let cell = grid / 3;
    let inset = cell / 4;
    let (top, left) = ((region / 3) * cell + inset, (region % 3) * cell + inset);
    let side = cell - 2 * inset;
    let rgb = COLORS[color].1;
    let data = image.data_mut();
    for (c, &v) in rgb.iter().enumerate() {
        for y in top..top + side {
            for x in left..left + side {
                data[(c * grid + y) * grid + x] = v;
            }
        }
    }
}

/// Generates `n_pairs` pairs. Edits cycle through a seeded permutation of
/// [`Edit::universe`], so small datasets have pairwise distinct semantics.
pub fn generate_synthetic_dataset(n_pairs: usize, config: SynthConfig, seed: u64) -> Result<Vec<SyntheticPair>> {
    if n_pairs < 2 {
        return Err(Error::Config(format!("need at least 2 pairs, got {n_pairs}")));
    }
    let SynthConfig { grid, patch, embed_dim, .. } = config;
    if grid == 0 || grid % 3 != 0 || grid / 3 < 2 || patch == 0 || grid % patch != 0 {
        return Err(Error::Config(format!(
            "grid {grid} must be a multiple of 3 (at least 6) and of the patch size {patch}"
        )));
    }
    if !(config.background >= 0.0 && config.background <= 1.0) {
        return Err(Error::Config(format!("background level must be in [0, 1], got {}", config.background)));
    }
    let encoder = ToyImageEncoder::with_gain(3, patch, embed_dim, seed, config.gain)?;
    let universe = Edit::universe();
    let mut edits = Vec::with_capacity(n_pairs);
    let mut cycle = 0u64;
    while edits.len() < n_pairs {
        let mut order = universe.clone();
        rng::shuffle(&mut rng::stream(seed, Purpose::Synth, cycle), &mut order);
        edits.extend(order);
        cycle += 1;
    }
    edits.truncate(n_pairs);

    let mut out = Vec::with_capacity(n_pairs);
    for (i, edit) in edits.into_iter().enumerate() {
        let mut r = rng::stream(seed, Purpose::Synth, 1_000_000 + i as u64);
        let background = Tensor::from_fn(&[3, grid, grid], |_| r.random::<Float>() * config.background);
        let mut with_block = background.clone();
        let (image_t1, image_t2) = match edit {
            Edit::Appear { color, region } => {
                paint_block(&mut with_block, grid, color, region);
                (background, with_block)
            }
            Edit::Disappear { color, region } => {
                paint_block(&mut with_block, grid, color, region);
                (with_block, background)
            }
            Edit::NoChange => (background, with_block),
        };
        let (cls_t1, emb_t1) = encoder.encode(&image_t1)?;
        let (cls_t2, emb_t2) = encoder.encode(&image_t2)?;
        let captions = edit
            .captions()
            .iter()
            .map(|c| TextSample::new(c))
            .collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(captions.len(), CAPTIONS_PER_PAIR);
        let sample = BitemporalSample::new(pair_id(i), emb_t1, emb_t2, cls_t1, cls_t2, captions, edit.is_change())?;
        out.push(SyntheticPair {
            edit,
            image_t1,
            image_t2,
            sample,
        });
    }
    Ok(out)
}

/// The pair with its two dates exchanged.
pub fn swap_dates(sample: &BitemporalSample) -> BitemporalSample {
    BitemporalSample {
        id: sample.id.clone(),
        emb_t1: sample.emb_t2.clone(),
        emb_t2: sample.emb_t1.clone(),
        cls_t1: sample.cls_t2.clone(),
        cls_t2: sample.cls_t1.clone(),
        captions: sample.captions.clone(),
        change: sample.change,
    }
}
