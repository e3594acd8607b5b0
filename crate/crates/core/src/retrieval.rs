//! Exact cosine top-k search and the leave-one-out evaluation protocol.
//!
//! Rankings are by cosine similarity, highest first (equivalently cosine
//! distance ascending). Ties go to the ascending id, then to the archive row.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;

use crate::data::{BitemporalSample, CAPTIONS_PER_PAIR};
use crate::error::{Error, Result};
use crate::heads::cosine_similarity;
use crate::model::Model;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;
use crate::Float;

/// One archived row: the pair it belongs to and, for text rows, the caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveItem {
    pub id: String,
    pub caption: Option<String>,
}

/// Immutable feature matrix with one [`ArchiveItem`] per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalArchive {
    items: Vec<ArchiveItem>,
    features: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub row: usize,
    pub id: String,
    pub caption: Option<String>,
    pub score: Float,
}

fn nonzero_row(row: &[Float]) -> bool {
    row.iter().any(|&v| v != 0.0)
}

impl RetrievalArchive {
    /// Rejects zero-norm rows, naming the offending id.
    pub fn new(items: Vec<ArchiveItem>, features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != items.len() {
            return Err(Error::shape("build_archive", features.shape(), &[items.len()]));
        }
        for (i, item) in items.iter().enumerate() {
            if !nonzero_row(features.row(i)) {
                return Err(Error::Domain(format!("archive feature for `{}` has zero norm", item.id)));
            }
        }
        Ok(RetrievalArchive { items, features })
    }

    /// Projected image-pair features, one row per pair.
    pub fn images(model: &Model, pairs: &[BitemporalSample]) -> Result<Self> {
        let refs: Vec<&BitemporalSample> = pairs.iter().collect();
        let features = model.image_features(&refs)?;
        let items = pairs
            .iter()
            .map(|p| ArchiveItem {
                id: p.id.clone(),
                caption: None,
            })
            .collect();
        Self::new(items, features)
    }

    /// Projected caption features, one row per caption of every pair.
    pub fn captions(model: &Model, pairs: &[BitemporalSample]) -> Result<Self> {
        let caps: Vec<_> = pairs.iter().flat_map(|p| p.captions.iter()).collect();
        let features = model.text_features(&caps)?;
        let items = pairs
            .iter()
            .flat_map(|p| {
                p.captions.iter().map(|c| ArchiveItem {
                    id: p.id.clone(),
                    caption: Some(c.text.clone()),
                })
            })
            .collect();
        Self::new(items, features)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ArchiveItem] {
        &self.items
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// The top `k` rows by cosine similarity to `q`; `k > N` returns all.
    pub fn query_topk(&self, q: &[Float], k: usize) -> Result<Vec<Hit>> {
        self.query_topk_where(q, k, |_| true)
    }

    /// [`Self::query_topk`] restricted to rows accepted by `keep`.
    pub fn query_topk_where(&self, q: &[Float], k: usize, keep: impl Fn(usize) -> bool) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.items.is_empty() {
            return Err(Error::State("retrieval archive is empty".into()));
        }
        if q.len() != self.features.cols() {
            return Err(Error::shape("query_topk", &[q.len()], self.features.shape()));
        }
        if !nonzero_row(q) {
            return Err(Error::Domain("query feature has zero norm".into()));
        }
        let mut scored = Vec::with_capacity(self.items.len());
        for row in 0..self.items.len() {
            if keep(row) {
                scored.push((row, cosine_similarity(q, self.features.row(row))?));
            }
        }
        let cmp = |a: &(usize, Float), b: &(usize, Float)| -> Ordering {
            b.1.total_cmp(&a.1)
                .then_with(|| self.items[a.0].id.cmp(&self.items[b.0].id))
                .then(a.0.cmp(&b.0))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(row, score)| Hit {
                row,
                id: self.items[row].id.clone(),
                caption: self.items[row].caption.clone(),
                score,
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    /// Sentence query against the bitemporal-image archive.
    TextToImage,
    /// Image-pair query against the caption archive.
    ImageToText,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::TextToImage, Task::ImageToText];

    pub fn name(self) -> &'static str {
        match self {
            Task::TextToImage => "t2i",
            Task::ImageToText => "i2t",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (expected t2i or i2t)")))
    }
}

/// Query-set filter. The archive is never filtered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    Full,
    Change,
    NoChange,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Full, Scope::Change, Scope::NoChange];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Full => "full",
            Scope::Change => "change",
            Scope::NoChange => "no_change",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s || (s == "no-change" && *t == Scope::NoChange))
            .ok_or_else(|| Error::Config(format!("unknown scope `{s}` (expected full, change or no_change)")))
    }

    pub fn admits(self, change: bool) -> bool {
        match self {
            Scope::Full => true,
            Scope::Change => change,
            Scope::NoChange => !change,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub rounds: usize,
    pub k: usize,
    pub seed: u64,
    /// Put every caption of every other pair in the text archive instead of
    /// only the caption sampled for that round.
    pub all_captions: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            rounds: 5,
            k: 5,
            seed: 0,
            all_captions: false,
        }
    }
}

/// Projected features for every pair and every caption of an eval set.
#[derive(Debug, Clone)]
pub struct EvalFeatures {
    /// `[N x D]`
    pub images: Tensor,
    /// `[5N x D]`, captions of pair `i` at rows `5i..5i+5`.
    pub texts: Tensor,
}

impl EvalFeatures {
    pub fn compute(model: &Model, pairs: &[BitemporalSample]) -> Result<Self> {
        let refs: Vec<&BitemporalSample> = pairs.iter().collect();
        let caps: Vec<_> = pairs.iter().flat_map(|p| p.captions.iter()).collect();
        Ok(EvalFeatures {
            images: model.image_features(&refs)?,
            texts: model.text_features(&caps)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub id: String,
    pub caption: Option<String>,
    pub score: Float,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub round: usize,
    pub query_id: String,
    /// The sampled caption for text queries.
    pub query_caption: Option<String>,
    pub archive_size: usize,
    pub retrieved: Vec<Retrieved>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub task: Task,
    pub scope: Scope,
    pub options: EvalOptions,
    pub results: Vec<QueryResult>,
}

/// The caption slot chosen for every pair in `round`.
pub fn sample_caption_slots(n_pairs: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, Purpose::CaptionSampling, round as u64);
    (0..n_pairs).map(|_| r.random_range(0..CAPTIONS_PER_PAIR)).collect()
}

/// Leave-one-out retrieval: each in-scope pair queries an archive built from
/// all other pairs, for `rounds` independent caption samplings.
pub fn leave_one_out_eval(
    features: &EvalFeatures,
    pairs: &[BitemporalSample],
    task: Task,
    scope: Scope,
    options: EvalOptions,
) -> Result<EvalRun> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Config(format!("leave-one-out needs at least 2 pairs, got {n}")));
    }
    if options.k == 0 || options.rounds == 0 {
        return Err(Error::Config("k and rounds must be at least 1".into()));
    }
    if features.images.rows() != n || features.texts.rows() != n * CAPTIONS_PER_PAIR {
        return Err(Error::shape("leave_one_out_eval", features.images.shape(), &[n]));
    }
    let image_items: Vec<ArchiveItem> = pairs
        .iter()
        .map(|p| ArchiveItem {
            id: p.id.clone(),
            caption: None,
        })
        .collect();
    let image_archive = RetrievalArchive::new(image_items, features.images.clone())?;
    let mut results = Vec::new();
    for round in 0..options.rounds {
        let slots = sample_caption_slots(n, options.seed, round);
        let text_archive = if options.all_captions {
            let items = pairs
                .iter()
                .flat_map(|p| {
                    p.captions.iter().map(|c| ArchiveItem {
                        id: p.id.clone(),
                        caption: Some(c.text.clone()),
                    })
                })
                .collect();
            RetrievalArchive::new(items, features.texts.clone())?
        } else {
            let d = features.texts.cols();
            let mut rows = Vec::with_capacity(n * d);
            let mut items = Vec::with_capacity(n);
            for (i, p) in pairs.iter().enumerate() {
                rows.extend_from_slice(features.texts.row(i * CAPTIONS_PER_PAIR + slots[i]));
                items.push(ArchiveItem {
                    id: p.id.clone(),
                    caption: Some(p.captions[slots[i]].text.clone()),
                });
            }
            RetrievalArchive::new(items, Tensor::new(&[n, d], rows)?)?
        };
        let per_pair = text_archive.len() / n;
        for (i, p) in pairs.iter().enumerate() {
            if !scope.admits(p.change) {
                continue;
            }
            let (archive, per, query, caption) = match task {
                Task::TextToImage => (
                    &image_archive,
                    1,
                    features.texts.row(i * CAPTIONS_PER_PAIR + slots[i]),
                    Some(p.captions[slots[i]].text.clone()),
                ),
                Task::ImageToText => (&text_archive, per_pair, features.images.row(i), None),
            };
            let hits = archive.query_topk_where(query, options.k, |row| row / per != i)?;
            results.push(QueryResult {
                round,
                query_id: p.id.clone(),
                query_caption: caption,
                archive_size: archive.len() - per,
                retrieved: hits
                    .into_iter()
                    .map(|h| Retrieved {
                        id: h.id,
                        caption: h.caption,
                        score: h.score,
                    })
                    .collect(),
            });
        }
    }
    Ok(EvalRun {
        task,
        scope,
        options,
        results,
    })
}

/// Fraction of queries whose true partner appears in the top `k`, for both
/// directions over the whole set (no leave-one-out). Text queries use every
/// caption; image queries search all captions and hit on any of their own.
pub fn recall_at_k(features: &EvalFeatures, pairs: &[BitemporalSample], k: usize) -> Result<(f64, f64)> {
    let n = pairs.len();
    if n == 0 {
        return Err(Error::Config("recall needs at least one pair".into()));
    }
    let image_items = pairs
        .iter()
        .map(|p| ArchiveItem {
            id: p.id.clone(),
            caption: None,
        })
        .collect();
    let images = RetrievalArchive::new(image_items, features.images.clone())?;
    let text_items = pairs
        .iter()
        .flat_map(|p| {
            (0..CAPTIONS_PER_PAIR).map(|_| ArchiveItem {
                id: p.id.clone(),
                caption: None,
            })
        })
        .collect();
    let texts = RetrievalArchive::new(text_items, features.texts.clone())?;
    let mut t2i = 0usize;
    for row in 0..n * CAPTIONS_PER_PAIR {
        let hits = images.query_topk(features.texts.row(row), k)?;
        if hits.iter().any(|h| h.row == row / CAPTIONS_PER_PAIR) {
            t2i += 1;
        }
    }
    let mut i2t = 0usize;
    for i in 0..n {
        let hits = texts.query_topk(features.images.row(i), k)?;
        if hits.iter().any(|h| h.row / CAPTIONS_PER_PAIR == i) {
            i2t += 1;
        }
    }
    Ok((t2i as f64 / (n * CAPTIONS_PER_PAIR) as f64, i2t as f64 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform;
    use alloc::vec;

    fn archive(n: usize, d: usize, seed: u64) -> RetrievalArchive {
        let mut r = rng::stream(seed, Purpose::Init, 0);
        let items = (0..n)
            .map(|i| ArchiveItem {
                id: format!("id{i:04}"),
                caption: None,
            })
            .collect();
        RetrievalArchive::new(items, Tensor::from_fn(&[n, d], |_| uniform(&mut r, -1.0, 1.0))).unwrap()
    }

    #[test]
    fn full_ranking_and_self_match() {
        let a = archive(12, 6, 1);
        let hits = a.query_topk(a.features().row(4), 12).unwrap();
        assert_eq!(hits[0].id, "id0004");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        let mut ids: Vec<_> = hits.iter().map(|h| h.row).collect();
        ids.sort();
        assert_eq!(ids, (0..12).collect::<Vec<_>>());
        assert_eq!(a.query_topk(a.features().row(0), 100).unwrap().len(), 12);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let items = ["c", "a", "b"]
            .iter()
            .map(|s| ArchiveItem {
                id: (*s).into(),
                caption: None,
            })
            .collect();
        let feats = Tensor::from_rows(&[&[1.0, 0.0], &[2.0, 0.0], &[0.5, 0.0]]).unwrap();
        let a = RetrievalArchive::new(items, feats).unwrap();
        let ids: Vec<_> = a.query_topk(&[1.0, 0.0], 3).unwrap().into_iter().map(|h| h.id).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
    }

    #[test]
    fn guards() {
        let a = archive(3, 2, 0);
        assert!(matches!(a.query_topk(&[1.0, 0.0], 0), Err(Error::Config(_))));
        assert!(matches!(a.query_topk(&[0.0, 0.0], 1), Err(Error::Domain(_))));
        let empty = RetrievalArchive::new(vec![], Tensor::zeros(&[1, 2]));
        assert!(empty.is_err());
        let zero = RetrievalArchive::new(
            vec![ArchiveItem {
                id: "z".into(),
                caption: None,
            }],
            Tensor::zeros(&[1, 2]),
        );
        assert!(format!("{}", zero.unwrap_err()).contains("`z`"));
    }

    #[test]
    fn caption_sampling_is_seeded() {
        assert_eq!(sample_caption_slots(20, 3, 0), sample_caption_slots(20, 3, 0));
        assert_ne!(sample_caption_slots(20, 3, 0), sample_caption_slots(20, 3, 1));
        assert!(sample_caption_slots(50, 1, 2).iter().all(|&s| s < 5));
    }
}
