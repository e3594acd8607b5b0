//! Caption-overlap metrics and retrieval scoring.
//!
//! All scores are computed in `f64` over token sequences produced by
//! [`crate::data::tokenize`].

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float as _;

use crate::data::{tokenize, BitemporalSample};
use crate::error::{Error, Result};
use crate::retrieval::{EvalRun, Scope, Task};

pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU with uniform weights over orders `1..=n`.
///
/// Clipped n-gram precisions; an order `>= 2` with no match contributes
/// `1 / (total + 1)` instead of zero; the brevity penalty uses the reference
/// length closest to the hypothesis (shorter on ties).
pub fn bleu_n(hypothesis: &[String], references: &[Vec<String>], n: usize) -> f64 {
    if hypothesis.is_empty() || references.is_empty() || n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let hyp = ngram_counts(hypothesis, order);
        let total = hypothesis.len().saturating_sub(order - 1);
        let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, order) {
                let slot = max_ref.entry(g).or_insert(0);
                *slot = (*slot).max(c);
            }
        }
        let matched: usize = hyp.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if order == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let c = hypothesis.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(c);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / n as f64).exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F-measure (`beta = 1.2`), best over references.
pub fn rouge_l(hypothesis: &[String], references: &[Vec<String>]) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let l = lcs(hypothesis, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (rec, prec) = (l / r.len() as f64, l / hypothesis.len() as f64);
            (1.0 + b2) * rec * prec / (rec + b2 * prec)
        })
        .fold(0.0, f64::max)
}

/// Groups of interchangeable words for METEOR matching. Words outside any
/// group only match themselves.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTable {
    class: BTreeMap<String, usize>,
    groups: usize,
}

impl SynonymTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one group; a word already in a group joins that group instead.
    pub fn add_group(&mut self, words: &[&str]) {
        let existing = words.iter().find_map(|w| self.class.get(*w).copied());
        let id = existing.unwrap_or_else(|| {
            self.groups += 1;
            self.groups - 1
        });
        for w in words {
            self.class.insert(String::from(*w), id);
        }
    }

    fn key(&self, word: &str) -> Result<usize, String> {
        self.class.get(word).copied().ok_or_else(|| String::from(word))
    }
}

/// Upper bound on alignments explored per reference before settling for
/// the best found so far.
const METEOR_SEARCH_LIMIT: usize = 200_000;

struct Aligner<'a> {
    hyp: &'a [Result<usize, String>],
    refs: &'a [Result<usize, String>],
    used: Vec<bool>,
    chosen: Vec<Option<usize>>,
    best: Option<(usize, usize)>,
    target: usize,
    visited: usize,
}

impl Aligner<'_> {
    fn chunks(&self) -> usize {
        let mut chunks = 0;
        let mut prev: Option<(usize, usize)> = None;
        for (i, r) in self.chosen.iter().enumerate() {
            let Some(j) = *r else { continue };
            match prev {
                Some((pi, pj)) if pi + 1 == i && pj + 1 == j => {}
                _ => chunks += 1,
            }
            prev = Some((i, j));
        }
        chunks
    }

    fn remaining_hyp(&self, from: usize, key: &Result<usize, String>) -> usize {
        self.hyp[from..].iter().filter(|k| *k == key).count()
    }

    fn free_refs(&self, key: &Result<usize, String>) -> usize {
        self.refs.iter().zip(&self.used).filter(|(k, u)| *k == key && !**u).count()
    }

    fn search(&mut self, pos: usize, matched: usize) {
        if self.visited >= METEOR_SEARCH_LIMIT && self.best.is_some() {
            return;
        }
        if pos == self.hyp.len() {
            self.visited += 1;
            if matched == self.target {
                let c = self.chunks();
                if self.best.is_none_or(|(_, bc)| c < bc) {
                    self.best = Some((matched, c));
                }
            }
            return;
        }
        let key = &self.hyp[pos];
        for j in 0..self.refs.len() {
            if !self.used[j] && self.refs[j] == *key {
                self.used[j] = true;
                self.chosen[pos] = Some(j);
                self.search(pos + 1, matched + 1);
                self.chosen[pos] = None;
                self.used[j] = false;
            }
        }
        // Leaving this word unaligned only keeps the maximum reachable when
        // later occurrences can still use every free reference slot.
        if self.remaining_hyp(pos + 1, key) >= self.free_refs(key) {
            self.search(pos + 1, matched);
        }
    }
}

fn max_matches(hyp: &[Result<usize, String>], refs: &[Result<usize, String>]) -> usize {
    let mut counts: BTreeMap<&Result<usize, String>, (usize, usize)> = BTreeMap::new();
    for k in hyp {
        counts.entry(k).or_default().0 += 1;
    }
    for k in refs {
        counts.entry(k).or_default().1 += 1;
    }
    counts.values().map(|(a, b)| *a.min(b)).sum()
}

fn meteor_single(hyp: &[Result<usize, String>], reference: &[Result<usize, String>]) -> f64 {
    let target = max_matches(hyp, reference);
    if target == 0 {
        return 0.0;
    }
    let mut aligner = Aligner {
        hyp,
        refs: reference,
        used: vec![false; reference.len()],
        chosen: vec![None; hyp.len()],
        best: None,
        target,
        visited: 0,
    };
    aligner.search(0, 0);
    let (m, chunks) = aligner.best.expect("a maximal alignment always exists");
    let m = m as f64;
    let p = m / hyp.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

/// METEOR with unigram matching (exact, or through `synonyms`), best over
/// references.
pub fn meteor(hypothesis: &[String], references: &[Vec<String>], synonyms: Option<&SynonymTable>) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let empty = SynonymTable::new();
    let table = synonyms.unwrap_or(&empty);
    let keys = |ws: &[String]| ws.iter().map(|w| table.key(w)).collect::<Vec<_>>();
    let h = keys(hypothesis);
    references
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| meteor_single(&h, &keys(r)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricScores {
    pub bleu1: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

impl MetricScores {
    pub fn compute(hyp: &[String], refs: &[Vec<String>], synonyms: Option<&SynonymTable>) -> Self {
        MetricScores {
            bleu1: bleu_n(hyp, refs, 1),
            bleu4: bleu_n(hyp, refs, 4),
            meteor: meteor(hyp, refs, synonyms),
            rouge_l: rouge_l(hyp, refs),
        }
    }

    fn add(&mut self, o: &MetricScores) {
        self.bleu1 += o.bleu1;
        self.bleu4 += o.bleu4;
        self.meteor += o.meteor;
        self.rouge_l += o.rouge_l;
    }

    fn scaled(&self, f: f64) -> Self {
        MetricScores {
            bleu1: self.bleu1 * f,
            bleu4: self.bleu4 * f,
            meteor: self.meteor * f,
            rouge_l: self.rouge_l * f,
        }
    }

    /// Arithmetic mean; summation follows the given order.
    pub fn mean(items: &[MetricScores]) -> Option<MetricScores> {
        if items.is_empty() {
            return None;
        }
        let mut acc = MetricScores::default();
        for s in items {
            acc.add(s);
        }
        Some(acc.scaled(1.0 / items.len() as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Queries that returned nothing and were left out of the means.
    pub empty_queries: usize,
    pub queries_per_round: Vec<usize>,
}

/// Scores of one `(task, scope)` evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScores {
    pub task: Task,
    pub scope: Scope,
    pub rounds: usize,
    pub k: usize,
    /// Mean over rounds; `None` when the scope had no queries.
    pub mean: Option<MetricScores>,
    pub per_round: Vec<Option<MetricScores>>,
    pub diagnostics: Diagnostics,
}

fn tokens_of(text: &str) -> Vec<String> {
    tokenize(text)
}

/// Per query: mean metric over the top-`k` retrieved items; then mean over
/// queries, then over rounds. Per-query values are sorted before summing so
/// the result does not depend on query order.
pub fn score_retrieval(run: &EvalRun, pairs: &[BitemporalSample], k: usize, synonyms: Option<&SynonymTable>) -> Result<TaskScores> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let by_id: BTreeMap<&str, &BitemporalSample> = pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let captions_of = |id: &str| -> Result<Vec<Vec<String>>> {
        let p = by_id.get(id).ok_or_else(|| Error::Lookup(String::from(id)))?;
        Ok(p.captions.iter().map(|c| c.words.clone()).collect())
    };
    let rounds = run.options.rounds;
    let mut per_round_queries: Vec<Vec<MetricScores>> = vec![Vec::new(); rounds];
    let mut diagnostics = Diagnostics {
        empty_queries: 0,
        queries_per_round: vec![0; rounds],
    };
    for q in &run.results {
        if q.round >= rounds {
            return Err(Error::Contract("result round exceeds the configured rounds".into()));
        }
        diagnostics.queries_per_round[q.round] += 1;
        let top = &q.retrieved[..q.retrieved.len().min(k)];
        if top.is_empty() {
            diagnostics.empty_queries += 1;
            continue;
        }
        let mut item_scores = Vec::with_capacity(top.len());
        match run.task {
            Task::TextToImage => {
                let hyp = tokens_of(q.query_caption.as_deref().ok_or_else(|| Error::Contract("text query without caption".into()))?);
                for item in top {
                    item_scores.push(MetricScores::compute(&hyp, &captions_of(&item.id)?, synonyms));
                }
            }
            Task::ImageToText => {
                let refs = captions_of(&q.query_id)?;
                for item in top {
                    let hyp = tokens_of(item.caption.as_deref().ok_or_else(|| Error::Contract("text hit without caption".into()))?);
                    item_scores.push(MetricScores::compute(&hyp, &refs, synonyms));
                }
            }
        }
        per_round_queries[q.round].push(MetricScores::mean(&item_scores).expect("non-empty"));
    }
    let per_round: Vec<Option<MetricScores>> = per_round_queries
        .iter_mut()
        .map(|qs| {
            sort_scores(qs);
            MetricScores::mean(qs)
        })
        .collect();
    let present: Vec<MetricScores> = per_round.iter().flatten().copied().collect();
    Ok(TaskScores {
        task: run.task,
        scope: run.scope,
        rounds,
        k,
        mean: MetricScores::mean(&present),
        per_round,
        diagnostics,
    })
}

fn sort_scores(items: &mut [MetricScores]) {
    items.sort_by(|a, b| {
        a.bleu1
            .total_cmp(&b.bleu1)
            .then(a.bleu4.total_cmp(&b.bleu4))
            .then(a.meteor.total_cmp(&b.meteor))
            .then(a.rouge_l.total_cmp(&b.rouge_l))
    });
}

/// Every `(task, scope)` score plus the per-scope average of the two tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub entries: Vec<TaskScores>,
}

impl ScoreReport {
    pub fn get(&self, task: Task, scope: Scope) -> Option<&TaskScores> {
        self.entries.iter().find(|e| e.task == task && e.scope == scope)
    }

    /// Mean of the text-to-image and image-to-text scores for `scope`.
    pub fn cross_task_average(&self, scope: Scope) -> Option<MetricScores> {
        let a = self.get(Task::TextToImage, scope)?.mean?;
        let b = self.get(Task::ImageToText, scope)?.mean?;
        MetricScores::mean(&[a, b])
    }
}
