//! Retrieval result export and score reports.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use itsr_core::metrics::{MetricScores, ScoreReport, TaskScores};
use itsr_core::retrieval::EvalRun;

use crate::error::{CliError, CliResult};

#[derive(Serialize)]
struct RetrievedLine<'a> {
    id: &'a str,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    caption: Option<&'a str>,
}

#[derive(Serialize)]
struct ResultLine<'a> {
    round: usize,
    query_id: &'a str,
    task: &'static str,
    scope: &'static str,
    retrieved: Vec<RetrievedLine<'a>>,
}

/// One JSON object per query: `{round, query_id, task, scope, retrieved}`.
pub fn results_jsonl(runs: &[EvalRun]) -> Vec<u8> {
    let mut out = Vec::new();
    for run in runs {
        for q in &run.results {
            let line = ResultLine {
                round: q.round,
                query_id: &q.query_id,
                task: run.task.name(),
                scope: run.scope.name(),
                retrieved: q
                    .retrieved
                    .iter()
                    .map(|r| RetrievedLine {
                        id: &r.id,
                        score: r.score as f64,
                        caption: r.caption.as_deref(),
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut out, &line).expect("serializable");
            out.push(b'\n');
        }
    }
    out
}

#[derive(Serialize)]
struct Metrics {
    bleu1: f64,
    bleu4: f64,
    meteor: f64,
    #[serde(rename = "rougeL")]
    rouge_l: f64,
}

impl From<MetricScores> for Metrics {
    fn from(m: MetricScores) -> Self {
        Metrics {
            bleu1: m.bleu1,
            bleu4: m.bleu4,
            meteor: m.meteor,
            rouge_l: m.rouge_l,
        }
    }
}

#[derive(Serialize)]
struct DiagnosticsDoc<'a> {
    empty_queries: usize,
    queries_per_round: &'a [usize],
    per_round: Vec<Option<Metrics>>,
}

/// Field order is part of the format.
#[derive(Serialize)]
struct Entry<'a> {
    task: &'static str,
    scope: &'static str,
    rounds: usize,
    k: usize,
    bleu1: Option<f64>,
    bleu4: Option<f64>,
    meteor: Option<f64>,
    #[serde(rename = "rougeL")]
    rouge_l: Option<f64>,
    cross_task_average: Option<Metrics>,
    diagnostics: DiagnosticsDoc<'a>,
}

fn entry<'a>(report: &ScoreReport, e: &'a TaskScores) -> Entry<'a> {
    Entry {
        task: e.task.name(),
        scope: e.scope.name(),
        rounds: e.rounds,
        k: e.k,
        bleu1: e.mean.map(|m| m.bleu1),
        bleu4: e.mean.map(|m| m.bleu4),
        meteor: e.mean.map(|m| m.meteor),
        rouge_l: e.mean.map(|m| m.rouge_l),
        cross_task_average: report.cross_task_average(e.scope).map(Metrics::from),
        diagnostics: DiagnosticsDoc {
            empty_queries: e.diagnostics.empty_queries,
            queries_per_round: &e.diagnostics.queries_per_round,
            per_round: e.per_round.iter().map(|r| r.map(Metrics::from)).collect(),
        },
    }
}

/// A JSON array with one object per `(task, scope)`. Scopes without queries
/// report `null` metrics.
pub fn report_json(report: &ScoreReport) -> String {
    let entries: Vec<Entry> = report.entries.iter().map(|e| entry(report, e)).collect();
    let mut s = serde_json::to_string_pretty(&entries).expect("serializable");
    s.push('\n');
    s
}

/// Fixed-width table for the terminal.
pub fn report_table(report: &ScoreReport) -> String {
    let mut s = format!("{:<6} {:<10} {:>8} {:>8} {:>8} {:>8}\n", "task", "scope", "BLEU-1", "BLEU-4", "METEOR", "ROUGE-L");
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    for e in &report.entries {
        let m = e.mean;
        s.push_str(&format!(
            "{:<6} {:<10} {:>8} {:>8} {:>8} {:>8}\n",
            e.task.name(),
            e.scope.name(),
            cell(m.map(|m| m.bleu1)),
            cell(m.map(|m| m.bleu4)),
            cell(m.map(|m| m.meteor)),
            cell(m.map(|m| m.rouge_l)),
        ));
    }
    s
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| CliError::io(path, e))
}
