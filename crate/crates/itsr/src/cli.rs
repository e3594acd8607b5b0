//! Subcommands: `synth`, `train`, `evaluate`, `query` and `selfcheck`.
//!
//! Every command resolves a [`RunConfig`] from defaults, an optional
//! `--config` file and its flags (in that order), and every command that
//! writes a directory also writes the resolved `config.txt` into it.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use itsr_core::data::{split_and_subsample, BitemporalSample, ManifestEntry, TextSample};
use itsr_core::metrics::{score_retrieval, ScoreReport};
use itsr_core::model::Model;
use itsr_core::retrieval::{leave_one_out_eval, EvalFeatures, EvalOptions, RetrievalArchive, Scope, Task};
use itsr_core::selfcheck::{self, SelfCheckOptions};
use itsr_core::synth::generate_synthetic_dataset;
use itsr_core::train::{train_epoch, validate, Recall, TrainState};

use crate::checkpoint;
use crate::config::{RunConfig, SplitSpec};
use crate::error::{CliError, CliResult};
use crate::gradref;
use crate::manifest;
use crate::output;
use crate::tsre;

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.tsrc";
pub const BEST_CHECKPOINT: &str = "checkpoint_best.tsrc";
pub const REPORT_FILE: &str = "report.json";
pub const RESULTS_FILE: &str = "results.jsonl";

#[derive(Parser, Debug)]
#[command(name = "itsr", version, about = "Bitemporal image / text retrieval on precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset of encoded image pairs and captions.
    Synth(SynthArgs),
    /// Train a fusion model on a manifest.
    Train(TrainArgs),
    /// Leave-one-out evaluation of a checkpoint for both tasks and all scopes.
    Evaluate(EvaluateArgs),
    /// Rank an archive against a sentence or a stored pair.
    Query(QueryArgs),
    /// Run the gradient, retrieval and metric oracle suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// `key = value` configuration file; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Number of pairs (default 16).
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Generator seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the manifest and embeddings.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Image side in pixels.
    #[arg(long)]
    pub grid: Option<usize>,
    /// Patch side in pixels.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Embedding width d_E.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Dataset manifest (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Run directory for checkpoints, log and resolved config.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Fusion strategy (default tff).
    #[arg(long, value_parser = ["gff-sub", "gff-concat", "tff"])]
    pub fusion: Option<String>,
    /// Attention heads n (or `auto`).
    #[arg(long)]
    pub heads: Option<String>,
    /// Fusion stages l.
    #[arg(long)]
    pub fusion_stages: Option<usize>,
    /// Dropout rate inside the fusion stages (default 0.1).
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Training epochs (default 30).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for initialisation, shuffling, dropout and the split (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pairs per batch (default 32).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// SGD learning rate (default 0.01).
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 weight decay (default 5e-4).
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// SGD momentum (default 0.9).
    #[arg(long)]
    pub momentum: Option<f64>,
    /// `none`, `levir`, `dubai` or `train,val,test` fractions.
    #[arg(long)]
    pub split: Option<String>,
    /// Fraction of no-change training pairs to keep.
    #[arg(long)]
    pub nochange_keep: Option<f64>,
    /// Initialise the temperature at ln(1/0.07) instead of 0.07.
    #[arg(long)]
    pub clip_style_kappa: bool,
    /// Let the toy text encoder table train.
    #[arg(long)]
    pub train_text_encoder: bool,
    /// Continue from the final checkpoint in the output directory.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
    /// Overwrite an existing run in the output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Report directory (defaults to the checkpoint's directory).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Caption-sampling rounds (default 5).
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Retrieved items scored per query (default 5).
    #[arg(long)]
    pub k: Option<usize>,
    /// Caption-sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `all`, `full`, `change` or `no_change`.
    #[arg(long)]
    pub scope: Option<String>,
    /// Evaluate on this split of the manifest (see `train --split`).
    #[arg(long)]
    pub split: Option<String>,
    /// Archive every caption of every other pair for image queries.
    #[arg(long)]
    pub all_captions: bool,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("query").required(true).args(["text", "pair"]))]
pub struct QueryArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Checkpoint written by `train`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Manifest whose pairs and captions form the archive.
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Sentence query against the image-pair archive.
    #[arg(long)]
    pub text: Option<String>,
    /// Pair id whose images query the caption archive.
    #[arg(long)]
    pub pair: Option<String>,
    /// Number of results (default 5).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SelfcheckArgs {
    /// Seed for the random test inputs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt the backward rule of this operation.
    #[arg(long, value_name = "OP")]
    pub fault: Option<String>,
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `out` and diagnostics to `err`. Returns the exit code.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
                return 2;
            }
            let _ = write!(out, "{text}");
            return 0;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Query(a) => query(a, out),
        Command::Selfcheck(a) => selfcheck_cmd(a, out),
    }
}

/// Defaults, then the config file, then the given flag overrides.
fn resolve(file: &Option<PathBuf>, flags: Vec<(&str, Option<String>)>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.apply_file(path)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    Ok(cfg)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn on(flag: bool) -> Option<String> {
    flag.then(|| "true".to_string())
}

fn required<'a>(v: &'a Option<PathBuf>, what: &str) -> CliResult<&'a Path> {
    v.as_deref().ok_or_else(|| CliError::Usage(format!("missing --{what} (flag or config key)")))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn is_non_empty_dir(dir: &Path) -> CliResult<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(CliError::io(dir, e)),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::io("<stdout>", e))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = resolve(
        &a.config.config,
        vec![
            ("pairs", s(&a.pairs)),
            ("seed", s(&a.seed)),
            ("out", a.out.as_ref().map(|p| p.display().to_string())),
            ("grid", s(&a.grid)),
            ("patch", s(&a.patch)),
            ("embed_dim", s(&a.embed_dim)),
        ],
    )?;
    let dir = required(&cfg.out, "out")?.to_path_buf();
    if cfg.pairs < 2 {
        return Err(CliError::Usage(format!("--pairs must be at least 2, got {}", cfg.pairs)));
    }
    if is_non_empty_dir(&dir)? {
        if !a.force {
            return Err(CliError::Usage(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        let emb = dir.join("emb");
        if emb.exists() {
            std::fs::remove_dir_all(&emb).map_err(|e| CliError::io(&emb, e))?;
        }
    }
    let pairs = generate_synthetic_dataset(cfg.pairs, cfg.synth_config(), cfg.seed)?;
    let emb = dir.join("emb");
    create_dir(&emb)?;
    let mut entries = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let s = &p.sample;
        let name = |suffix: &str| format!("emb/{}_{suffix}.tsre", s.id);
        for (suffix, t) in [("t1", &s.emb_t1), ("t2", &s.emb_t2), ("cls_t1", &s.cls_t1), ("cls_t2", &s.cls_t2)] {
            tsre::write(&dir.join(name(suffix)), t)?;
        }
        entries.push(ManifestEntry {
            id: s.id.clone(),
            captions: s.captions.iter().map(|c| c.text.clone()).collect(),
            emb_t1: name("t1"),
            emb_t2: name("t2"),
            cls_t1: Some(name("cls_t1")),
            cls_t2: Some(name("cls_t2")),
            change: s.change,
        });
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    manifest::write(&manifest_path, &entries)?;
    cfg.write_resolved(&dir)?;
    emit(out, &format!("{}\n", manifest_path.display()))
}

#[derive(Serialize)]
struct LogLine {
    epoch: usize,
    loss: f64,
    batches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_recall_t2i: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_recall_i2t: Option<f64>,
}

/// Train / validation / test subsets under the configured split.
fn split_samples(cfg: &RunConfig, samples: Vec<BitemporalSample>, seed: u64) -> CliResult<[Vec<BitemporalSample>; 3]> {
    match cfg.split {
        SplitSpec::None => Ok([samples.clone(), samples.clone(), samples]),
        SplitSpec::Fractions(f) => {
            let sp = split_and_subsample(&samples, |p| p.change, f, cfg.nochange_keep, seed)?;
            Ok([sp.train, sp.val, sp.test])
        }
    }
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = resolve(
        &a.config.config,
        vec![
            ("manifest", a.manifest.as_ref().map(|p| p.display().to_string())),
            ("out", a.out.as_ref().map(|p| p.display().to_string())),
            ("fusion", a.fusion.clone()),
            ("heads", a.heads.clone()),
            ("fusion_stages", s(&a.fusion_stages)),
            ("dropout", s(&a.dropout)),
            ("epochs", s(&a.epochs)),
            ("seed", s(&a.seed)),
            ("batch_size", s(&a.batch_size)),
            ("lr", s(&a.lr)),
            ("weight_decay", s(&a.weight_decay)),
            ("momentum", s(&a.momentum)),
            ("split", a.split.clone()),
            ("nochange_keep", s(&a.nochange_keep)),
            ("clip_style_kappa", on(a.clip_style_kappa)),
            ("train_text_encoder", on(a.train_text_encoder)),
        ],
    )?;
    let manifest_path = required(&cfg.manifest, "manifest")?;
    let dir = required(&cfg.out, "out")?.to_path_buf();
    let (_, samples) = manifest::load_dataset(manifest_path)?;
    let embed_dim = samples.first().map(BitemporalSample::embed_dim).unwrap_or(0);
    let model_config = cfg.model_config(embed_dim);
    let train_cfg = cfg.train_config();
    train_cfg.validate()?;
    let [train_set, val_set, _] = split_samples(&cfg, samples, cfg.seed)?;
    if train_set.is_empty() {
        return Err(CliError::Usage("the training split is empty".into()));
    }

    let log_path = dir.join(TRAIN_LOG);
    let final_path = dir.join(FINAL_CHECKPOINT);
    let best_path = dir.join(BEST_CHECKPOINT);
    let (mut state, mut log, mut best) = if a.resume {
        let (state, meta) = checkpoint::load(&final_path)?;
        if state.model.config != model_config || meta.train_seed != cfg.seed {
            return Err(CliError::Usage(format!(
                "{} was written by a different configuration or seed",
                final_path.display()
            )));
        }
        let previous = std::fs::read_to_string(&log_path).map_err(|e| CliError::io(&log_path, e))?;
        let kept: String = previous.lines().take(state.epoch).map(|l| format!("{l}\n")).collect();
        let best = match (best_path.exists(), val_set.len() >= 2) {
            (true, true) => {
                let (b, _) = checkpoint::load(&best_path)?;
                Some(validate(&b.model, &val_set)?.mean())
            }
            _ => None,
        };
        (state, kept, best)
    } else {
        if log_path.exists() && !a.force {
            return Err(CliError::Usage(format!(
                "{} already holds a run (use --force to overwrite or --resume to continue)",
                dir.display()
            )));
        }
        (TrainState::new(Model::new(model_config)?), String::new(), None)
    };

    create_dir(&dir)?;
    cfg.write_resolved(&dir)?;
    output::write_file(&log_path, log.as_bytes())?;
    while state.epoch < train_cfg.epochs {
        let epoch_log = train_epoch(&mut state, &train_cfg, &train_set)?;
        let rec: Option<Recall> = if val_set.len() >= 2 { Some(validate(&state.model, &val_set)?) } else { None };
        let line = LogLine {
            epoch: epoch_log.epoch,
            loss: epoch_log.mean_loss as f64,
            batches: epoch_log.batches,
            val_recall_t2i: rec.map(|r| r.text_to_image),
            val_recall_i2t: rec.map(|r| r.image_to_text),
        };
        log.push_str(&serde_json::to_string(&line).expect("serializable"));
        log.push('\n');
        output::write_file(&log_path, log.as_bytes())?;
        checkpoint::save(&final_path, &state, cfg.seed)?;
        // Without a validation set the latest state doubles as the best one.
        let better = match rec {
            Some(r) => best.is_none_or(|b| r.mean() > b),
            None => true,
        };
        if better {
            best = rec.map(|r| r.mean());
            checkpoint::save(&best_path, &state, cfg.seed)?;
        }
        emit(
            out,
            &format!(
                "epoch {:>3}  loss {:.5}{}\n",
                line.epoch,
                line.loss,
                rec.map_or(String::new(), |r| format!(
                    "  val R@1 t2i {:.3} i2t {:.3}",
                    r.text_to_image, r.image_to_text
                ))
            ),
        )?;
    }
    if !final_path.exists() {
        // Resumed at or past the target epoch count.
        checkpoint::save(&final_path, &state, cfg.seed)?;
    }
    Ok(())
}

fn load_model_for(checkpoint_path: &Path, samples: &[BitemporalSample]) -> CliResult<(Model, u64)> {
    let (state, meta) = checkpoint::load(checkpoint_path)?;
    if let Some(first) = samples.first() {
        if first.embed_dim() != state.model.config.image_dim {
            return Err(CliError::Usage(format!(
                "checkpoint {} expects {}-wide embeddings but the manifest has {}",
                checkpoint_path.display(),
                state.model.config.image_dim,
                first.embed_dim()
            )));
        }
    }
    Ok((state.model, meta.train_seed))
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = resolve(
        &a.config.config,
        vec![
            ("checkpoint", a.checkpoint.as_ref().map(|p| p.display().to_string())),
            ("manifest", a.manifest.as_ref().map(|p| p.display().to_string())),
            ("out", a.out.as_ref().map(|p| p.display().to_string())),
            ("rounds", s(&a.rounds)),
            ("k", s(&a.k)),
            ("seed", s(&a.seed)),
            ("scope", a.scope.clone()),
            ("split", a.split.clone()),
            ("all_captions", on(a.all_captions)),
        ],
    )?;
    let checkpoint_path = required(&cfg.checkpoint, "checkpoint")?;
    let manifest_path = required(&cfg.manifest, "manifest")?;
    let dir = match &cfg.out {
        Some(d) => d.clone(),
        None => checkpoint_path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let (_, samples) = manifest::load_dataset(manifest_path)?;
    let (model, train_seed) = load_model_for(checkpoint_path, &samples)?;
    let [_, _, eval_set] = split_samples(&cfg, samples, train_seed)?;

    let features = EvalFeatures::compute(&model, &eval_set)?;
    let options = EvalOptions {
        rounds: cfg.rounds,
        k: cfg.k,
        seed: cfg.seed,
        all_captions: cfg.all_captions,
    };
    let scopes: Vec<Scope> = match cfg.scope {
        Some(s) => vec![s],
        None => Scope::ALL.to_vec(),
    };
    let mut runs = Vec::new();
    let mut entries = Vec::new();
    for task in Task::ALL {
        for &scope in &scopes {
            let run = leave_one_out_eval(&features, &eval_set, task, scope, options)?;
            entries.push(score_retrieval(&run, &eval_set, cfg.k, None)?);
            runs.push(run);
        }
    }
    let report = ScoreReport { entries };
    create_dir(&dir)?;
    cfg.write_resolved(&dir)?;
    output::write_file(&dir.join(REPORT_FILE), output::report_json(&report).as_bytes())?;
    output::write_file(&dir.join(RESULTS_FILE), &output::results_jsonl(&runs))?;
    emit(out, &output::report_table(&report))
}

fn query(a: QueryArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = resolve(
        &a.config.config,
        vec![
            ("checkpoint", a.checkpoint.as_ref().map(|p| p.display().to_string())),
            ("manifest", a.manifest.as_ref().map(|p| p.display().to_string())),
            ("k", s(&a.k)),
        ],
    )?;
    let checkpoint_path = required(&cfg.checkpoint, "checkpoint")?;
    let manifest_path = required(&cfg.manifest, "manifest")?;
    let (_, samples) = manifest::load_dataset(manifest_path)?;
    let (model, _) = load_model_for(checkpoint_path, &samples)?;
    let (archive, q) = match (&a.text, &a.pair) {
        (Some(text), _) => {
            let caption = TextSample::new(text)?;
            (RetrievalArchive::images(&model, &samples)?, model.text_features(&[&caption])?)
        }
        (None, Some(id)) => {
            let pair = samples
                .iter()
                .find(|p| &p.id == id)
                .ok_or_else(|| itsr_core::Error::Lookup(id.clone()))?;
            (RetrievalArchive::captions(&model, &samples)?, model.image_features(&[pair])?)
        }
        (None, None) => return Err(CliError::Usage("give --text or --pair".into())),
    };
    let hits = archive.query_topk(q.row(0), cfg.k)?;
    let mut text = String::new();
    for (rank, h) in hits.iter().enumerate() {
        text.push_str(&format!("{}\t{:.6}\t{}", rank + 1, h.score, h.id));
        if let Some(c) = &h.caption {
            text.push('\t');
            text.push_str(c);
        }
        text.push('\n');
    }
    emit(out, &text)
}

fn selfcheck_cmd(a: SelfcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let opts = SelfCheckOptions {
        seed: a.seed,
        fault: a.fault.clone(),
    };
    let mut report = selfcheck::run(&opts)?;
    let model_checks = gradref::small_tff_check(a.seed).map_err(CliError::Failed)?;
    report.entries.extend(model_checks.into_iter().map(|c| selfcheck::CheckEntry {
        suite: "model",
        passed: c.passed,
        detail: format!("analytic {:.6e} numeric {:.6e} rel {:.2e}", c.analytic, c.numeric, c.rel_error),
        name: c.name,
    }));

    let mut text = String::new();
    let mut suites: Vec<&str> = report.entries.iter().map(|e| e.suite).collect();
    suites.dedup();
    for suite in suites {
        let all: Vec<_> = report.entries.iter().filter(|e| e.suite == suite).collect();
        let passed = all.iter().filter(|e| e.passed).count();
        text.push_str(&format!("{suite:<10} {passed}/{} passed\n", all.len()));
    }
    for f in report.failures() {
        text.push_str(&format!("FAIL {} {}: {}\n", f.suite, f.name, f.detail));
    }
    emit(out, &text)?;
    if report.passed() {
        return Ok(());
    }
    let names: Vec<String> = report.failures().map(|f| format!("{}:{}", f.suite, f.name)).collect();
    Err(CliError::Failed(format!("self-check failed: {}", names.join(", "))))
}
