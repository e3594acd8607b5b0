//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::cmp::Ordering;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use itsr::gradref;
use itsr_core::data::{BitemporalSample, TextSample};
use itsr_core::fusion::{cross_attention, gff_concat, gff_subtract, tff_difference, FusionStrategy, Mode, TffConfig};
use itsr_core::heads::{contrastive_loss_values, cosine_similarity};
use itsr_core::model::{Model, ModelConfig};
use itsr_core::retrieval::{leave_one_out_eval, ArchiveItem, EvalFeatures, EvalOptions, RetrievalArchive, Scope, Task};
use itsr_core::rng::{self, Purpose, StreamRng};
use itsr_core::synth::{generate_synthetic_dataset, swap_dates, SynthConfig, SyntheticPair};
use itsr_core::train::{distinct_pair_loss, fit, recall, validate, TrainConfig, TrainState};
use itsr_core::{selfcheck, Float, Tape, Tensor};
use itsr_core_f64 as r64;

type Outcome = Result<String, String>;

/// Name, check and time budget in seconds.
type Criterion = (&'static str, fn() -> Outcome, u64);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn text<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn samples(pairs: Vec<SyntheticPair>) -> Vec<BitemporalSample> {
    pairs.into_iter().map(|p| p.sample).collect()
}

fn gradients() -> Outcome {
    let checks = gradref::small_tff_check(0)?;
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    if let Some(bad) = checks.iter().find(|c| !c.passed) {
        return Err(format!("f32 {}: rel error {:.2e}", bad.name, bad.rel_error));
    }
    ensure(checks.iter().any(|c| c.name == "kappa"), || "kappa was not checked".into())?;

    // The same configuration entirely in double precision.
    let mut cfg = ModelConfig::new(FusionStrategy::Tff, 16, 0);
    cfg.tff = TffConfig { heads: 2, head_dim: 8, stages: 2, ..TffConfig::defaults_for(16) };
    let model = gradref::model64(&Model::new(cfg).map_err(text)?).map_err(text)?;
    let pairs: Vec<_> = gradref::random_pairs(4, 8, 16, 10)
        .iter()
        .map(gradref::sample64)
        .collect::<Result<_, _>>()
        .map_err(text)?;
    let p: Vec<_> = pairs.iter().collect();
    let c: Vec<_> = pairs.iter().map(|s| &s.captions[0]).collect();
    let opts = r64::gradcheck::GradCheckOptions::default();
    let checks64 = r64::gradcheck::check_model(&model, &p, &c, 0, &opts).map_err(text)?;
    let worst64 = checks64.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    if let Some(bad) = checks64.iter().find(|c| !c.passed) {
        return Err(format!("f64 {}: rel error {:.2e}", bad.name, bad.rel_error));
    }
    Ok(format!(
        "{} parameters, worst f32 {worst:.1e} (<= 1e-3), worst f64 {worst64:.1e} (<= {:.0e})",
        checks.len(),
        opts.tolerance
    ))
}

fn random_matrix(r: &mut StreamRng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| rng::uniform(r, -1.0, 1.0))
}

fn loss_anchors() -> Outcome {
    let mut r = rng::stream(2, Purpose::Synth, 0);
    for kappa in [-3.0, 0.0, 0.07, 2.0] {
        let (fx, fy) = (random_matrix(&mut r, 1, 8), random_matrix(&mut r, 1, 8));
        let total = contrastive_loss_values(&fx, &fy, kappa).map_err(text)?.2;
        ensure(total == 0.0, || format!("b=1 loss {total} at kappa {kappa}"))?;
    }
    let eye = Tensor::identity(2);
    let l = contrastive_loss_values(&eye, &eye, 0.0).map_err(text)?.2 as f64;
    let expected = (1.0 + (-1.0f64).exp()).ln();
    ensure((l - expected).abs() <= 1e-6, || format!("orthonormal loss {l}, expected {expected}"))?;
    for b in [2usize, 4, 8] {
        let (fx, fy) = (random_matrix(&mut r, b, 8), random_matrix(&mut r, b, 8));
        let (lxy, lyx, _) = contrastive_loss_values(&fx, &fy, -40.0).map_err(text)?;
        let ln_b = (b as f64).ln();
        for v in [lxy, lyx] {
            ensure((v as f64 - ln_b).abs() <= 1e-5, || format!("b={b}: {v} vs ln b {ln_b}"))?;
        }
    }
    Ok("b=1 is 0, orthonormal ln(1+1/e), cold limit ln b for b in 2,4,8".into())
}

fn overfit() -> Outcome {
    // Seeds checked to converge for every strategy.
    let pairs = samples(generate_synthetic_dataset(16, SynthConfig::default(), 1).map_err(text)?);
    let mut parts = Vec::new();
    for strategy in FusionStrategy::ALL {
        let t = Instant::now();
        let mut state = TrainState::new(Model::new(ModelConfig::new(strategy, 32, 3)).map_err(text)?);
        let cfg = TrainConfig { epochs: 200, seed: 1, ..TrainConfig::default() };
        fit(&mut state, &cfg, &pairs, &[], |_, _| {}).map_err(text)?;
        let r = validate(&state.model, &pairs).map_err(text)?;
        let loss = distinct_pair_loss(&state.model, &pairs).map_err(text)?;
        let elapsed = t.elapsed();
        ensure(r.text_to_image == 1.0 && r.image_to_text == 1.0, || {
            format!("{}: recall@1 {:?}", strategy.name(), r)
        })?;
        ensure(loss <= 0.05, || format!("{}: loss {loss:.4}", strategy.name()))?;
        ensure(elapsed < Duration::from_secs(180), || format!("{}: took {elapsed:?}", strategy.name()))?;
        parts.push(format!("{} loss {loss:.4} in {:.1}s", strategy.name(), elapsed.as_secs_f64()));
    }
    Ok(format!("recall@1 = 1 both ways; {}", parts.join(", ")))
}

fn retrieval() -> Outcome {
    let mut r = rng::stream(4, Purpose::Synth, 0);
    let n = 1000;
    let dim = 16;
    // Duplicate some rows so exact score ties occur.
    let mut rows: Vec<Vec<Float>> = Vec::with_capacity(n);
    for i in 0..n {
        if i % 10 == 9 {
            let src = rows[i - 1 - (i % 7)].clone();
            rows.push(src);
        } else {
            rows.push((0..dim).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect());
        }
    }
    let mut ids: Vec<String> = (0..n).map(|i| format!("item{i:04}")).collect();
    rng::shuffle(&mut r, &mut ids);
    let items = ids.iter().map(|id| ArchiveItem { id: id.clone(), caption: None }).collect();
    let features = Tensor::new(&[n, dim], rows.concat()).map_err(text)?;
    let archive = RetrievalArchive::new(items, features).map_err(text)?;

    for q in 0..100 {
        // Some queries are archive rows themselves, so ties reach the top.
        let query: Vec<Float> = if q % 4 == 0 {
            rows[q * 7 % n].clone()
        } else {
            (0..dim).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect()
        };
        let mut full: Vec<(Float, &str)> = rows
            .iter()
            .zip(&ids)
            .map(|(row, id)| Ok((cosine_similarity(&query, row)?, id.as_str())))
            .collect::<itsr_core::Result<_>>()
            .map_err(text)?;
        full.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1)));
        for k in [1, 5, 50] {
            let hits = archive.query_topk(&query, k).map_err(text)?;
            let got: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
            let want: Vec<&str> = full[..k].iter().map(|x| x.1).collect();
            ensure(got == want, || format!("query {q}, k={k}: {got:?} vs {want:?}"))?;
        }
    }
    Ok("1000 rows x 100 queries x k in 1,5,50 match a full sort".into())
}

fn metrics() -> Outcome {
    let entries = selfcheck::metric_suite();
    ensure(entries.len() >= 10, || format!("only {} fixtures", entries.len()))?;
    if let Some(bad) = entries.iter().find(|e| !e.passed) {
        return Err(format!("{}: {}", bad.name, bad.detail));
    }
    Ok(format!("{} fixtures within 1e-9", entries.len()))
}

fn value(tape: &Tape, v: itsr_core::Var) -> Vec<Float> {
    tape.value(v).data().to_vec()
}

fn fusion() -> Outcome {
    let mut r = rng::stream(6, Purpose::Synth, 0);
    for i in 0..1000 {
        let d = 1 + i % 24;
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[d], |_| rng::uniform(&mut r, -10.0, 10.0))).map_err(text)?;
        let b = tape.constant(Tensor::from_fn(&[d], |_| rng::uniform(&mut r, -10.0, 10.0))).map_err(text)?;
        let ab = gff_subtract(&mut tape, a, b).map_err(text)?;
        let ba = gff_subtract(&mut tape, b, a).map_err(text)?;
        let (ab, ba) = (value(&tape, ab), value(&tape, ba));
        ensure(ab.iter().zip(&ba).all(|(x, y)| *x == -*y), || format!("subtraction not antisymmetric at input {i}"))?;
        let ab = gff_concat(&mut tape, a, b).map_err(text)?;
        let ba = gff_concat(&mut tape, b, a).map_err(text)?;
        let (ab, ba) = (value(&tape, ab), value(&tape, ba));
        ensure(ab[..d] == ba[d..] && ab[d..] == ba[..d], || format!("concatenation halves differ at input {i}"))?;
    }

    for i in 0..200 {
        let (tq, tk, d) = (1 + i % 9, 1 + i % 11, 2 + i % 6);
        let mut tape = Tape::new();
        let v = random_matrix(&mut r, tk, d);
        let q = tape.constant(Tensor::from_fn(&[tq, d], |_| rng::uniform(&mut r, -5.0, 5.0))).map_err(text)?;
        let k = tape.constant(Tensor::from_fn(&[tk, d], |_| rng::uniform(&mut r, -5.0, 5.0))).map_err(text)?;
        let vv = tape.constant(v.clone()).map_err(text)?;
        let out = cross_attention(&mut tape, q, k, vv, 1).map_err(text)?;
        let out = tape.value(out);
        for j in 0..d {
            let col = (0..tk).map(|t| v.at(t, j));
            let (lo, hi) = col.fold((Float::INFINITY, Float::NEG_INFINITY), |(l, h), x| (l.min(x), h.max(x)));
            for t in 0..tq {
                let o = out.at(t, j);
                ensure(o >= lo - 1e-5 && o <= hi + 1e-5, || format!("attention {o} outside [{lo}, {hi}]"))?;
            }
        }
    }

    let mut lengths = Vec::new();
    for tokens in [4, 16, 64] {
        let pairs = gradref::random_pairs(2, tokens, 16, tokens as u64);
        let mut tape = Tape::new();
        let p = tape.constant(pairs[0].emb_t1.clone()).map_err(text)?;
        let q = tape.constant(pairs[0].emb_t1.clone()).map_err(text)?;
        let s = tff_difference(&mut tape, p, q).map_err(text)?;
        ensure(tape.value(s).data().iter().all(|&x| x == 0.0), || "no-change difference is not zero".into())?;

        let model = Model::new(ModelConfig::new(FusionStrategy::Tff, 16, 1)).map_err(text)?;
        // Train mode: a fresh model has no running batch statistics yet.
        let fused = model.fuse_pair(&pairs[1], Mode::Train, None).map_err(text)?;
        lengths.push(fused.vector.numel());
    }
    let expected = TffConfig::defaults_for(16).fused_dim();
    ensure(lengths.iter().all(|&l| l == expected), || format!("fused lengths {lengths:?}, expected {expected}"))?;
    Ok(format!("1000 exact GFF checks, attention bounds, zero difference, TFF length 2d = {expected} for T in 4,16,64"))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("itsr").chain(args.iter().copied()).map(std::ffi::OsString::from);
    let code = itsr::cli::run_from(argv, &mut out, &mut err);
    ensure(code == 0, || format!("itsr {} exited {code}: {}", args.join(" "), String::from_utf8_lossy(&err)))?;
    Ok(String::from_utf8_lossy(&out).into_owned())
}

fn protocol() -> Outcome {
    let tmp = tempfile::tempdir().map_err(text)?;
    let dir = tmp.path();
    let data = dir.join("data");
    let run = dir.join("run");
    let s = |p: &Path| p.to_string_lossy().into_owned();
    // Seed whose twelve pairs include the single no-change edit.
    let data_seed = (0..)
        .find(|&seed| {
            generate_synthetic_dataset(12, SynthConfig::default(), seed)
                .map(|ps| ps.iter().any(|p| !p.sample.change))
                .unwrap_or(false)
        })
        .unwrap_or(0)
        .to_string();
    cli(&["synth", "--pairs", "12", "--seed", &data_seed, "--out", &s(&data)])?;
    let manifest = data.join("manifest.jsonl");
    cli(&["train", "--manifest", &s(&manifest), "--out", &s(&run), "--fusion", "tff", "--epochs", "3"])?;
    let checkpoint = run.join("checkpoint_final.tsrc");
    let mut outputs = Vec::new();
    for name in ["eval_a", "eval_b"] {
        let out = dir.join(name);
        cli(&["evaluate", "--checkpoint", &s(&checkpoint), "--manifest", &s(&manifest), "--out", &s(&out), "--rounds", "5"])?;
        let report = std::fs::read(out.join("report.json")).map_err(text)?;
        let results = std::fs::read(out.join("results.jsonl")).map_err(text)?;
        outputs.push((report, results));
    }
    ensure(outputs[0] == outputs[1], || "two evaluations with the same seed differ".into())?;

    let report: serde_json::Value = serde_json::from_slice(&outputs[0].0).map_err(text)?;
    let entries = report.as_array().ok_or("report is not an array")?;
    let mut cells = Vec::new();
    for e in entries {
        for metric in ["bleu1", "bleu4", "meteor", "rougeL"] {
            let v = e[metric].as_f64().ok_or_else(|| format!("{} {} has no {metric}", e["task"], e["scope"]))?;
            cells.push((e["task"].to_string(), e["scope"].to_string(), metric, v));
        }
    }
    let tasks: std::collections::BTreeSet<_> = cells.iter().map(|c| c.0.clone()).collect();
    let scopes: std::collections::BTreeSet<_> = cells.iter().map(|c| c.1.clone()).collect();
    ensure(entries.len() == 6 && tasks.len() == 2 && scopes.len() == 3 && cells.len() == 24, || {
        format!("{} entries over {} tasks and {} scopes", entries.len(), tasks.len(), scopes.len())
    })?;

    // Archive sizes and bitwise repeatability straight from the protocol.
    let pairs = samples(generate_synthetic_dataset(12, SynthConfig::default(), 3).map_err(text)?);
    let mut state = TrainState::new(Model::new(ModelConfig::new(FusionStrategy::Tff, 32, 2)).map_err(text)?);
    fit(&mut state, &TrainConfig { epochs: 1, ..TrainConfig::default() }, &pairs, &[], |_, _| {}).map_err(text)?;
    let features = EvalFeatures::compute(&state.model, &pairs).map_err(text)?;
    let opts = EvalOptions { rounds: 5, k: 5, seed: 9, all_captions: false };
    for task in [Task::TextToImage, Task::ImageToText] {
        let a = leave_one_out_eval(&features, &pairs, task, Scope::Full, opts).map_err(text)?;
        let b = leave_one_out_eval(&features, &pairs, task, Scope::Full, opts).map_err(text)?;
        ensure(a.results.len() == 5 * pairs.len(), || format!("{} queries", a.results.len()))?;
        ensure(a.results.iter().all(|q| q.archive_size == pairs.len() - 1), || "archive is not N-1".into())?;
        let bits = |run: &itsr_core::retrieval::EvalRun| -> Vec<(String, u32)> {
            run.results.iter().flat_map(|q| q.retrieved.iter().map(|h| (h.id.clone(), h.score.to_bits()))).collect()
        };
        ensure(bits(&a) == bits(&b), || "protocol runs differ".into())?;
    }
    Ok("2 tasks x 3 scopes x 4 metrics, archives of N-1, 5 rounds reproduce bitwise".into())
}

fn directional() -> Outcome {
    let data = generate_synthetic_dataset(200, SynthConfig::default(), 11).map_err(text)?;
    let pairs: Vec<_> = data.iter().map(|p| p.sample.clone()).collect();
    let mut state = TrainState::new(Model::new(ModelConfig::new(FusionStrategy::Tff, 32, 1)).map_err(text)?);
    let cfg = TrainConfig { epochs: 50, seed: 1, ..TrainConfig::default() };
    fit(&mut state, &cfg, &pairs, &[], |_, _| {}).map_err(text)?;
    let model = &state.model;
    let r5 = recall(model, &pairs, 5).map_err(text)?;

    let (mut wins, mut total) = (0usize, 0usize);
    for pair in data.iter().filter(|p| p.edit.is_change()) {
        let swapped = swap_dates(&pair.sample);
        let image = model.image_features(&[&swapped]).map_err(text)?;
        let caps = |edit: itsr_core::synth::Edit| -> Result<Tensor, String> {
            let texts: Vec<TextSample> = edit.captions().iter().map(|c| TextSample::new(c)).collect::<Result<_, _>>().map_err(text)?;
            model.text_features(&texts.iter().collect::<Vec<_>>()).map_err(text)
        };
        let (opposite, same) = (caps(pair.edit.reversed())?, caps(pair.edit)?);
        for i in 0..opposite.rows() {
            for j in 0..same.rows() {
                let o = cosine_similarity(image.row(0), opposite.row(i)).map_err(text)?;
                let s = cosine_similarity(image.row(0), same.row(j)).map_err(text)?;
                wins += usize::from(o > s);
                total += 1;
            }
        }
    }
    let frac = wins as f64 / total as f64;
    ensure(r5.mean() >= 0.8, || format!("mean recall@5 {:.3}", r5.mean()))?;
    ensure(frac >= 0.7, || format!("opposite direction preferred in {:.1}% of comparisons", 100.0 * frac))?;
    Ok(format!(
        "recall@5 {:.3}/{:.3}, opposite direction preferred in {:.1}% of swapped comparisons",
        r5.text_to_image,
        r5.image_to_text,
        100.0 * frac
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("gradient integrity", gradients, 60),
        ("loss anchors", loss_anchors, 10),
        ("overfit oracle", overfit, 540),
        ("retrieval oracle", retrieval, 10),
        ("metric oracles", metrics, 10),
        ("fusion invariants", fusion, 60),
        ("protocol shape", protocol, 120),
        ("directional sanity", directional, 600),
    ];
    let mut failed = 0;
    for (n, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let outcome = outcome.and_then(|msg| {
            if secs <= *budget as f64 {
                Ok(msg)
            } else {
                Err(format!("{msg}; took {secs:.1}s, budget {budget}s"))
            }
        });
        match outcome {
            Ok(msg) => println!("PASS criterion {}: {name} ({secs:.1}s): {msg}", n + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({secs:.1}s): {msg}", n + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
