//! Built-in verification suites: finite-difference checks of every
//! differentiable operation, an exhaustive-sort oracle for top-k retrieval,
//! and pinned caption-metric fixtures.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::tokenize;
use crate::error::{Error, Result};
use crate::gradcheck::{check_op, GradCheckOptions};
use crate::heads::{contrastive_loss, cosine_similarity};
use crate::metrics::{bleu_n, meteor, rouge_l};
use crate::retrieval::{ArchiveItem, RetrievalArchive};
use crate::rng::{self, Purpose, StreamRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Float;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckEntry {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelfCheckReport {
    pub entries: Vec<CheckEntry>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SelfCheckOptions {
    pub seed: u64,
    /// Skews the backward rule of this operation, to demonstrate that the
    /// gradient suite notices.
    pub fault: Option<String>,
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn rand_tensor(r: &mut StreamRng, shape: &[usize], lo: Float, hi: Float) -> Tensor {
    Tensor::from_fn(shape, |_| rng::uniform(r, lo, hi))
}

/// Values whose magnitude stays in `[0.2, 1]`, so small perturbations never
/// cross the relu kink.
fn away_from_zero(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng::uniform(r, 0.2, 1.0);
        if rng::uniform(r, -1.0, 1.0) < 0.0 {
            -m
        } else {
            m
        }
    })
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng::stream(seed, Purpose::Init, 1000);
    let mut t = |shape: &[usize]| rand_tensor(&mut r, shape, -1.0, 1.0);
    let a23 = t(&[2, 3]);
    let b23 = t(&[2, 3]);
    let mut cases = alloc::vec![
        OpCase { name: "matmul", inputs: alloc::vec![t(&[3, 4]), t(&[4, 2])], build: |tp, v| tp.matmul(v[0], v[1]) },
        OpCase {
            name: "block_matmul",
            inputs: alloc::vec![t(&[4, 3]), t(&[4, 3])],
            build: |tp, v| tp.block_matmul(v[0], v[1], 2, true),
        },
        OpCase { name: "transpose", inputs: alloc::vec![t(&[3, 2])], build: |tp, v| tp.transpose(v[0]) },
        OpCase { name: "add", inputs: alloc::vec![a23.clone(), b23.clone()], build: |tp, v| tp.add(v[0], v[1]) },
        OpCase { name: "sub", inputs: alloc::vec![a23.clone(), b23.clone()], build: |tp, v| tp.sub(v[0], v[1]) },
        OpCase { name: "mul", inputs: alloc::vec![a23.clone(), b23], build: |tp, v| tp.mul(v[0], v[1]) },
        OpCase { name: "add_row", inputs: alloc::vec![t(&[3, 4]), t(&[4])], build: |tp, v| tp.add_row(v[0], v[1]) },
        OpCase { name: "scale", inputs: alloc::vec![a23.clone()], build: |tp, v| tp.scale(v[0], 1.7) },
        OpCase { name: "scale_by", inputs: alloc::vec![a23.clone(), t(&[1])], build: |tp, v| tp.scale_by(v[0], v[1]) },
        OpCase { name: "exp", inputs: alloc::vec![a23.clone()], build: |tp, v| tp.exp(v[0]) },
        OpCase { name: "tanh", inputs: alloc::vec![a23], build: |tp, v| tp.tanh(v[0]) },
        OpCase {
            name: "dropout",
            inputs: alloc::vec![t(&[3, 4])],
            build: |tp, v| tp.dropout(v[0], 0.3, Some(&mut rng::stream(0, Purpose::Dropout, 0))),
        },
        OpCase { name: "softmax_rows", inputs: alloc::vec![t(&[2, 4])], build: |tp, v| tp.softmax_rows(v[0]) },
        OpCase {
            name: "layer_norm",
            inputs: alloc::vec![t(&[3, 4]), t(&[4]), t(&[4])],
            build: |tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        OpCase {
            name: "batch_norm_1d",
            inputs: alloc::vec![t(&[6, 3]), t(&[3]), t(&[3])],
            build: |tp, v| tp.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|(y, _, _)| y),
        },
        OpCase {
            name: "conv1d_tokens",
            inputs: alloc::vec![t(&[8, 3]), t(&[2, 3, 3])],
            build: |tp, v| tp.conv1d_tokens(v[0], v[1], 2),
        },
        OpCase {
            name: "concat_last_axis",
            inputs: alloc::vec![t(&[2, 2]), t(&[2, 3])],
            build: |tp, v| tp.concat_cols(&[v[0], v[1]]),
        },
        OpCase {
            name: "mean_pool_tokens",
            inputs: alloc::vec![t(&[6, 3])],
            build: |tp, v| tp.mean_pool_tokens(v[0], 2),
        },
        OpCase { name: "sum", inputs: alloc::vec![t(&[2, 3])], build: |tp, v| tp.sum(v[0]) },
        OpCase { name: "normalize_rows", inputs: alloc::vec![t(&[3, 4])], build: |tp, v| tp.normalize_rows(v[0]) },
        OpCase {
            name: "diag_cross_entropy",
            inputs: alloc::vec![t(&[3, 3])],
            build: |tp, v| tp.diag_cross_entropy(v[0]),
        },
        OpCase {
            name: "gather_rows",
            inputs: alloc::vec![t(&[5, 3])],
            build: |tp, v| tp.gather_rows(v[0], &[4, 0, 4, 2]),
        },
        OpCase {
            name: "contrastive_loss",
            inputs: alloc::vec![t(&[4, 5]), t(&[4, 5]), t(&[1])],
            build: |tp, v| contrastive_loss(tp, v[0], v[1], v[2]).map(|l| l.total),
        },
    ];
    cases.insert(
        10,
        OpCase { name: "relu", inputs: alloc::vec![away_from_zero(&mut r, &[3, 4])], build: |tp, v| tp.relu(v[0]) },
    );
    cases
}

/// Checks the gradient of every operation listed in [`Tape::OPS`] plus the
/// contrastive loss composite.
pub fn gradient_suite(opts: &SelfCheckOptions) -> Result<Vec<CheckEntry>> {
    if let Some(f) = &opts.fault {
        if !Tape::OPS.contains(&f.as_str()) {
            return Err(Error::Config(format!("unknown operation `{f}`; expected one of {:?}", Tape::OPS)));
        }
    }
    let gc = GradCheckOptions {
        seed: opts.seed,
        ..GradCheckOptions::default()
    };
    let mut out = Vec::new();
    for case in op_cases(opts.seed) {
        let fault = opts.fault.clone();
        let build = case.build;
        let checks = check_op(
            case.name,
            &case.inputs,
            |tape, vars| {
                if let Some(f) = &fault {
                    tape.inject_fault(f);
                }
                build(tape, vars)
            },
            &gc,
        )?;
        let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        out.push(CheckEntry {
            suite: "gradient",
            name: case.name.to_string(),
            passed: checks.iter().all(|c| c.passed),
            detail: format!("max relative error {worst:.2e} (tolerance {:.0e})", gc.tolerance),
        });
    }
    Ok(out)
}

/// Compares `query_topk` with a full sort of all scores on an archive
/// containing exact duplicate rows (so ties occur).
pub fn retrieval_suite(seed: u64) -> Result<Vec<CheckEntry>> {
    let (rows, dim, queries) = (300, 8, 20);
    let mut r = rng::stream(seed, Purpose::Init, 2000);
    let mut features = rand_tensor(&mut r, &[rows, dim], -1.0, 1.0);
    for i in (0..rows).step_by(7).skip(1) {
        let src = features.row(i / 2).to_vec();
        features.row_mut(i).copy_from_slice(&src);
    }
    let items = (0..rows)
        .map(|i| ArchiveItem {
            id: format!("row{:04}", (i * 7919) % rows),
            caption: None,
        })
        .collect();
    let archive = RetrievalArchive::new(items, features.clone())?;
    let mut out = Vec::new();
    for k in [1, 5, 50] {
        let mut mismatches = 0;
        for _ in 0..queries {
            let q = rand_tensor(&mut r, &[dim], -1.0, 1.0);
            let mut all: Vec<(Float, &str, usize)> = (0..rows)
                .map(|i| Ok((cosine_similarity(q.data(), features.row(i))?, archive.items()[i].id.as_str(), i)))
                .collect::<Result<_>>()?;
            all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
            let hits = archive.query_topk(q.data(), k)?;
            let same = hits.len() == k
                && hits
                    .iter()
                    .zip(&all)
                    .all(|(h, e)| h.row == e.2 && h.id == e.1 && h.score.to_bits() == e.0.to_bits());
            if !same {
                mismatches += 1;
            }
        }
        out.push(CheckEntry {
            suite: "retrieval",
            name: format!("top-{k}"),
            passed: mismatches == 0,
            detail: format!("{mismatches} of {queries} queries differ from the full sort over {rows} rows"),
        });
    }
    Ok(out)
}

/// `(hypothesis, references, [bleu1, bleu4, meteor, rouge_l])`, computed
/// independently by brute force.
pub const METRIC_FIXTURES: [(&str, &[&str], [f64; 4]); 14] = [
    ("a b c", &["a b d"], [0.6666666666666666, 0.6389431042462724, 0.625, 0.6666666666666666]),
    ("a b c d", &["a c b d"], [1.0, 0.4518010018049224, 0.5, 0.75]),
    ("the cat", &["the cat"], [1.0, 1.0, 0.9375, 1.0]),
    ("cat", &["cat"], [1.0, 1.0, 0.5, 1.0]),
    (
        "a red block appears in the north west",
        &["a red block appears in the north west"],
        [1.0, 1.0, 0.9990234375, 1.0],
    ),
    ("x y z", &["a b c"], [0.0, 0.0, 0.0, 0.0]),
    (
        "a red block appears in the north",
        &["a red block has been added to the north", "the north now contains a red block"],
        [0.7142857142857143, 0.34572078464194106, 0.6914285714285714, 0.6112224448897796],
    ),
    (
        "the the the the",
        &["the cat is on the mat"],
        [0.3032653298563167, 0.2304318198457308, 0.1724137931034483, 0.3860759493670886],
    ),
    (
        "a red block",
        &["a red block appears in the north west"],
        [0.18887560283756186, 0.18887560283756186, 0.3925925925925926, 0.5041322314049587],
    ),
    (
        "there is a new blue block in the south east of the scene",
        &["a blue block appears in the south east", "a new blue block is built in the south east"],
        [0.6923076923076923, 0.39832871551569504, 0.8576051779935275, 0.7124087591240876],
    ),
    (
        "north west block red a",
        &["a red block appears in the north west"],
        [0.5488116360940264, 0.20850333290253842, 0.4831168831168831, 0.2953995157384988],
    ),
    (
        "the scene is unchanged",
        &["there is no change", "the scene is unchanged", "nothing has changed in the scene"],
        [1.0, 1.0, 0.9921875, 1.0],
    ),
    (
        "the cat",
        &["the dog the cat"],
        [0.36787944117144233, 0.36787944117144233, 0.4934210526315789, 0.6288659793814433],
    ),
    (
        "a green block disappears from the center",
        &["the green block in the center is removed", "the center no longer contains a green block"],
        [0.6191984998215584, 0.2996977076903907, 0.6126582278481013, 0.5269978401727862],
    ),
];

pub const METRIC_TOLERANCE: f64 = 1e-9;

pub fn metric_suite() -> Vec<CheckEntry> {
    METRIC_FIXTURES
        .iter()
        .enumerate()
        .map(|(i, (hyp, refs, want))| {
            let h = tokenize(hyp);
            let rs: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
            let got = [bleu_n(&h, &rs, 1), bleu_n(&h, &rs, 4), meteor(&h, &rs, None), rouge_l(&h, &rs)];
            let worst = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
            CheckEntry {
                suite: "metrics",
                name: format!("fixture {i}: `{hyp}`"),
                passed: worst <= METRIC_TOLERANCE,
                detail: format!("max deviation {worst:.1e}"),
            }
        })
        .collect()
}

pub fn run(opts: &SelfCheckOptions) -> Result<SelfCheckReport> {
    let mut entries = gradient_suite(opts)?;
    entries.extend(retrieval_suite(opts.seed)?);
    entries.extend(metric_suite());
    Ok(SelfCheckReport { entries })
}
