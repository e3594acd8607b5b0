//! Finite-difference verification of analytic gradients.
//!
//! Each tensor is checked along one direction `u` (unit norm, biased toward
//! the analytic gradient so the directional derivative is well away from
//! zero). The numeric side is a Richardson-extrapolated central difference.
//! Piecewise-linear activations make the loss non-smooth: when the estimates
//! at `h` and `h / 2` disagree the step has straddled a kink, and the check
//! is repeated with a smaller step.

use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float as _;

use crate::data::{BitemporalSample, TextSample};
use crate::error::Result;
use crate::fusion::Mode;
use crate::model::Model;
use crate::rng::{self, Purpose, StreamRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Initial central-difference step.
    pub step: f64,
    /// How many times a kink-straddling step is divided by ten.
    pub retries: usize,
    /// Maximum relative error `|a - n| / max(|a|, |n|)`.
    pub tolerance: f64,
    /// Directional derivatives below this magnitude on both sides pass.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        if cfg!(feature = "f64") {
            GradCheckOptions {
                step: 1e-4,
                retries: 3,
                tolerance: 1e-5,
                abs_floor: 1e-9,
                seed: 0,
            }
        } else {
            GradCheckOptions {
                step: 1e-2,
                retries: 1,
                tolerance: 1e-3,
                abs_floor: 1e-5,
                seed: 0,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub passed: bool,
}

fn unit_direction(grad: &[Float], rng: &mut StreamRng) -> Vec<Float> {
    let gn = grad.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    let mut r: Vec<f64> = grad.iter().map(|_| rng::uniform(rng, -1.0, 1.0) as f64).collect();
    let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
    for (v, &g) in r.iter_mut().zip(grad) {
        *v /= rn;
        if gn > 0.0 {
            *v += g as f64 / gn;
        }
    }
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
    r.into_iter().map(|v| (v / n) as Float).collect()
}

/// Compares `analytic . u` with the numeric directional derivative of
/// `loss` at `point` along a direction `u` chosen from `analytic`.
///
/// `loss` receives the perturbed tensor and must be deterministic.
pub fn directional_check(
    name: &str,
    point: &Tensor,
    analytic: &[Float],
    mut loss: impl FnMut(&Tensor) -> Result<Float>,
    opts: &GradCheckOptions,
    rng: &mut StreamRng,
) -> Result<GradCheck> {
    let u = unit_direction(analytic, rng);
    let a: f64 = analytic.iter().zip(&u).map(|(&g, &d)| g as f64 * d as f64).sum();
    let mut at = |h: f64| -> Result<f64> {
        let shifted = Tensor::from_fn(point.shape(), |i| point.data()[i] + (h * u[i] as f64) as Float);
        Ok(loss(&shifted)? as f64)
    };
    let mut central = |h: f64| -> Result<f64> { Ok((at(h)? - at(-h)?) / (2.0 * h)) };
    let rel = |x: f64, y: f64| {
        let scale = x.abs().max(y.abs());
        if scale < opts.abs_floor {
            0.0
        } else {
            (x - y).abs() / scale
        }
    };
    let mut h = opts.step;
    let mut n;
    let mut attempt = 0;
    loop {
        let coarse = central(h)?;
        let fine = central(h / 2.0)?;
        n = (4.0 * fine - coarse) / 3.0;
        if attempt == opts.retries || rel(coarse, fine) <= opts.tolerance {
            break;
        }
        attempt += 1;
        h /= 10.0;
    }
    let rel_error = rel(a, n);
    Ok(GradCheck {
        name: String::from(name),
        analytic: a,
        numeric: n,
        rel_error,
        passed: rel_error <= opts.tolerance,
    })
}

/// Checks every input of a tape computation. Non-scalar outputs are reduced
/// with a fixed random weighting so every output element matters.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheck>> {
    let forward = |xs: &[Tensor], weights: Option<&Tensor>| -> Result<(Tape, Vec<Var>, Var, Tensor)> {
        let mut tape = Tape::new();
        let vars = xs
            .iter()
            .map(|x| tape.leaf(x.clone(), true))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut r = rng::stream(opts.seed, Purpose::Init, 77);
                Tensor::from_fn(tape.value(out).shape(), |_| rng::uniform(&mut r, 0.5, 1.5))
            }
        };
        let wv = tape.constant(w.clone())?;
        let prod = tape.mul(out, wv)?;
        let loss = tape.sum(prod)?;
        Ok((tape, vars, loss, w))
    };
    let (tape, vars, loss, weights) = forward(inputs, None)?;
    let grads = tape.backward(loss)?;
    let mut rng = rng::stream(opts.seed, Purpose::Init, 78);
    let mut out = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[Float]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; inputs[i].numel()]);
        let label = alloc::format!("{name}[{i}]");
        let check = directional_check(
            &label,
            &inputs[i],
            &analytic,
            |x| {
                let mut xs = inputs.to_vec();
                xs[i] = x.clone();
                let (tape, _, loss, _) = forward(&xs, Some(&weights))?;
                Ok(tape.value(loss).data()[0])
            },
            opts,
            &mut rng,
        )?;
        out.push(check);
    }
    Ok(out)
}

/// Directional checks of the training loss against every trainable model
/// parameter (including the temperature), in train mode with a fixed
/// dropout stream so repeated evaluations see the same masks.
pub fn check_model(
    model: &Model,
    pairs: &[&BitemporalSample],
    captions: &[&TextSample],
    dropout_seed: u64,
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheck>> {
    let eval = |m: &Model| -> Result<Float> {
        let mut ctx = m.context(Mode::Train, Some(rng::stream(dropout_seed, Purpose::Dropout, 0)))?;
        let loss = m.loss(&mut ctx, pairs, captions)?;
        Ok(ctx.tape.value(loss.total).data()[0])
    };
    let mut ctx = model.context(Mode::Train, Some(rng::stream(dropout_seed, Purpose::Dropout, 0)))?;
    let loss = model.loss(&mut ctx, pairs, captions)?;
    let grads = ctx.tape.backward(loss.total)?;
    let mut rng = rng::stream(opts.seed, Purpose::Init, 79);
    let mut out = Vec::new();
    for ((id, param), (_, var)) in model.params.iter().zip(ctx.vars.iter()) {
        if !ctx.tape.requires_grad(var) {
            continue;
        }
        let analytic = grads.get(var).map(<[Float]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; param.value.numel()]);
        let check = directional_check(
            &param.name,
            &param.value,
            &analytic,
            |x| {
                let mut m = model.clone();
                *m.params.get_mut(id) = x.clone();
                eval(&m)
            },
            opts,
            &mut rng,
        )?;
        out.push(check);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{FusionStrategy, TffConfig};
    use crate::model::ModelConfig;

    pub(super) fn random_pairs(n: usize, tokens: usize, dim: usize, seed: u64) -> Vec<BitemporalSample> {
        let mut r = rng::stream(seed, Purpose::Synth, 0);
        let words = ["a", "red", "block", "appears", "in", "the", "north", "scene"];
        (0..n)
            .map(|i| {
                let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng::uniform(&mut r, -1.0, 1.0));
                let (e1, e2, c1, c2) = (t(&[tokens, dim]), t(&[tokens, dim]), t(&[dim]), t(&[dim]));
                let caps = (0..5)
                    .map(|k| TextSample::new(&alloc::format!("{} {} {}", words[(i + k) % 8], words[(i * 3 + k) % 8], words[k % 8])))
                    .collect::<Result<Vec<_>>>()
                    .unwrap();
                BitemporalSample::new(alloc::format!("p{i}"), e1, e2, c1, c2, caps, true).unwrap()
            })
            .collect()
    }

    // Single precision cannot resolve the loss finely enough between
    // activation kinks; f32 builds are checked against the f64 reference.
    #[test]
    #[cfg_attr(not(feature = "f64"), ignore = "needs an f64 build")]
    fn tff_model_gradients_match_finite_differences() {
        let mut cfg = ModelConfig::new(FusionStrategy::Tff, 16, 3);
        cfg.tff = TffConfig { heads: 2, head_dim: 8, stages: 2, ..TffConfig::defaults_for(16) };
        let model = Model::new(cfg).unwrap();
        let pairs = random_pairs(4, 8, 16, 9);
        let p: Vec<_> = pairs.iter().collect();
        let c: Vec<_> = pairs.iter().map(|s| &s.captions[0]).collect();
        let checks = check_model(&model, &p, &c, 4, &GradCheckOptions::default()).unwrap();
        assert!(checks.iter().any(|c| c.name == "kappa"));
        for ch in &checks {
            assert!(ch.passed, "{ch:?}");
        }
    }
}
