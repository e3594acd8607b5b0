//! Gradient verification of the single-precision model against a
//! double-precision replica.
//!
//! Analytic gradients come from the f32 model. The numeric directional
//! derivatives are taken on an f64 copy with identical weights, so their
//! accuracy is not limited by f32 rounding of the loss. Dropout is disabled
//! for the comparison because the two builds draw different masks from the
//! same stream; batch norm still uses batch statistics.

use itsr_core::data::{BitemporalSample, TextSample};
use itsr_core::fusion::{FusionStrategy, Mode, TffConfig};
use itsr_core::model::{Model, ModelConfig};
use itsr_core::rng::{self, Purpose};
use itsr_core::Tensor;

use itsr_core_f64 as r64;
use r64::gradcheck::{directional_check, GradCheck, GradCheckOptions};

pub fn tensor64(t: &Tensor) -> r64::Tensor {
    r64::Tensor::new(t.shape(), t.data().iter().map(|&v| v as f64).collect()).expect("same shape and length")
}

fn strategy64(s: FusionStrategy) -> r64::fusion::FusionStrategy {
    match s {
        FusionStrategy::GffSubtract => r64::fusion::FusionStrategy::GffSubtract,
        FusionStrategy::GffConcat => r64::fusion::FusionStrategy::GffConcat,
        FusionStrategy::Tff => r64::fusion::FusionStrategy::Tff,
    }
}

pub fn config64(c: &ModelConfig) -> r64::model::ModelConfig {
    r64::model::ModelConfig {
        strategy: strategy64(c.strategy),
        image_dim: c.image_dim,
        text_dim: c.text_dim,
        vocab: c.vocab,
        tff: r64::fusion::TffConfig {
            heads: c.tff.heads,
            head_dim: c.tff.head_dim,
            stages: c.tff.stages,
            ffn_hidden: c.tff.ffn_hidden,
            kernel: c.tff.kernel,
            dropout: c.tff.dropout as f64,
        },
        head_hidden: c.head_hidden,
        head_out: c.head_out,
        clip_style_kappa: c.clip_style_kappa,
        train_text_encoder: c.train_text_encoder,
        seed: c.seed,
    }
}

/// An f64 model holding exactly the weights and buffers of `model`.
pub fn model64(model: &Model) -> r64::Result<r64::model::Model> {
    let mut m = r64::model::Model::new(config64(&model.config))?;
    for (name, t) in model.named_tensors() {
        m.assign(name, tensor64(t))?;
    }
    Ok(m)
}

pub fn sample64(s: &BitemporalSample) -> r64::Result<r64::data::BitemporalSample> {
    r64::data::BitemporalSample::new(
        s.id.clone(),
        tensor64(&s.emb_t1),
        tensor64(&s.emb_t2),
        tensor64(&s.cls_t1),
        tensor64(&s.cls_t2),
        s.captions.iter().map(caption64).collect::<r64::Result<Vec<_>>>()?,
        s.change,
    )
}

fn caption64(c: &TextSample) -> r64::Result<r64::data::TextSample> {
    r64::data::TextSample::new(&c.text)
}

/// `n` random pairs of `tokens x dim` features with short captions drawn
/// from a small vocabulary.
pub fn random_pairs(n: usize, tokens: usize, dim: usize, seed: u64) -> Vec<BitemporalSample> {
    let mut r = rng::stream(seed, Purpose::Synth, 0);
    let words = ["a", "red", "block", "appears", "in", "the", "north", "scene"];
    (0..n)
        .map(|i| {
            let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng::uniform(&mut r, -1.0, 1.0));
            let (e1, e2, c1, c2) = (t(&[tokens, dim]), t(&[tokens, dim]), t(&[dim]), t(&[dim]));
            let caps = (0..5)
                .map(|k| TextSample::new(&format!("{} {} {}", words[(i + k) % 8], words[(i * 3 + k) % 8], words[k % 8])))
                .collect::<itsr_core::Result<Vec<_>>>()
                .expect("non-empty captions");
            BitemporalSample::new(format!("p{i}"), e1, e2, c1, c2, caps, true).expect("consistent shapes")
        })
        .collect()
}

/// The small TFF configuration used for the model-level gradient check:
/// `T = 8`, `d_E = 16`, two heads, two stages, batch of four.
pub fn small_tff_check(seed: u64) -> Result<Vec<GradCheck>, String> {
    let mut cfg = ModelConfig::new(FusionStrategy::Tff, 16, seed);
    cfg.tff = TffConfig { heads: 2, head_dim: 8, stages: 2, ..TffConfig::defaults_for(16) };
    let model = Model::new(cfg).map_err(|e| e.to_string())?;
    let pairs = random_pairs(4, 8, 16, seed.wrapping_add(10));
    let p: Vec<_> = pairs.iter().collect();
    let c: Vec<_> = pairs.iter().map(|s| &s.captions[0]).collect();
    check_model(&model, &p, &c, &default_options(seed))
}

/// Tolerance for comparing f32 analytic gradients with the f64 reference.
pub fn default_options(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        tolerance: 1e-3,
        seed,
        ..GradCheckOptions::default()
    }
}

/// One directional check per trainable parameter of `model` (temperature
/// included) on the contrastive loss of `pairs` against `captions`.
pub fn check_model(
    model: &Model,
    pairs: &[&BitemporalSample],
    captions: &[&TextSample],
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheck>, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let mut ctx = model.context(Mode::Train, None).map_err(|e| err(&e))?;
    let loss = model.loss(&mut ctx, pairs, captions).map_err(|e| err(&e))?;
    let grads = ctx.tape.backward(loss.total).map_err(|e| err(&e))?;

    let reference = model64(model).map_err(|e| err(&e))?;
    let pairs64 = pairs.iter().map(|p| sample64(p)).collect::<r64::Result<Vec<_>>>().map_err(|e| err(&e))?;
    let caps64 = captions.iter().map(|c| caption64(c)).collect::<r64::Result<Vec<_>>>().map_err(|e| err(&e))?;
    let p64: Vec<_> = pairs64.iter().collect();
    let c64: Vec<_> = caps64.iter().collect();
    let eval = |m: &r64::model::Model| -> r64::Result<f64> {
        let mut ctx = m.context(r64::fusion::Mode::Train, None)?;
        let loss = m.loss(&mut ctx, &p64, &c64)?;
        Ok(ctx.tape.value(loss.total).data()[0])
    };

    let mut rng = r64::rng::stream(opts.seed, r64::rng::Purpose::Init, 79);
    let mut out = Vec::new();
    for ((_, param), (_, var)) in model.params.iter().zip(ctx.vars.iter()) {
        if !ctx.tape.requires_grad(var) {
            continue;
        }
        let analytic: Vec<f64> = match grads.get(var) {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; param.value.numel()],
        };
        let id = reference.params.id(&param.name).ok_or_else(|| format!("no `{}` in the reference", param.name))?;
        let point = reference.params.get(id).clone();
        let check = directional_check(
            &param.name,
            &point,
            &analytic,
            |x| {
                let mut m = reference.clone();
                *m.params.get_mut(id) = x.clone();
                eval(&m)
            },
            opts,
            &mut rng,
        )
        .map_err(|e| err(&e))?;
        out.push(check);
    }
    Ok(out)
}
