//! Projection heads and the bidirectional contrastive objective.

use alloc::format;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float as _;

use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Float;

pub const HIDDEN_DIM: usize = 256;
pub const OUTPUT_DIM: usize = 128;

/// Initial temperature as literally specified: logit scale `exp(0.07)`.
pub const KAPPA_INIT: Float = 0.07;
/// Limits applied to the temperature after every optimizer step.
pub const KAPPA_RANGE: (Float, Float) = (-5.0, 5.0);

/// `KAPPA_INIT`, or `ln(1 / 0.07)` for CLIP-equivalent initial sharpness.
pub fn kappa_init(clip_style: bool) -> Float {
    if clip_style {
        (1.0 / 0.07 as Float).ln()
    } else {
        KAPPA_INIT
    }
}

/// Two-layer feed-forward map `linear -> relu -> linear`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHead {
    pub d_in: usize,
    pub hidden: usize,
    pub out: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ProjectionHead {
    pub fn register(prefix: &str, d_in: usize, hidden: usize, out: usize, store: &mut ParamStore, rng: &mut StreamRng) -> Self {
        ProjectionHead {
            d_in,
            hidden,
            out,
            w1: store.add_uniform(&format!("{prefix}.w1"), &[d_in, hidden], d_in, rng),
            b1: store.add_uniform(&format!("{prefix}.b1"), &[hidden], d_in, rng),
            w2: store.add_uniform(&format!("{prefix}.w2"), &[hidden, out], hidden, rng),
            b2: store.add_uniform(&format!("{prefix}.b2"), &[out], hidden, rng),
        }
    }

    /// Projects `[rows x d_in]` features to `[rows x out]`.
    pub fn project(&self, tape: &mut Tape, vars: &Bindings, f: Var) -> Result<Var> {
        if tape.value(f).cols() != self.d_in {
            return Err(Error::shape("project", tape.value(f).shape(), &[self.d_in]));
        }
        let h = tape.matmul(f, vars[self.w1])?;
        let h = tape.add_row(h, vars[self.b1])?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, vars[self.w2])?;
        tape.add_row(o, vars[self.b2])
    }
}

/// `a . b / (|a| |b|)`.
pub fn cosine_similarity(a: &[Float], b: &[Float]) -> Result<Float> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<Float>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<Float>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero-norm vector".into()));
    }
    let dot: Float = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub image_to_text: Var,
    pub text_to_image: Var,
    pub total: Var,
}

/// Bidirectional temperature-scaled cross-entropy over the batch cosine
/// matrix `S = cos(Fx_i, Fy_j) * exp(kappa)`. `total` is the mean of both
/// directions.
pub fn contrastive_loss(tape: &mut Tape, fx: Var, fy: Var, kappa: Var) -> Result<LossVars> {
    let (sx, sy) = (tape.value(fx).shape().to_vec(), tape.value(fy).shape().to_vec());
    if sx != sy || sx.len() != 2 {
        return Err(Error::shape("contrastive_loss", &sx, &sy));
    }
    let nx = tape
        .normalize_rows(fx)
        .map_err(|e| relabel(e, "image"))?;
    let ny = tape.normalize_rows(fy).map_err(|e| relabel(e, "text"))?;
    let nyt = tape.transpose(ny)?;
    let cos = tape.matmul(nx, nyt)?;
    let scale = tape.exp(kappa)?;
    let logits = tape.scale_by(cos, scale)?;
    let image_to_text = tape.diag_cross_entropy(logits)?;
    let logits_t = tape.transpose(logits)?;
    let text_to_image = tape.diag_cross_entropy(logits_t)?;
    let sum = tape.add(image_to_text, text_to_image)?;
    let total = tape.scale(sum, 0.5)?;
    Ok(LossVars {
        image_to_text,
        text_to_image,
        total,
    })
}

fn relabel(e: Error, modality: &str) -> Error {
    match e {
        Error::Domain(msg) => Error::Domain(format!("{modality} features: {msg}")),
        other => other,
    }
}

/// Loss values `(L_xy, L_yx, L_C)` for fixed feature matrices.
pub fn contrastive_loss_values(fx: &Tensor, fy: &Tensor, kappa: Float) -> Result<(Float, Float, Float)> {
    let mut tape = Tape::new();
    let x = tape.constant(fx.clone())?;
    let y = tape.constant(fy.clone())?;
    let k = tape.constant(Tensor::scalar(kappa))?;
    let l = contrastive_loss(&mut tape, x, y, k)?;
    let v = |var| tape.value(var).data()[0];
    Ok((v(l.image_to_text), v(l.text_to_image), v(l.total)))
}
