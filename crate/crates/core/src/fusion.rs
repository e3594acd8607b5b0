//! Fusion of bitemporal features into one vector per pair.
//!
//! * GFF: Subtraction, `f = cls_t2 - cls_t1`
//! * GFF: Concatenation, `f = [cls_t2 | cls_t1]`
//! * TFF: patch-difference cross-attention, shared stream updates for both
//!   dates, `l` residual convolutional fusion stages, then a token mean.
//!
//! Batched sequence tensors are laid out as `[batch * T x channels]`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow these when std is linked
use num_traits::Float as _;

use crate::data::BitemporalSample;
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamKind, ParamStore};
use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Float;

pub const LN_EPS: Float = 1e-5;
pub const BN_EPS: Float = 1e-5;
pub const BN_MOMENTUM: Float = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    GffSubtract,
    GffConcat,
    Tff,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [FusionStrategy::GffSubtract, FusionStrategy::GffConcat, FusionStrategy::Tff];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::GffSubtract => "gff-sub",
            FusionStrategy::GffConcat => "gff-concat",
            FusionStrategy::Tff => "tff",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy `{s}` (expected gff-sub, gff-concat or tff)")))
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::State(format!("unknown fusion code {code}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fused per-pair representation handed to the image projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub vector: Tensor,
    pub strategy: FusionStrategy,
}

/// Running-statistics update recorded during a train-mode forward pass and
/// applied afterwards, so the forward itself never mutates the model.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub tracked: ParamId,
    pub batch_mean: Vec<Float>,
    pub batch_var: Vec<Float>,
    pub count: usize,
}

impl BnUpdate {
    pub fn apply(&self, buffers: &mut ParamStore) {
        let unbias = if self.count > 1 {
            self.count as Float / (self.count - 1) as Float
        } else {
            1.0
        };
        for (r, b) in buffers.get_mut(self.mean).data_mut().iter_mut().zip(&self.batch_mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in buffers.get_mut(self.var).data_mut().iter_mut().zip(&self.batch_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
        buffers.get_mut(self.tracked).data_mut()[0] += 1.0;
    }
}

/// Everything one forward pass needs: the tape, parameter handles, the
/// read-only running statistics and the mode.
#[derive(Debug)]
pub struct Ctx<'a> {
    pub tape: Tape,
    pub vars: Bindings,
    pub buffers: &'a ParamStore,
    pub mode: Mode,
    /// Dropout stream; only consulted in train mode.
    pub rng: Option<StreamRng>,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &ParamStore, buffers: &'a ParamStore, mode: Mode, rng: Option<StreamRng>, train_frozen: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, train_frozen)?;
        Ok(Ctx {
            tape,
            vars,
            buffers,
            mode,
            rng,
            bn_updates: Vec::new(),
        })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id]
    }

    fn dropout(&mut self, x: Var, rate: Float) -> Result<Var> {
        let rng = match self.mode {
            Mode::Train => self.rng.as_mut(),
            Mode::Eval => None,
        };
        self.tape.dropout(x, rate, rng)
    }
}

pub fn gff_subtract(tape: &mut Tape, cls_t1: Var, cls_t2: Var) -> Result<Var> {
    tape.sub(cls_t2, cls_t1)
}

pub fn gff_concat(tape: &mut Tape, cls_t1: Var, cls_t2: Var) -> Result<Var> {
    if tape.value(cls_t1).shape() != tape.value(cls_t2).shape() {
        return Err(Error::shape("gff_concat", tape.value(cls_t1).shape(), tape.value(cls_t2).shape()));
    }
    tape.concat_cols(&[cls_t2, cls_t1])
}

pub fn tff_difference(tape: &mut Tape, p_t1: Var, p_t2: Var) -> Result<Var> {
    tape.sub(p_t2, p_t1)
}

/// `softmax(Q K^T / sqrt(d)) V`, independently for each of `blocks` samples.
pub fn cross_attention(tape: &mut Tape, q: Var, k: Var, v: Var, blocks: usize) -> Result<Var> {
    let d = tape.value(q).cols();
    if tape.value(k).cols() != d || tape.value(k).shape() != tape.value(v).shape() {
        return Err(Error::shape("cross_attention", tape.value(q).shape(), tape.value(k).shape()));
    }
    let scores = tape.block_matmul(q, k, blocks, true)?;
    let scaled = tape.scale(scores, 1.0 / (d as Float).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    tape.block_matmul(weights, v, blocks, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TffConfig {
    /// Number of attention heads `n`.
    pub heads: usize,
    /// Per-head dimension `d`; the fused vector has length `2d`.
    pub head_dim: usize,
    /// Number of fusion stages `l`.
    pub stages: usize,
    /// Hidden width of the stream feed-forward `g`.
    pub ffn_hidden: usize,
    pub kernel: usize,
    pub dropout: Float,
}

impl TffConfig {
    /// `n = 4`, `d = d_E / n`, `l = 3`, FFN width `2 d_E`, kernel 3, dropout 0.1.
    pub fn defaults_for(d_e: usize) -> Self {
        let heads = if d_e >= 4 { 4 } else { 1 };
        TffConfig {
            heads,
            head_dim: (d_e / heads).max(1),
            stages: 3,
            ffn_hidden: 2 * d_e,
            kernel: 3,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.stages == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("TFF heads, head dim, stages and FFN width must be >= 1".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel must be odd, got {}", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        2 * self.head_dim
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionHead {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvBn {
    pub weight: ParamId,
    pub norm: Norm,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub tracked: ParamId,
}

#[derive(Debug, Clone)]
pub struct FusionStage {
    pub convs: Vec<ConvBn>,
    pub norm: Norm,
}

/// Handles to every TFF parameter (in the model store) and running
/// statistic (in the buffer store).
#[derive(Debug, Clone)]
pub struct TffParams {
    pub config: TffConfig,
    pub embed_dim: usize,
    pub heads: Vec<AttentionHead>,
    /// `W^O`: `[(n * d) x d_E]`.
    pub w_out: ParamId,
    pub ffn: [ParamId; 4],
    pub ln_attn: Norm,
    pub ln_ffn: Norm,
    /// Shared `d_E -> d` projection applied to each updated stream before
    /// the `2d`-wide fusion stages.
    pub stream_proj: [ParamId; 2],
    pub stages: Vec<FusionStage>,
}

fn add_norm(store: &mut ParamStore, name: &str, width: usize) -> Norm {
    Norm {
        gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0), ParamKind::NoDecay),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width]), ParamKind::NoDecay),
    }
}

impl TffParams {
    pub fn register(
        config: TffConfig,
        embed_dim: usize,
        store: &mut ParamStore,
        buffers: &mut ParamStore,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        config.validate()?;
        let (e, d, n) = (embed_dim, config.head_dim, config.heads);
        let heads = (0..n)
            .map(|k| AttentionHead {
                wq: store.add_uniform(&format!("tff.attn.head{k}.wq"), &[e, d], e, rng),
                wk: store.add_uniform(&format!("tff.attn.head{k}.wk"), &[e, d], e, rng),
                wv: store.add_uniform(&format!("tff.attn.head{k}.wv"), &[e, d], e, rng),
            })
            .collect();
        let w_out = store.add_uniform("tff.attn.wo", &[n * d, e], n * d, rng);
        let h = config.ffn_hidden;
        let ffn = [
            store.add_uniform("tff.ffn.w1", &[e, h], e, rng),
            store.add_uniform("tff.ffn.b1", &[h], e, rng),
            store.add_uniform("tff.ffn.w2", &[h, e], h, rng),
            store.add_uniform("tff.ffn.b2", &[e], h, rng),
        ];
        let ln_attn = add_norm(store, "tff.ln_attn", e);
        let ln_ffn = add_norm(store, "tff.ln_ffn", e);
        let stream_proj = [
            store.add_uniform("tff.stream_proj.w", &[e, d], e, rng),
            store.add_uniform("tff.stream_proj.b", &[d], e, rng),
        ];
        let c = 2 * d;
        let k = config.kernel;
        let stages = (0..config.stages)
            .map(|s| FusionStage {
                convs: (0..3)
                    .map(|i| {
                        let name = format!("tff.stage{s}.conv{i}");
                        ConvBn {
                            weight: store.add_uniform(&format!("{name}.w"), &[c, c, k], c * k, rng),
                            norm: add_norm(store, &format!("tff.stage{s}.bn{i}"), c),
                            running_mean: buffers.add(format!("tff.stage{s}.bn{i}.running_mean"), Tensor::zeros(&[c]), ParamKind::NoDecay),
                            running_var: buffers.add(format!("tff.stage{s}.bn{i}.running_var"), Tensor::full(&[c], 1.0), ParamKind::NoDecay),
                            tracked: buffers.add(format!("tff.stage{s}.bn{i}.tracked"), Tensor::scalar(0.0), ParamKind::NoDecay),
                        }
                    })
                    .collect(),
                norm: add_norm(store, &format!("tff.stage{s}.ln"), c),
            })
            .collect();
        Ok(TffParams {
            config,
            embed_dim,
            heads,
            w_out,
            ffn,
            ln_attn,
            ln_ffn,
            stream_proj,
            stages,
        })
    }

    /// `Concat(head_1..head_n) W^O` with `head_k = CrossAttention(f W^Q_k, s W^K_k, s W^V_k)`.
    pub fn multi_head_cross_attention(&self, ctx: &mut Ctx, stream: Var, s: Var, blocks: usize) -> Result<Var> {
        let wo_rows = ctx.tape.value(ctx.var(self.w_out)).shape()[0];
        if wo_rows != self.heads.len() * self.config.head_dim {
            return Err(Error::Config(format!(
                "W^O has {wo_rows} input rows, expected n*d = {}",
                self.heads.len() * self.config.head_dim
            )));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = ctx.tape.matmul(stream, ctx.vars[head.wq])?;
            let k = ctx.tape.matmul(s, ctx.vars[head.wk])?;
            let v = ctx.tape.matmul(s, ctx.vars[head.wv])?;
            outs.push(cross_attention(&mut ctx.tape, q, k, v, blocks)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { ctx.tape.concat_cols(&outs)? };
        ctx.tape.matmul(cat, ctx.vars[self.w_out])
    }

    fn layer_norm(&self, ctx: &mut Ctx, x: Var, norm: Norm) -> Result<Var> {
        let (g, b) = (ctx.vars[norm.gain], ctx.vars[norm.bias]);
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }

    /// `f' = LN(f + MultiHead(f, s))`, `f'' = LN(f' + g(f'))`.
    pub fn stream_update(&self, ctx: &mut Ctx, stream: Var, s: Var, blocks: usize) -> Result<Var> {
        if ctx.tape.value(stream).shape() != ctx.tape.value(s).shape() {
            return Err(Error::shape("tff_stream_update", ctx.tape.value(stream).shape(), ctx.tape.value(s).shape()));
        }
        let attn = self.multi_head_cross_attention(ctx, stream, s, blocks)?;
        let res = ctx.tape.add(stream, attn)?;
        let f1 = self.layer_norm(ctx, res, self.ln_attn)?;
        let [w1, b1, w2, b2] = self.ffn.map(|id| ctx.vars[id]);
        let h = ctx.tape.matmul(f1, w1)?;
        let h = ctx.tape.add_row(h, b1)?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.tape.matmul(h, w2)?;
        let g = ctx.tape.add_row(h, b2)?;
        let res2 = ctx.tape.add(f1, g)?;
        self.layer_norm(ctx, res2, self.ln_ffn)
    }

    fn batch_norm(&self, ctx: &mut Ctx, x: Var, conv: &ConvBn) -> Result<Var> {
        let (g, b) = (ctx.vars[conv.norm.gain], ctx.vars[conv.norm.bias]);
        match ctx.mode {
            Mode::Train => {
                let rows = ctx.tape.value(x).rows();
                let (y, mean, var) = ctx.tape.batch_norm_train(x, g, b, BN_EPS)?;
                ctx.bn_updates.push(BnUpdate {
                    mean: conv.running_mean,
                    var: conv.running_var,
                    tracked: conv.tracked,
                    batch_mean: mean,
                    batch_var: var,
                    count: rows,
                });
                Ok(y)
            }
            Mode::Eval => {
                if ctx.buffers.get(conv.tracked).data()[0] <= 0.0 {
                    return Err(Error::State(String::from(
                        "batch norm in eval mode before any running statistics were accumulated",
                    )));
                }
                let mean = ctx.buffers.get(conv.running_mean).data().to_vec();
                let var = ctx.buffers.get(conv.running_var).data().to_vec();
                ctx.tape.batch_norm_eval(x, g, b, &mean, &var, BN_EPS)
            }
        }
    }

    /// Residual block `r`: three (conv -> batch norm -> [relu] -> dropout)
    /// layers over the token axis; no activation after the last one.
    pub fn residual_block(&self, ctx: &mut Ctx, stage: usize, x: Var, blocks: usize) -> Result<Var> {
        let mut h = x;
        let convs = &self.stages[stage].convs;
        for (i, conv) in convs.iter().enumerate() {
            h = ctx.tape.conv1d_tokens(h, ctx.vars[conv.weight], blocks)?;
            h = self.batch_norm(ctx, h, conv)?;
            if i + 1 < convs.len() {
                h = ctx.tape.relu(h)?;
            }
            h = ctx.dropout(h, self.config.dropout)?;
        }
        Ok(h)
    }

    /// `out = LN(c + prev + r(c + prev))`, `c = Concat(f''_t1, f''_t2)`.
    pub fn fusion_stage(&self, ctx: &mut Ctx, stage: usize, f1: Var, f2: Var, prev: Var, blocks: usize) -> Result<Var> {
        let c = ctx.tape.concat_cols(&[f1, f2])?;
        if ctx.tape.value(c).shape() != ctx.tape.value(prev).shape() {
            return Err(Error::shape("tff_fusion_stage", ctx.tape.value(c).shape(), ctx.tape.value(prev).shape()));
        }
        let x = ctx.tape.add(c, prev)?;
        let r = self.residual_block(ctx, stage, x, blocks)?;
        let sum = ctx.tape.add(x, r)?;
        self.layer_norm(ctx, sum, self.stages[stage].norm)
    }

    /// Full pipeline for `blocks` pairs stacked as `[blocks*T x d_E]`;
    /// returns `[blocks x 2d]`.
    pub fn fuse(&self, ctx: &mut Ctx, p_t1: Var, p_t2: Var, blocks: usize) -> Result<Var> {
        let s = tff_difference(&mut ctx.tape, p_t1, p_t2)?;
        let f1 = self.stream_update(ctx, p_t1, s, blocks)?;
        let f2 = self.stream_update(ctx, p_t2, s, blocks)?;
        let [pw, pb] = self.stream_proj.map(|id| ctx.vars[id]);
        let f1 = ctx.tape.matmul(f1, pw)?;
        let f1 = ctx.tape.add_row(f1, pb)?;
        let f2 = ctx.tape.matmul(f2, pw)?;
        let f2 = ctx.tape.add_row(f2, pb)?;
        let rows = ctx.tape.value(f1).rows();
        let mut prev = ctx.tape.constant(Tensor::zeros(&[rows, self.config.fused_dim()]))?;
        for stage in 0..self.stages.len() {
            prev = self.fusion_stage(ctx, stage, f1, f2, prev, blocks)?;
        }
        ctx.tape.mean_pool_tokens(prev, blocks)
    }
}

/// Stacks the patch embeddings of several pairs into `[B*T x d_E]` tensors.
pub fn stack_patches(pairs: &[&BitemporalSample]) -> Result<(Tensor, Tensor)> {
    let first = pairs.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (t, e) = (first.tokens(), first.embed_dim());
    let mut a = Vec::with_capacity(pairs.len() * t * e);
    let mut b = Vec::with_capacity(pairs.len() * t * e);
    for p in pairs {
        if p.emb_t1.shape() != [t, e] {
            return Err(Error::shape("stack_patches", &[t, e], p.emb_t1.shape()));
        }
        a.extend_from_slice(p.emb_t1.data());
        b.extend_from_slice(p.emb_t2.data());
    }
    Ok((
        Tensor::new(&[pairs.len() * t, e], a)?,
        Tensor::new(&[pairs.len() * t, e], b)?,
    ))
}

/// Stacks the global features of several pairs into `[B x d_E]` tensors.
pub fn stack_cls(pairs: &[&BitemporalSample]) -> Result<(Tensor, Tensor)> {
    let first = pairs.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let e = first.cls_t1.numel();
    let mut a = Vec::with_capacity(pairs.len() * e);
    let mut b = Vec::with_capacity(pairs.len() * e);
    for p in pairs {
        if p.cls_t1.numel() != e {
            return Err(Error::shape("stack_cls", &[e], p.cls_t1.shape()));
        }
        a.extend_from_slice(p.cls_t1.data());
        b.extend_from_slice(p.cls_t2.data());
    }
    Ok((Tensor::new(&[pairs.len(), e], a)?, Tensor::new(&[pairs.len(), e], b)?))
}
