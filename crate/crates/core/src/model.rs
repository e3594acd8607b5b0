//! The full text / bitemporal-image model and its trainable state.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{BitemporalSample, TextSample};
use crate::encoders::{position_offset, ToyTextEncoder, TEXT_TABLE};
use crate::error::{Error, Result};
use crate::fusion::{self, Ctx, FusedFeature, FusionStrategy, Mode, TffConfig, TffParams};
use crate::heads::{self, contrastive_loss, LossVars, ProjectionHead, KAPPA_RANGE};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::{self, Purpose, StreamRng};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::Float;

/// Maximum rows pushed through one eval-mode forward pass.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub strategy: FusionStrategy,
    /// Width of the image patch / class-token features.
    pub image_dim: usize,
    /// Width of the toy text embeddings.
    pub text_dim: usize,
    pub vocab: usize,
    pub tff: TffConfig,
    pub head_hidden: usize,
    pub head_out: usize,
    pub clip_style_kappa: bool,
    pub train_text_encoder: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(strategy: FusionStrategy, image_dim: usize, seed: u64) -> Self {
        ModelConfig {
            strategy,
            image_dim,
            text_dim: image_dim,
            vocab: 4096,
            tff: TffConfig::defaults_for(image_dim),
            head_hidden: heads::HIDDEN_DIM,
            head_out: heads::OUTPUT_DIM,
            clip_style_kappa: false,
            train_text_encoder: false,
            seed,
        }
    }

    pub fn fused_dim(&self) -> usize {
        match self.strategy {
            FusionStrategy::GffSubtract => self.image_dim,
            FusionStrategy::GffConcat => 2 * self.image_dim,
            FusionStrategy::Tff => self.tff.fused_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_dim == 0 || self.text_dim == 0 || self.vocab == 0 || self.head_hidden == 0 || self.head_out == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.strategy == FusionStrategy::Tff {
            self.tff.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// Trainable parameters (and the optionally trainable text table).
    pub params: ParamStore,
    /// Batch-norm running statistics.
    pub buffers: ParamStore,
    pub tff: Option<TffParams>,
    pub image_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub kappa: ParamId,
    pub text_encoder: ToyTextEncoder,
    pub text_table: ParamId,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut rng = rng::stream(config.seed, Purpose::Init, 0);
        let tff = match config.strategy {
            FusionStrategy::Tff => Some(TffParams::register(config.tff, config.image_dim, &mut params, &mut buffers, &mut rng)?),
            _ => None,
        };
        let image_head = ProjectionHead::register("head.image", config.fused_dim(), config.head_hidden, config.head_out, &mut params, &mut rng);
        let text_head = ProjectionHead::register("head.text", config.text_dim, config.head_hidden, config.head_out, &mut params, &mut rng);
        let kappa = params.add("kappa", Tensor::scalar(heads::kappa_init(config.clip_style_kappa)), ParamKind::NoDecay);
        let text_encoder = ToyTextEncoder {
            vocab: config.vocab,
            dim: config.text_dim,
        };
        text_encoder.register(&mut params, config.seed);
        let text_table = params.id(TEXT_TABLE).expect("just registered");
        Ok(Model {
            config,
            params,
            buffers,
            tff,
            image_head,
            text_head,
            kappa,
            text_encoder,
            text_table,
        })
    }

    pub fn kappa(&self) -> Float {
        self.params.get(self.kappa).data()[0]
    }

    pub fn clamp_kappa(&mut self) {
        let k = &mut self.params.get_mut(self.kappa).data_mut()[0];
        *k = k.clamp(KAPPA_RANGE.0, KAPPA_RANGE.1);
    }

    pub fn context(&self, mode: Mode, rng: Option<StreamRng>) -> Result<Ctx<'_>> {
        Ctx::new(&self.params, &self.buffers, mode, rng, self.config.train_text_encoder)
    }

    fn check_pairs(&self, pairs: &[&BitemporalSample]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        for p in pairs {
            if p.embed_dim() != self.config.image_dim {
                return Err(Error::Config(format!(
                    "pair `{}` has feature width {}, model expects {}",
                    p.id,
                    p.embed_dim(),
                    self.config.image_dim
                )));
            }
        }
        Ok(())
    }

    /// Fused features `[B x d_fused]` for a batch of pairs.
    pub fn fuse(&self, ctx: &mut Ctx, pairs: &[&BitemporalSample]) -> Result<Var> {
        self.check_pairs(pairs)?;
        match self.config.strategy {
            FusionStrategy::GffSubtract | FusionStrategy::GffConcat => {
                let (c1, c2) = fusion::stack_cls(pairs)?;
                let c1 = ctx.tape.constant(c1)?;
                let c2 = ctx.tape.constant(c2)?;
                if self.config.strategy == FusionStrategy::GffSubtract {
                    fusion::gff_subtract(&mut ctx.tape, c1, c2)
                } else {
                    fusion::gff_concat(&mut ctx.tape, c1, c2)
                }
            }
            FusionStrategy::Tff => {
                let t = pairs[0].tokens();
                if pairs.iter().any(|p| p.tokens() != t) {
                    return Err(Error::Contract("all pairs in a TFF batch need the same token count".into()));
                }
                let (p1, p2) = fusion::stack_patches(pairs)?;
                let p1 = ctx.tape.constant(p1)?;
                let p2 = ctx.tape.constant(p2)?;
                let tff = self.tff.as_ref().expect("TFF parameters present");
                tff.fuse(ctx, p1, p2, pairs.len())
            }
        }
    }

    /// Projected image-pair features `[B x out]`.
    pub fn forward_images(&self, ctx: &mut Ctx, pairs: &[&BitemporalSample]) -> Result<Var> {
        let fused = self.fuse(ctx, pairs)?;
        self.image_head.project(&mut ctx.tape, &ctx.vars, fused)
    }

    /// Encoded (pre-head) sentence features `[B x text_dim]`.
    pub fn encode_text_tokens(&self, ctx: &mut Ctx, captions: &[&TextSample]) -> Result<Var> {
        if captions.is_empty() {
            return Err(Error::Contract("empty caption batch".into()));
        }
        let dim = self.config.text_dim;
        let mut ids = Vec::new();
        let mut lengths = Vec::with_capacity(captions.len());
        let mut offsets = Vec::new();
        for c in captions {
            lengths.push(c.words.len());
            ids.extend(self.text_encoder.buckets(&c.words));
            for t in 0..c.words.len() {
                offsets.extend((0..dim).map(|j| position_offset(t, j, dim)));
            }
        }
        let rows = self.text_rows(ctx, &ids)?;
        let pos = ctx.tape.constant(Tensor::new(&[ids.len(), dim], offsets)?)?;
        let summed = ctx.tape.add(rows, pos)?;
        let tokens = ctx.tape.tanh(summed)?;
        ctx.tape.segment_mean(tokens, &lengths)
    }

    fn text_rows(&self, ctx: &mut Ctx, ids: &[usize]) -> Result<Var> {
        let table = ctx.vars[self.text_table];
        ctx.tape.gather_rows(table, ids)
    }

    /// Projected sentence features `[B x out]`.
    pub fn forward_texts(&self, ctx: &mut Ctx, captions: &[&TextSample]) -> Result<Var> {
        let enc = self.encode_text_tokens(ctx, captions)?;
        self.text_head.project(&mut ctx.tape, &ctx.vars, enc)
    }

    /// Contrastive loss for aligned `(pair, caption)` rows.
    pub fn loss(&self, ctx: &mut Ctx, pairs: &[&BitemporalSample], captions: &[&TextSample]) -> Result<LossVars> {
        if pairs.len() != captions.len() {
            return Err(Error::shape("loss", &[pairs.len()], &[captions.len()]));
        }
        let fx = self.forward_images(ctx, pairs)?;
        let fy = self.forward_texts(ctx, captions)?;
        let kappa = ctx.vars[self.kappa];
        contrastive_loss(&mut ctx.tape, fx, fy, kappa)
    }

    /// Eval-mode projected image features, one row per pair.
    pub fn image_features(&self, pairs: &[&BitemporalSample]) -> Result<Tensor> {
        self.eval_rows(pairs.len(), |ctx, range| self.forward_images(ctx, &pairs[range]))
    }

    /// Projected sentence features, one row per caption.
    pub fn text_features(&self, captions: &[&TextSample]) -> Result<Tensor> {
        self.eval_rows(captions.len(), |ctx, range| self.forward_texts(ctx, &captions[range]))
    }

    fn eval_rows(&self, n: usize, mut f: impl FnMut(&mut Ctx, core::ops::Range<usize>) -> Result<Var>) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Contract("no inputs to encode".into()));
        }
        let mut data = Vec::with_capacity(n * self.config.head_out);
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let mut ctx = self.context(Mode::Eval, None)?;
            let out = f(&mut ctx, start..end)?;
            data.extend_from_slice(ctx.tape.value(out).data());
            start = end;
        }
        Tensor::new(&[n, self.config.head_out], data)
    }

    /// Fused representation of a single pair.
    pub fn fuse_pair(&self, pair: &BitemporalSample, mode: Mode, rng: Option<StreamRng>) -> Result<FusedFeature> {
        let mut ctx = self.context(mode, rng)?;
        let v = self.fuse(&mut ctx, &[pair])?;
        let t = ctx.tape.value(v).clone();
        Ok(FusedFeature {
            vector: t.reshape(&[self.config.fused_dim()])?,
            strategy: self.config.strategy,
        })
    }

    /// Every named tensor that makes up the model (parameters then buffers).
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor)> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(_, p)| (p.name.as_str(), &p.value))
            .collect()
    }

    /// Loads a named tensor into either store, rejecting unknown names and
    /// shape drift.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.id(name).is_some() {
            self.params.assign(name, value)
        } else {
            self.buffers.assign(name, value)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::toy_text_encoder;

    fn sample(id: &str, t: usize, e: usize, seed: u64, change: bool) -> BitemporalSample {
        let mut r = rng::stream(seed, Purpose::Synth, 0);
        let a = Tensor::from_fn(&[t, e], |_| rng::uniform(&mut r, -1.0, 1.0));
        let b = if change {
            Tensor::from_fn(&[t, e], |_| rng::uniform(&mut r, -1.0, 1.0))
        } else {
            a.clone()
        };
        let caps = (0..5).map(|i| TextSample::new(&format!("caption number {i} for {id}")).unwrap()).collect();
        BitemporalSample::new(id.into(), a.clone(), b.clone(), crate::data::mean_row(&a), crate::data::mean_row(&b), caps, change).unwrap()
    }

    #[test]
    fn text_path_matches_standalone_encoder() {
        let cfg = ModelConfig::new(FusionStrategy::GffSubtract, 8, 11);
        let model = Model::new(cfg).unwrap();
        let caption = TextSample::new("a red block appears in the north west").unwrap();
        let mut ctx = model.context(Mode::Eval, None).unwrap();
        let enc = model.encode_text_tokens(&mut ctx, &[&caption]).unwrap();
        let (cls, _) = toy_text_encoder(&caption.words, cfg.vocab, cfg.text_dim, cfg.seed).unwrap();
        assert!(ctx.tape.value(enc).max_abs_diff(&cls) < 1e-6);
    }

    #[test]
    fn fused_widths_per_strategy() {
        let p = sample("a", 6, 8, 1, true);
        for (strategy, width) in [(FusionStrategy::GffSubtract, 8), (FusionStrategy::GffConcat, 16), (FusionStrategy::Tff, 4)] {
            let mut model = Model::new(ModelConfig::new(strategy, 8, 3)).unwrap();
            // Warm the batch-norm statistics so eval mode is allowed.
            let mut ctx = model.context(Mode::Train, Some(rng::stream(0, Purpose::Dropout, 0))).unwrap();
            model.fuse(&mut ctx, &[&p]).unwrap();
            let updates = ctx.bn_updates;
            for u in &updates {
                u.apply(&mut model.buffers);
            }
            let f = model.fuse_pair(&p, Mode::Eval, None).unwrap();
            assert_eq!(f.vector.numel(), width, "{strategy:?}");
        }
    }

    #[test]
    fn eval_before_statistics_is_a_state_error() {
        let model = Model::new(ModelConfig::new(FusionStrategy::Tff, 8, 3)).unwrap();
        let p = sample("a", 4, 8, 1, true);
        assert!(matches!(model.fuse_pair(&p, Mode::Eval, None), Err(Error::State(_))));
    }

    #[test]
    fn feature_width_mismatch_is_rejected() {
        let model = Model::new(ModelConfig::new(FusionStrategy::GffConcat, 8, 3)).unwrap();
        let p = sample("a", 4, 6, 1, true);
        assert!(matches!(model.image_features(&[&p]), Err(Error::Config(_))));
    }
}
