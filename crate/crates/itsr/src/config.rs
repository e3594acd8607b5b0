//! `key = value` run configuration. Precedence: built-in defaults, then the
//! config file, then command-line flags. Unknown keys are rejected, and every
//! run writes the fully resolved configuration next to its outputs.

use std::path::{Path, PathBuf};

use itsr_core::data::SplitFractions;
use itsr_core::fusion::{FusionStrategy, TffConfig};
use itsr_core::model::ModelConfig;
use itsr_core::retrieval::Scope;
use itsr_core::synth::SynthConfig;
use itsr_core::train::TrainConfig;
use itsr_core::Float;

use crate::error::{CliError, CliResult};

/// How a manifest is divided before training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// Train, select and evaluate on every entry.
    None,
    Fractions(SplitFractions),
}

impl SplitSpec {
    fn parse(v: &str) -> Result<Self, String> {
        match v {
            "none" => Ok(SplitSpec::None),
            "levir" => Ok(SplitSpec::Fractions(SplitFractions::LEVIR_CC)),
            "dubai" => Ok(SplitSpec::Fractions(SplitFractions::DUBAI_CCD)),
            _ => {
                let parts: Vec<f64> = v
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| format!("expected none, levir, dubai or train,val,test fractions, got `{v}`"))?;
                match parts[..] {
                    [train, val, test] => Ok(SplitSpec::Fractions(SplitFractions { train, val, test })),
                    _ => Err(format!("expected three fractions, got `{v}`")),
                }
            }
        }
    }

    fn render(&self) -> String {
        match self {
            SplitSpec::None => "none".into(),
            SplitSpec::Fractions(f) => format!("{},{},{}", f.train, f.val, f.test),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub fusion: FusionStrategy,
    /// Attention heads `n`; `None` picks the default for the embedding width.
    pub heads: Option<usize>,
    /// Fusion stages `l`.
    pub fusion_stages: usize,
    pub dropout: Float,
    pub batch_size: usize,
    pub lr: Float,
    pub weight_decay: Float,
    pub momentum: Float,
    pub epochs: usize,
    pub seed: u64,
    pub clip_style_kappa: bool,
    pub train_text_encoder: bool,
    pub split: SplitSpec,
    pub nochange_keep: f64,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub k: usize,
    pub rounds: usize,
    pub scope: Option<Scope>,
    pub all_captions: bool,
    pub pairs: usize,
    pub grid: usize,
    pub patch: usize,
    pub embed_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SynthConfig::default();
        RunConfig {
            fusion: FusionStrategy::Tff,
            heads: None,
            fusion_stages: 3,
            dropout: 0.1,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            momentum: t.momentum,
            epochs: t.epochs,
            seed: t.seed,
            clip_style_kappa: false,
            train_text_encoder: false,
            split: SplitSpec::None,
            nochange_keep: 1.0,
            manifest: None,
            out: None,
            checkpoint: None,
            k: 5,
            rounds: 5,
            scope: None,
            all_captions: false,
            pairs: 16,
            grid: s.grid,
            patch: s.patch,
            embed_dim: s.embed_dim,
        }
    }
}

/// Every recognised key, in the order the resolved file is written.
pub const KEYS: [&str; 25] = [
    "fusion",
    "heads",
    "fusion_stages",
    "dropout",
    "batch_size",
    "lr",
    "weight_decay",
    "momentum",
    "epochs",
    "seed",
    "clip_style_kappa",
    "train_text_encoder",
    "split",
    "nochange_keep",
    "manifest",
    "out",
    "checkpoint",
    "k",
    "rounds",
    "scope",
    "all_captions",
    "pairs",
    "grid",
    "patch",
    "embed_dim",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("`{key}` expects a number, got `{v}`"))
}

fn positive(key: &str, v: &str) -> Result<usize, String> {
    let n: usize = num(key, v)?;
    if n == 0 {
        return Err(format!("`{key}` must be at least 1"));
    }
    Ok(n)
}

fn flag(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{v}`")),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        let r: Result<(), String> = (|| {
            match key {
                "fusion" => {
                    self.fusion = FusionStrategy::parse(v)
                        .map_err(|_| format!("unknown fusion strategy `{v}`; expected one of gff-sub, gff-concat, tff"))?
                }
                "heads" => self.heads = if v == "auto" { None } else { Some(positive(key, v)?) },
                "fusion_stages" => self.fusion_stages = positive(key, v)?,
                "dropout" => {
                    let d: Float = num(key, v)?;
                    if !(0.0..1.0).contains(&d) {
                        return Err(format!("`dropout` must be in [0, 1), got {v}"));
                    }
                    self.dropout = d;
                }
                "batch_size" => self.batch_size = positive(key, v)?,
                "lr" => self.lr = num(key, v)?,
                "weight_decay" => self.weight_decay = num(key, v)?,
                "momentum" => self.momentum = num(key, v)?,
                "epochs" => self.epochs = positive(key, v)?,
                "seed" => self.seed = num(key, v)?,
                "clip_style_kappa" => self.clip_style_kappa = flag(key, v)?,
                "train_text_encoder" => self.train_text_encoder = flag(key, v)?,
                "split" => self.split = SplitSpec::parse(v)?,
                "nochange_keep" => self.nochange_keep = num(key, v)?,
                "manifest" => self.manifest = opt_path(v),
                "out" => self.out = opt_path(v),
                "checkpoint" => self.checkpoint = opt_path(v),
                "k" => self.k = positive(key, v)?,
                "rounds" => self.rounds = positive(key, v)?,
                "scope" => {
                    self.scope = match v {
                        "all" => None,
                        _ => Some(Scope::parse(v).map_err(|_| format!("unknown scope `{v}`; expected all, full, change or no_change"))?),
                    }
                }
                "all_captions" => self.all_captions = flag(key, v)?,
                "pairs" => self.pairs = num(key, v)?,
                "grid" => self.grid = positive(key, v)?,
                "patch" => self.patch = positive(key, v)?,
                "embed_dim" => self.embed_dim = positive(key, v)?,
                _ => return Err(format!("unknown configuration key `{key}`")),
            }
            Ok(())
        })();
        r.map_err(CliError::Usage)
    }

    /// Applies a `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected `key = value`", origin.display(), i + 1)))?;
            self.set(k.trim(), v).map_err(|e| CliError::Usage(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(&text, path)
    }

    fn value(&self, key: &str) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "fusion" => self.fusion.name().into(),
            "heads" => self.heads.map_or("auto".into(), |h| h.to_string()),
            "fusion_stages" => self.fusion_stages.to_string(),
            "dropout" => self.dropout.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "momentum" => self.momentum.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "clip_style_kappa" => self.clip_style_kappa.to_string(),
            "train_text_encoder" => self.train_text_encoder.to_string(),
            "split" => self.split.render(),
            "nochange_keep" => self.nochange_keep.to_string(),
            "manifest" => path(&self.manifest),
            "out" => path(&self.out),
            "checkpoint" => path(&self.checkpoint),
            "k" => self.k.to_string(),
            "rounds" => self.rounds.to_string(),
            "scope" => self.scope.map_or("all".into(), |s| s.name().into()),
            "all_captions" => self.all_captions.to_string(),
            "pairs" => self.pairs.to_string(),
            "grid" => self.grid.to_string(),
            "patch" => self.patch.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            _ => String::new(),
        }
    }

    /// The resolved configuration as a `key = value` document that
    /// [`RunConfig::apply_text`] reads back to an equal value.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.value(k)))
            .collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join("config.txt");
        std::fs::write(&path, self.render()).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            grid: self.grid,
            patch: self.patch,
            embed_dim: self.embed_dim,
            ..SynthConfig::default()
        }
    }

    /// Model hyperparameters for `d_E`-wide embeddings.
    pub fn model_config(&self, embed_dim: usize) -> ModelConfig {
        let mut m = ModelConfig::new(self.fusion, embed_dim, self.seed);
        let defaults = TffConfig::defaults_for(embed_dim);
        let heads = self.heads.unwrap_or(defaults.heads);
        m.tff = TffConfig {
            heads,
            head_dim: (embed_dim / heads).max(1),
            stages: self.fusion_stages,
            dropout: self.dropout,
            ..defaults
        };
        m.clip_style_kappa = self.clip_style_kappa;
        m.train_text_encoder = self.train_text_encoder;
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = RunConfig::default();
        assert_eq!((c.batch_size, c.lr, c.weight_decay, c.momentum, c.epochs), (32, 0.01, 5e-4, 0.9, 30));
    }

    #[test]
    fn file_then_flags() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nfusion = gff-sub\nepochs=3  # trailing\n\nheads = 2\n", Path::new("f")).unwrap();
        c.set("epochs", "5").unwrap();
        assert_eq!(c.fusion, FusionStrategy::GffSubtract);
        assert_eq!((c.epochs, c.heads), (5, Some(2)));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let mut c = RunConfig::default();
        let e = c.apply_text("colour = red", Path::new("f")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("unknown configuration key"));
        let e = c.set("fusion", "bogus").unwrap_err();
        assert!(e.to_string().contains("gff-sub, gff-concat, tff"));
        assert!(c.set("k", "0").is_err());
        assert!(c.set("split", "0.5,0.5").is_err());
        assert!(c.apply_text("novalue", Path::new("f")).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut c = RunConfig::default();
        c.set("fusion", "gff-concat").unwrap();
        c.set("split", "levir").unwrap();
        c.set("scope", "change").unwrap();
        c.set("manifest", "data/m.jsonl").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.render(), Path::new("resolved")).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn model_config_uses_the_flags() {
        let mut c = RunConfig::default();
        c.set("heads", "2").unwrap();
        c.set("fusion_stages", "2").unwrap();
        let m = c.model_config(16);
        assert_eq!((m.tff.heads, m.tff.head_dim, m.tff.stages), (2, 8, 2));
    }
}
