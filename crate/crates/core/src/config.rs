//! Run configuration: one flat `key = value` file covering generation,
//! model, training and decoding, plus command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attention::AggregationVariant;
use crate::contrast::ContrastVariant;
use crate::datagen::{GenConfig, SplitFractions, Vocabulary};
use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Every recognised key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "d",
    "n_samples",
    "n_t",
    "n_r",
    "noise_sigma",
    "lexicon",
    "train_frac",
    "val_frac",
    "test_frac",
    "template_weights",
    "agg",
    "contrast",
    "plain_mean_context",
    "h",
    "e",
    "d_ff",
    "train_seed",
    "epochs",
    "batch_size",
    "lr",
    "shuffle",
    "eval_every",
    "grad_clip",
    "max_len",
    "beam_width",
    "length_normalize",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub agg: AggregationVariant,
    pub contrast: ContrastVariant,
    pub plain_mean_context: bool,
    pub h: usize,
    pub e: usize,
    /// `None` means `2·d`.
    pub d_ff: Option<usize>,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        let model = ModelConfig::new(Vocabulary::from_words(Vec::<String>::new()), gen.d);
        RunConfig {
            gen,
            agg: model.agg,
            contrast: model.contrast,
            plain_mean_context: model.plain_mean_context,
            h: model.h,
            e: model.e,
            d_ff: None,
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

impl RunConfig {
    /// Defaults overlaid with `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.gen.seed = value(key, v)?,
            "d" => self.gen.d = value(key, v)?,
            "n_samples" => self.gen.n_samples = value(key, v)?,
            "n_t" => self.gen.n_t = value(key, v)?,
            "n_r" => self.gen.n_r = value(key, v)?,
            "noise_sigma" => self.gen.noise_sigma = value(key, v)?,
            "lexicon" => self.gen.lexicon = (!v.is_empty() && v != "default").then(|| PathBuf::from(v)),
            "train_frac" => self.gen.fractions.train = value(key, v)?,
            "val_frac" => self.gen.fractions.val = value(key, v)?,
            "test_frac" => self.gen.fractions.test = value(key, v)?,
            "template_weights" => {
                let w: Vec<f64> = v.split(',').map(|x| value(key, x.trim())).collect::<Result<_>>()?;
                self.gen.template_weights = w
                    .try_into()
                    .map_err(|_| Error::Config("`template_weights` needs six comma-separated values".into()))?;
            }
            "agg" => self.agg = v.parse()?,
            "contrast" => self.contrast = v.parse()?,
            "plain_mean_context" => self.plain_mean_context = value(key, v)?,
            "h" => self.h = value(key, v)?,
            "e" => self.e = value(key, v)?,
            "d_ff" => self.d_ff = if v == "auto" { None } else { Some(value(key, v)?) },
            "train_seed" => self.train.seed = value(key, v)?,
            "epochs" => self.train.epochs = value(key, v)?,
            "batch_size" => self.train.batch_size = value(key, v)?,
            "lr" => self.train.lr = value(key, v)?,
            "shuffle" => self.train.shuffle = value(key, v)?,
            "eval_every" => self.train.eval_every = value(key, v)?,
            "grad_clip" => self.train.grad_clip = if v == "none" { None } else { Some(value(key, v)?) },
            "max_len" => self.decode.max_len = value(key, v)?,
            "beam_width" => self.decode.beam_width = value(key, v)?,
            "length_normalize" => self.decode.length_normalize = value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.h == 0 || self.e == 0 || self.d_ff == Some(0) {
            return Err(Error::Config("h, e and d_ff must be positive".into()));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(2 * self.gen.d)
    }

    pub fn model_config(&self, vocab: Vocabulary) -> ModelConfig {
        ModelConfig {
            d_ff: self.d_ff(),
            h: self.h,
            e: self.e,
            agg: self.agg,
            contrast: self.contrast,
            plain_mean_context: self.plain_mean_context,
            seed: self.train.seed,
            n_t: self.gen.n_t,
            n_r: self.gen.n_r,
            ..ModelConfig::new(vocab, self.gen.d)
        }
    }

    /// Canonical text with every key; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let g = &self.gen;
        let SplitFractions { train, val, test } = g.fractions;
        let weights: Vec<String> = g.template_weights.iter().map(|w| w.to_string()).collect();
        let values: [String; 27] = [
            g.seed.to_string(),
            g.d.to_string(),
            g.n_samples.to_string(),
            g.n_t.to_string(),
            g.n_r.to_string(),
            g.noise_sigma.to_string(),
            g.lexicon
                .as_ref()
                .map_or_else(|| "default".to_string(), |p| p.display().to_string()),
            train.to_string(),
            val.to_string(),
            test.to_string(),
            weights.join(","),
            self.agg.to_string(),
            self.contrast.to_string(),
            self.plain_mean_context.to_string(),
            self.h.to_string(),
            self.e.to_string(),
            self.d_ff.map_or_else(|| "auto".to_string(), |v| v.to_string()),
            self.train.seed.to_string(),
            self.train.epochs.to_string(),
            self.train.batch_size.to_string(),
            self.train.lr.to_string(),
            self.train.shuffle.to_string(),
            self.train.eval_every.to_string(),
            self.train.grad_clip.map_or_else(|| "none".to_string(), |v| v.to_string()),
            self.decode.max_len.to_string(),
            self.decode.beam_width.to_string(),
            self.decode.length_normalize.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(s, "{k} = {v}").expect("writing to String");
        }
        s
    }

    /// Hex SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["agg=nca", "contrast = contrast1", "grad_clip=5", "d_ff=48", "template_weights=1,2,3,4,5,6"])
            .unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(c.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        assert!(matches!(RunConfig::parse("batchsize = 4"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("lr 0.1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("h = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("agg = max"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("batch_size = 0"), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        assert!(c.apply_overrides(&["epochs"]).is_err());
    }

    #[test]
    fn comments_and_hash_sensitivity() {
        let c = RunConfig::parse("# header\nepochs = 3 # short run\n\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_ne!(c.hash(), RunConfig::default().hash());
        assert_eq!(c.hash().len(), 64);
    }
}
