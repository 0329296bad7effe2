//! The full captioner: aggregation, contrastive features and decoder, plus
//! checkpoints and attention inspection.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{collect_records, AggregationVariant, Aggregator, AttentionRecord};
use crate::autograd::{Graph, NodeId, ParamStore};
use crate::contrast::{contrastive_features, ContrastVariant, JointContext};
use crate::datagen::{GroupSample, Vocabulary};
use crate::decoder::{decode, DecodeConfig, Decoded, Decoder};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const CHECKPOINT_HEADER: &str = "GROUPCAP-CKPT v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_ff: usize,
    pub h: usize,
    pub e: usize,
    pub vocab: Vocabulary,
    pub agg: AggregationVariant,
    pub contrast: ContrastVariant,
    /// Replace the attention-derived joint context by the raw feature mean.
    pub plain_mean_context: bool,
    pub seed: u64,
    pub n_t: usize,
    pub n_r: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for feature dimension `d`.
    pub fn new(vocab: Vocabulary, d: usize) -> Self {
        ModelConfig {
            d,
            d_ff: 2 * d,
            h: 96,
            e: 32,
            vocab,
            agg: AggregationVariant::SelfAttention,
            contrast: ContrastVariant::Contrast,
            plain_mean_context: false,
            seed: 1,
            n_t: 5,
            n_r: 15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_ff == 0 || self.h == 0 || self.e == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive: d={} d_ff={} h={} e={}",
                self.d, self.d_ff, self.h, self.e
            )));
        }
        if self.n_t + self.n_r == 0 {
            return Err(Error::Config("n_t + n_r must be at least 1".into()));
        }
        Ok(())
    }

    /// Decoder input width.
    pub fn m(&self) -> usize {
        self.contrast.segments() * self.d
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to String");
        kv("d", self.d.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("h", self.h.to_string());
        kv("e", self.e.to_string());
        kv("agg", self.agg.to_string());
        kv("contrast", self.contrast.to_string());
        kv("plain_mean_context", self.plain_mean_context.to_string());
        kv("seed", self.seed.to_string());
        kv("n_t", self.n_t.to_string());
        kv("n_r", self.n_r.to_string());
        kv("vocab", self.vocab.entries().join(" "));
        s
    }

    fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::parse(format!("config is missing `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::parse(format!("config `{k}` has bad value `{v}`")))
        }
        let vocab = Vocabulary::from_file_string(&get("vocab")?.split_whitespace().collect::<Vec<_>>().join("\n"))?;
        let config = ModelConfig {
            d: num("d", get("d")?)?,
            d_ff: num("d_ff", get("d_ff")?)?,
            h: num("h", get("h")?)?,
            e: num("e", get("e")?)?,
            vocab,
            agg: get("agg")?.parse()?,
            contrast: get("contrast")?.parse()?,
            plain_mean_context: num("plain_mean_context", get("plain_mean_context")?)?,
            seed: num("seed", get("seed")?)?,
            n_t: num("n_t", get("n_t")?)?,
            n_r: num("n_r", get("n_r")?)?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Training metadata stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMeta {
    pub epoch: usize,
    pub seed: u64,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub aggregator: Aggregator,
    pub context: Option<JointContext>,
    pub decoder: Decoder,
    pub meta: TrainMeta,
}

/// Intermediate nodes of one sample's encoding.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub z: NodeId,
    pub aggregated: crate::attention::Aggregated,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let aggregator = Aggregator::new(config.agg, &mut store, config.d, config.d_ff, &mut rng)?;
        let context = if config.contrast.needs_context() {
            Some(JointContext::new(&mut store, config.d, config.d_ff, config.plain_mean_context, &mut rng)?)
        } else {
            None
        };
        let decoder = Decoder::new(&mut store, config.vocab.len(), config.m(), config.h, config.e, &mut rng)?;
        Ok(Model {
            config,
            store,
            aggregator,
            context,
            decoder,
            meta: TrainMeta::default(),
        })
    }

    fn check_features(&self, m: &Matrix, what: &str) -> Result<()> {
        if m.cols() != self.config.d {
            return Err(Error::Contract(format!(
                "{what} features have {} columns, model expects d={}",
                m.cols(),
                self.config.d
            )));
        }
        Ok(())
    }

    /// Aggregation and contrast for one group pair; `z` is `1×m`.
    pub fn encode(&self, g: &mut Graph, target: &Matrix, reference: &Matrix) -> Result<Encoded> {
        self.check_features(target, "target")?;
        self.check_features(reference, "reference")?;
        let phi_t = g.input(target.clone());
        let phi_r = g.input(reference.clone());
        let aggregated = self.aggregator.forward(g, &self.store, phi_t, phi_r)?;
        let c = match &self.context {
            Some(ctx) => Some(ctx.forward(g, &self.store, phi_t, phi_r)?),
            None => None,
        };
        let z = contrastive_features(g, aggregated.t, aggregated.r, c, self.config.contrast)?;
        Ok(Encoded { z, aggregated })
    }

    /// Mean per-token NLL over a batch of samples.
    pub fn batch_loss(&self, g: &mut Graph, samples: &[&GroupSample]) -> Result<NodeId> {
        let mut zs = Vec::with_capacity(samples.len());
        for s in samples {
            zs.push(self.encode(g, &s.target_features, &s.reference_features)?.z);
        }
        let z = g.concat_rows(&zs)?;
        let seqs: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
        self.decoder.teacher_forced_loss(g, &self.store, z, &seqs)
    }

    pub fn forward_loss(&self, sample: &GroupSample) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.batch_loss(&mut g, &[sample])?;
        Ok(g.value(loss).item())
    }

    /// Decoder input for one group pair, tape-free.
    pub fn decoder_input(&self, target: &Matrix, reference: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, target, reference)?;
        Ok(g.value(enc.z).clone())
    }

    pub fn generate(&self, target: &Matrix, reference: &Matrix, config: &DecodeConfig) -> Result<Decoded> {
        let z = self.decoder_input(target, reference)?;
        decode(&self.decoder.stepper(&self.store, &z)?, config)
    }

    pub fn caption(&self, target: &Matrix, reference: &Matrix, config: &DecodeConfig) -> Result<Vec<String>> {
        let decoded = self.generate(target, reference, config)?;
        Ok(self.config.vocab.decode(&decoded.tokens))
    }

    /// Every attention matrix the aggregator computes for `sample`.
    pub fn dump_attention(&self, sample: &GroupSample) -> Result<Vec<AttentionRecord>> {
        if self.config.agg == AggregationVariant::Average {
            return Err(Error::NoAttention(AggregationVariant::Average.tag()));
        }
        let mut g = Graph::new();
        let enc = self.encode(&mut g, &sample.target_features, &sample.reference_features)?;
        Ok(collect_records(&g, &enc.aggregated))
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::with_capacity(64 * self.store.num_scalars());
        writeln!(s, "{CHECKPOINT_HEADER}").expect("writing to String");
        s.push_str("[config]\n");
        s.push_str(&self.config.to_text());
        s.push_str("[meta]\n");
        writeln!(s, "epoch = {}", self.meta.epoch).expect("writing to String");
        writeln!(s, "seed = {}", self.meta.seed).expect("writing to String");
        writeln!(s, "final_loss = {:.16e}", self.meta.final_loss).expect("writing to String");
        s.push_str("[params]\n");
        for p in self.store.iter() {
            writeln!(s, "{} {} {}", p.name, p.value.rows(), p.value.cols()).expect("writing to String");
            for r in 0..p.value.rows() {
                let row: Vec<String> = p.value.row(r).iter().map(|v| format!("{v:.16e}")).collect();
                writeln!(s, "{}", row.join(" ")).expect("writing to String");
            }
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CHECKPOINT_HEADER => {}
            Some(h) if h.starts_with("GROUPCAP-CKPT") => return Err(Error::Version(h.trim().to_string())),
            _ => return Err(Error::parse("missing checkpoint header")),
        }
        let mut section = "";
        let mut config_pairs = Vec::new();
        let mut meta_pairs = Vec::new();
        let mut param_lines = Vec::new();
        for line in lines {
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            if t.starts_with('[') && t.ends_with(']') && section != "[params]" {
                section = match t {
                    "[config]" | "[meta]" | "[params]" => t,
                    other => return Err(Error::parse(format!("unknown section {other}"))),
                };
                continue;
            }
            match section {
                "[config]" | "[meta]" => {
                    let (k, v) = t
                        .split_once('=')
                        .ok_or_else(|| Error::parse(format!("expected `key = value`, got `{t}`")))?;
                    let pair = (k.trim().to_string(), v.trim().to_string());
                    if section == "[config]" {
                        config_pairs.push(pair);
                    } else {
                        meta_pairs.push(pair);
                    }
                }
                "[params]" => param_lines.push(t),
                _ => return Err(Error::parse(format!("content before any section: `{t}`"))),
            }
        }

        let mut model = Model::build(ModelConfig::from_pairs(&config_pairs)?)?;
        let meta_get = |k: &str| -> Result<&str> {
            meta_pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::parse(format!("meta is missing `{k}`")))
        };
        let bad_meta = |k: &str| Error::parse(format!("meta `{k}` is malformed"));
        model.meta = TrainMeta {
            epoch: meta_get("epoch")?.parse().map_err(|_| bad_meta("epoch"))?,
            seed: meta_get("seed")?.parse().map_err(|_| bad_meta("seed"))?,
            final_loss: meta_get("final_loss")?.parse().map_err(|_| bad_meta("final_loss"))?,
        };

        let mut seen = vec![false; model.store.len()];
        let mut it = param_lines.into_iter();
        while let Some(header) = it.next() {
            let fields: Vec<&str> = header.split_whitespace().collect();
            let [name, rows, cols] = fields[..] else {
                return Err(Error::parse(format!("bad parameter header `{header}`")));
            };
            let perr = |message: String| Error::Parse {
                param: Some(name.to_string()),
                message,
            };
            let rows: usize = rows.parse().map_err(|_| perr(format!("bad row count `{rows}`")))?;
            let cols: usize = cols.parse().map_err(|_| perr(format!("bad column count `{cols}`")))?;
            let id = model.store.id(name).ok_or_else(|| perr("not part of this model".into()))?;
            if seen[id.index()] {
                return Err(perr("appears twice".into()));
            }
            seen[id.index()] = true;
            let expected = model.store.value(id).shape();
            if expected != (rows, cols) {
                return Err(perr(format!("shape {rows}x{cols}, model expects {}x{}", expected.0, expected.1)));
            }
            let mut values = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let line = it.next().ok_or_else(|| perr(format!("truncated at row {r}")))?;
                for tok in line.split_whitespace() {
                    values.push(tok.parse::<f64>().map_err(|_| perr(format!("bad value `{tok}` in row {r}")))?);
                }
            }
            if values.len() != rows * cols || !values.iter().all(|v| v.is_finite()) {
                return Err(perr(format!("expected {} finite values, found {}", rows * cols, values.len())));
            }
            model.store.get_mut(id).value = Matrix::from_vec(rows, cols, values)?;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let name = model.store.iter().nth(missing).map(|p| p.name.clone());
            return Err(Error::Parse {
                param: name,
                message: "missing from checkpoint".into(),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}
