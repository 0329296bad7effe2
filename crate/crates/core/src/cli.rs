//! Batch commands behind the `groupcap` binary. Each command writes its
//! artifacts plus a `run.json` provenance record into an output directory.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::AggregationVariant;
use crate::config::RunConfig;
use crate::datagen::{
    generate_corpus, inject_noise_images, read_jsonl, select_split, write_jsonl, GroupSample, NoisePool, Split,
    Vocabulary,
};
use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_corpus, tokenize, MetricReport, TokenizedPair};
use crate::model::Model;
use crate::trainer::{evaluate, train_with_progress, EpochLog, TrainingLog};

pub const SEED_ENV: &str = "GROUPCAP_SEED";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const RUN_FILE: &str = "run.json";

/// Target and reference counts of the ablation grid.
pub const ABLATION_TARGETS: [usize; 4] = [0, 1, 3, 5];
pub const ABLATION_REFERENCES: [usize; 4] = [0, 5, 10, 15];

/// An explicit seed, else `GROUPCAP_SEED`, else `None`.
pub fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    version: &'a str,
    inputs: BTreeMap<&'a str, String>,
}

fn write_run_record(out_dir: &Path, command: &str, config: &RunConfig, seed: u64, inputs: &[(&str, &Path)]) -> Result<()> {
    let record = RunRecord {
        command,
        config_hash: config.hash(),
        seed,
        version: env!("CARGO_PKG_VERSION"),
        inputs: inputs.iter().map(|(k, p)| (*k, p.display().to_string())).collect(),
    };
    fs::write(out_dir.join("config.txt"), config.to_text())?;
    fs::write(out_dir.join(RUN_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

/// A generated dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<GroupSample>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let samples = read_jsonl(&dir.join(SAMPLES_FILE))?;
        let vocab = Vocabulary::from_file_string(&fs::read_to_string(dir.join(VOCAB_FILE))?)?;
        Ok(Dataset { samples, vocab })
    }

    pub fn split(&self, split: Split) -> Vec<GroupSample> {
        select_split(&self.samples, split)
    }

    /// Feature dimension shared by every sample.
    pub fn dim(&self) -> Result<usize> {
        let d = self
            .samples
            .first()
            .map(|s| s.target_features.cols())
            .ok_or_else(|| Error::Contract("dataset is empty".into()))?;
        if self.samples.iter().any(|s| s.target_features.cols() != d || s.reference_features.cols() != d) {
            return Err(Error::Contract("samples disagree on the feature dimension".into()));
        }
        Ok(d)
    }

    /// Looks a sample up by id.
    pub fn sample(&self, id: usize) -> Result<&GroupSample> {
        self.samples
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::Config(format!("no sample with id {id}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatagenReport {
    pub n_samples: usize,
    pub vocab_size: usize,
    pub split_counts: BTreeMap<String, usize>,
    pub template_counts: BTreeMap<String, usize>,
}

pub fn cmd_datagen(config: &RunConfig, out_dir: &Path) -> Result<DatagenReport> {
    fs::create_dir_all(out_dir)?;
    let corpus = generate_corpus(&config.gen)?;
    write_jsonl(&corpus.samples, &out_dir.join(SAMPLES_FILE))?;
    fs::write(out_dir.join(VOCAB_FILE), corpus.vocab.to_file_string())?;
    let mut report = DatagenReport {
        n_samples: corpus.samples.len(),
        vocab_size: corpus.vocab.len(),
        split_counts: BTreeMap::new(),
        template_counts: BTreeMap::new(),
    };
    for s in &corpus.samples {
        *report.split_counts.entry(s.split.as_str().to_string()).or_default() += 1;
        *report.template_counts.entry(s.template.to_string()).or_default() += 1;
    }
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_run_record(out_dir, "datagen", config, config.gen.seed, &[])?;
    Ok(report)
}

fn check_dim(config: &RunConfig, data: &Dataset) -> Result<()> {
    let d = data.dim()?;
    if d != config.gen.d {
        return Err(Error::Config(format!("config has d={} but the dataset has d={d}", config.gen.d)));
    }
    Ok(())
}

/// Trains on the train split, validating on val. Writes the checkpoint and
/// the CSV log.
pub fn cmd_train(
    config: &RunConfig,
    dataset: &Path,
    out_dir: &Path,
    progress: impl FnMut(&EpochLog),
) -> Result<TrainingLog> {
    let data = Dataset::load(dataset)?;
    check_dim(config, &data)?;
    fs::create_dir_all(out_dir)?;
    let mut model = Model::build(config.model_config(data.vocab.clone()))?;
    let log = train_with_progress(
        &mut model,
        &data.split(Split::Train),
        &data.split(Split::Val),
        &config.train,
        progress,
    )?;
    model.save(&out_dir.join(CHECKPOINT_FILE))?;
    fs::write(out_dir.join(TRAIN_LOG_FILE), log.to_csv())?;
    write_run_record(out_dir, "train", config, config.train.seed, &[("dataset", dataset)])?;
    Ok(log)
}

/// What `cmd_eval` scores.
#[derive(Clone, Debug)]
pub enum EvalSource {
    Checkpoint(PathBuf),
    /// One caption per line, aligned with the split's samples.
    Predictions(PathBuf),
}

pub fn cmd_eval(config: &RunConfig, dataset: &Path, source: &EvalSource, split: Split, out_dir: &Path) -> Result<MetricReport> {
    let data = Dataset::load(dataset)?;
    let samples = data.split(split);
    if samples.is_empty() {
        return Err(Error::Contract(format!("{} split is empty", split.as_str())));
    }
    let (report, input) = match source {
        EvalSource::Checkpoint(path) => (evaluate(&Model::load(path)?, &samples, &config.decode)?, path),
        EvalSource::Predictions(path) => {
            let text = fs::read_to_string(path)?;
            let lines: Vec<&str> = text.lines().collect();
            if lines.len() != samples.len() {
                return Err(Error::Contract(format!(
                    "{} predictions for {} {} samples",
                    lines.len(),
                    samples.len(),
                    split.as_str()
                )));
            }
            let pairs = lines
                .iter()
                .zip(&samples)
                .map(|(line, s)| TokenizedPair::new(tokenize(line), s.caption.clone()))
                .collect::<Result<Vec<_>>>()?;
            (evaluate_corpus(&pairs)?, path)
        }
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out_dir.join("metrics.txt"), report.to_string())?;
    write_run_record(out_dir, "eval", config, config.train.seed, &[("dataset", dataset), ("source", input)])?;
    Ok(report)
}

/// Captions one sample. `beam_width = 1` decodes greedily.
pub fn cmd_caption(ckpt: &Path, dataset: &Path, sample_id: usize, decode: &DecodeConfig, out_dir: &Path) -> Result<String> {
    let data = Dataset::load(dataset)?;
    let model = Model::load(ckpt)?;
    let sample = data.sample(sample_id)?;
    let caption = model
        .caption(&sample.target_features, &sample.reference_features, decode)?
        .join(" ");
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("caption.txt"), format!("{caption}\n"))?;
    let mut config = RunConfig {
        decode: *decode,
        ..RunConfig::default()
    };
    config.train.seed = model.meta.seed;
    write_run_record(out_dir, "caption", &config, model.meta.seed, &[("checkpoint", ckpt), ("dataset", dataset)])?;
    Ok(caption)
}

/// Six significant digits, as a JSON number.
fn sig6(x: f64) -> String {
    format!("{x:.5e}")
}

/// Renders the attention matrices of one sample as JSON.
pub fn attention_json(sample: &GroupSample, variant: AggregationVariant, records: &[crate::attention::AttentionRecord]) -> String {
    let mut s = String::new();
    write!(
        s,
        "{{\n  \"sample_id\": {},\n  \"caption\": {},\n  \"agg\": \"{}\",\n  \"matrices\": [",
        sample.id,
        serde_json::Value::String(sample.caption_text()),
        variant
    )
    .expect("writing to String");
    for (i, r) in records.iter().enumerate() {
        let rows: Vec<String> = (0..r.weights.rows())
            .map(|k| format!("[{}]", r.weights.row(k).iter().map(|&x| sig6(x)).collect::<Vec<_>>().join(", ")))
            .collect();
        write!(
            s,
            "{}\n    {{\"name\": \"{}\", \"rows\": {}, \"cols\": {}, \"weights\": [\n      {}\n    ]}}",
            if i > 0 { "," } else { "" },
            r.name,
            r.weights.rows(),
            r.weights.cols(),
            rows.join(",\n      ")
        )
        .expect("writing to String");
    }
    s.push_str("\n  ]\n}\n");
    s
}

pub fn cmd_attention(ckpt: &Path, dataset: &Path, sample_id: usize, out_dir: &Path) -> Result<String> {
    let data = Dataset::load(dataset)?;
    let model = Model::load(ckpt)?;
    let sample = data.sample(sample_id)?;
    let records = model.dump_attention(sample)?;
    let json = attention_json(sample, model.config.agg, &records);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("attention.json"), &json)?;
    let mut config = RunConfig::default();
    config.train.seed = model.meta.seed;
    write_run_record(out_dir, "attention", &config, model.meta.seed, &[("checkpoint", ckpt), ("dataset", dataset)])?;
    Ok(json)
}

/// Loads `path` if it exists, else builds, trains and saves a model.
fn cached_model(
    path: &Path,
    config: &RunConfig,
    vocab: &Vocabulary,
    train: &[GroupSample],
    val: &[GroupSample],
) -> Result<Model> {
    if path.exists() {
        return Model::load(path);
    }
    let mut model = Model::build(config.model_config(vocab.clone()))?;
    train_with_progress(&mut model, train, val, &config.train, |_| {})?;
    model.save(path)?;
    Ok(model)
}

fn subsample_all(samples: &[GroupSample], n_t: usize, n_r: usize) -> Result<Vec<GroupSample>> {
    samples.iter().map(|s| s.subsample(n_t, n_r)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub n_t: usize,
    pub n_r: usize,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn get(&self, n_t: usize, n_r: usize) -> Option<&MetricReport> {
        self.cells
            .iter()
            .find(|c| c.n_t == n_t && c.n_r == n_r)
            .map(|c| &c.report)
    }
}

impl fmt::Display for AblationTable {
    /// WordAcc grid, targets down and references across.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut ts: Vec<usize> = self.cells.iter().map(|c| c.n_t).collect();
        let mut rs: Vec<usize> = self.cells.iter().map(|c| c.n_r).collect();
        ts.sort_unstable();
        ts.dedup();
        rs.sort_unstable();
        rs.dedup();
        write!(f, "{:<8}", "WordAcc")?;
        for r in &rs {
            write!(f, "{:>9}", format!("Ref{r}"))?;
        }
        writeln!(f)?;
        for t in &ts {
            write!(f, "{:<8}", format!("Tgt{t}"))?;
            for r in &rs {
                match self.get(*t, *r) {
                    Some(m) => write!(f, "{:>9.2}", m.word_acc)?,
                    None => write!(f, "{:>9}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Retrains and evaluates one model per `(n_t, n_r)` cell. Empty groups
/// are fed as a zero row. Checkpoints are cached in `ckpt_dir` under a name
/// that includes the config hash.
pub fn cmd_ablate(
    config: &RunConfig,
    dataset: &Path,
    ckpt_dir: &Path,
    cells: &[(usize, usize)],
    out_dir: &Path,
) -> Result<AblationTable> {
    let data = Dataset::load(dataset)?;
    check_dim(config, &data)?;
    fs::create_dir_all(ckpt_dir)?;
    fs::create_dir_all(out_dir)?;
    let (train, val, test) = (data.split(Split::Train), data.split(Split::Val), data.split(Split::Test));
    let tag = &config.hash()[..12];
    let mut table = AblationTable { cells: Vec::new() };
    for &(n_t, n_r) in cells {
        if n_t + n_r == 0 {
            return Err(Error::Config("the Tgt0+Ref0 cell has no input".into()));
        }
        let ckpt = ckpt_dir.join(format!("ablate-t{n_t}-r{n_r}-{tag}.ckpt"));
        let model = cached_model(
            &ckpt,
            config,
            &data.vocab,
            &subsample_all(&train, n_t, n_r)?,
            &subsample_all(&val, n_t, n_r)?,
        )?;
        let report = evaluate(&model, &subsample_all(&test, n_t, n_r)?, &config.decode)?;
        table.cells.push(AblationCell { n_t, n_r, report });
    }
    fs::write(out_dir.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    fs::write(out_dir.join("ablation.txt"), table.to_string())?;
    write_run_record(out_dir, "ablate", config, config.train.seed, &[("dataset", dataset), ("ckpt_dir", ckpt_dir)])?;
    Ok(table)
}

/// The full `{0,1,3,5} × {0,5,10,15}` grid minus the input-free corner.
pub fn default_ablation_cells() -> Vec<(usize, usize)> {
    ABLATION_TARGETS
        .iter()
        .flat_map(|&t| ABLATION_REFERENCES.iter().map(move |&r| (t, r)))
        .filter(|&(t, r)| t + r > 0)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseCell {
    pub k_train: usize,
    pub k_test: usize,
    pub word_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseGrid {
    pub cells: Vec<NoiseCell>,
}

impl fmt::Display for NoiseGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut tests: Vec<usize> = self.cells.iter().map(|c| c.k_test).collect();
        tests.sort_unstable();
        tests.dedup();
        write!(f, "{:<10}", "train\\test")?;
        for k in &tests {
            write!(f, "{k:>8}")?;
        }
        writeln!(f)?;
        let mut trains: Vec<usize> = self.cells.iter().map(|c| c.k_train).collect();
        trains.dedup();
        for kt in trains {
            write!(f, "{kt:<10}")?;
            for k in &tests {
                match self.cells.iter().find(|c| c.k_train == kt && c.k_test == *k) {
                    Some(c) => write!(f, "{:>8.2}", c.word_acc)?,
                    None => write!(f, "{:>8}", "-")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn with_noise(samples: &[GroupSample], k: usize, pool: &NoisePool, seed: u64) -> Result<Vec<GroupSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.iter().map(|s| inject_noise_images(s, k, pool, &mut rng)).collect()
}

/// Trains with `k_train` unrelated images in every target group and tests
/// with `k_test`, for every pair. Models are cached per `k_train`.
pub fn cmd_noise(
    config: &RunConfig,
    dataset: &Path,
    ckpt_dir: &Path,
    k_train: &[usize],
    k_test: &[usize],
    out_dir: &Path,
) -> Result<NoiseGrid> {
    let data = Dataset::load(dataset)?;
    check_dim(config, &data)?;
    fs::create_dir_all(ckpt_dir)?;
    fs::create_dir_all(out_dir)?;
    let (train, val, test) = (data.split(Split::Train), data.split(Split::Val), data.split(Split::Test));
    let (train_pool, test_pool) = (NoisePool::from_samples(&train), NoisePool::from_samples(&test));
    let seed = config.train.seed;
    let tag = &config.hash()[..12];
    let mut grid = NoiseGrid { cells: Vec::new() };
    for &kt in k_train {
        let ckpt = ckpt_dir.join(format!("noise-k{kt}-{tag}.ckpt"));
        let model = cached_model(
            &ckpt,
            config,
            &data.vocab,
            &with_noise(&train, kt, &train_pool, seed ^ 0x7261)?,
            &with_noise(&val, kt, &train_pool, seed ^ 0x7661)?,
        )?;
        for &ke in k_test {
            let noisy = with_noise(&test, ke, &test_pool, seed ^ 0x7465 ^ ((ke as u64) << 8))?;
            let word_acc = evaluate(&model, &noisy, &config.decode)?.word_acc;
            grid.cells.push(NoiseCell {
                k_train: kt,
                k_test: ke,
                word_acc,
            });
        }
    }
    fs::write(out_dir.join("noise.json"), serde_json::to_string_pretty(&grid)? + "\n")?;
    fs::write(out_dir.join("noise.txt"), grid.to_string())?;
    write_run_record(out_dir, "noise", config, seed, &[("dataset", dataset), ("ckpt_dir", ckpt_dir)])?;
    Ok(grid)
}
