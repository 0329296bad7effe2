//! Synthetic group-captioning corpus.
//!
//! Every "image" is a feature vector synthesized from a scene graph as the
//! sum of fixed unit-norm word prototypes plus isotropic Gaussian noise.
//! Target images share the target graph exactly; reference images share only
//! its subject. Generation is deterministic in the seed: sample `i` draws from
//! its own stream seeded with `seed ^ i`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegraph::{flatten, matches_fully, CaptionTemplate, Lexicon, SceneGraph};
use crate::tensor::Matrix;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;
const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const PROTOTYPE_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;

/// Word ↔ id map with the four reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from an arbitrary word stream; entries are sorted and deduplicated.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        Self::from_ordered(set.into_iter().collect())
    }

    fn from_ordered(entries: Vec<String>) -> Self {
        let words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(entries).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Non-reserved entries in id order.
    pub fn entries(&self) -> &[String] {
        &self.words[NUM_RESERVED..]
    }

    /// `BOS w… EOS`; out-of-vocabulary words map to UNK.
    pub fn encode<S: AsRef<str>>(&self, caption: &[S]) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(caption.iter().map(|w| self.id(w.as_ref()).unwrap_or(UNK)))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Surface words for `ids`, dropping PAD/BOS/EOS. UNK renders as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.word(id).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// One non-reserved word per line; line `k` holds id `k + 4`.
    pub fn to_file_string(&self) -> String {
        self.entries().iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let entries: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
        let unique: BTreeSet<&String> = entries.iter().collect();
        if unique.len() != entries.len() || entries.iter().any(|w| RESERVED.contains(&w.as_str())) {
            return Err(Error::parse("vocabulary has duplicate or reserved entries"));
        }
        Ok(Self::from_ordered(entries))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    /// 2000 / 200 / 200 out of 2400.
    fn default() -> Self {
        SplitFractions {
            train: 10.0 / 12.0,
            val: 1.0 / 12.0,
            test: 1.0 / 12.0,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must lie in [0,1] and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub d: usize,
    pub n_samples: usize,
    pub n_t: usize,
    pub n_r: usize,
    pub noise_sigma: f64,
    /// `None` uses the bundled lexicon.
    pub lexicon: Option<PathBuf>,
    pub fractions: SplitFractions,
    /// Relative frequency of each template, indexed like [`CaptionTemplate::ALL`].
    pub template_weights: [f64; 6],
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 17,
            d: 32,
            n_samples: 2400,
            n_t: 5,
            n_r: 15,
            noise_sigma: 0.3,
            lexicon: None,
            fractions: SplitFractions::default(),
            template_weights: [46810.0, 24890.0, 18466.0, 55124.0, 30944.0, 23208.0],
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.fractions.validate()?;
        if self.d < 8 {
            return Err(Error::Config(format!("feature dim d={} must be at least 8", self.d)));
        }
        if self.n_t == 0 || self.n_r == 0 || self.n_samples == 0 {
            return Err(Error::Config("n_t, n_r and n_samples must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.template_weights.iter().any(|w| !(*w >= 0.0)) || self.template_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("template weights must be non-negative and not all zero".into()));
        }
        Ok(())
    }

    pub fn load_lexicon(&self) -> Result<Lexicon> {
        match &self.lexicon {
            Some(p) => Lexicon::load(p),
            None => Ok(Lexicon::default()),
        }
    }

    pub fn template_proportions(&self) -> [f64; 6] {
        let total: f64 = self.template_weights.iter().sum();
        self.template_weights.map(|w| w / total)
    }
}

/// Fixed unit-norm vector per lexicon word. When the lexicon fits in `d`
/// dimensions the vectors are mutually orthogonal, otherwise independent.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    d: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl Prototypes {
    pub fn generate(lexicon: &Lexicon, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(PROTOTYPE_STREAM);
        let orthogonal = lexicon.words().count() <= d;
        let mut drawn: Vec<Vec<f64>> = Vec::new();
        let mut vectors = BTreeMap::new();
        for w in lexicon.words() {
            let v = loop {
                let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                if orthogonal {
                    // Gram-Schmidt, applied twice for numerical orthogonality.
                    for _ in 0..2 {
                        for u in &drawn {
                            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
                        }
                    }
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    v.iter_mut().for_each(|x| *x /= norm);
                    break v;
                }
            };
            if orthogonal {
                drawn.push(v.clone());
            }
            vectors.insert(w.clone(), v);
        }
        Prototypes { d, vectors }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }
}

/// Sum of the graph's word prototypes plus `N(0, sigma²)` per coordinate.
pub fn synthesize_feature(
    graph: &SceneGraph,
    prototypes: &Prototypes,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; prototypes.dim()];
    for word in graph.words() {
        let p = prototypes
            .get(word)
            .ok_or_else(|| Error::Lexicon(format!("no prototype for `{word}`")))?;
        out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("sigma is finite and positive");
        out.iter_mut().for_each(|o| *o += normal.sample(rng));
    }
    Ok(out)
}

/// One task instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSample {
    pub id: usize,
    pub caption: Vec<String>,
    pub tokens: Vec<usize>,
    pub target_features: Matrix,
    pub reference_features: Matrix,
    pub graph: SceneGraph,
    pub template: CaptionTemplate,
    /// Source graph of each target row; empty for zero-filled rows.
    pub target_graphs: Vec<SceneGraph>,
    /// Source graph of each reference row; empty for zero-filled rows.
    pub reference_graphs: Vec<SceneGraph>,
    pub split: Split,
}

impl GroupSample {
    pub fn caption_text(&self) -> String {
        self.caption.join(" ")
    }

    /// Keeps the first `n_t` targets and `n_r` references. An empty group is
    /// replaced by a single all-zero row.
    pub fn subsample(&self, n_t: usize, n_r: usize) -> Result<GroupSample> {
        if n_t + n_r == 0 {
            return Err(Error::Config("n_t + n_r must be at least 1".into()));
        }
        let take = |m: &Matrix, graphs: &[SceneGraph], n: usize, what: &str| -> Result<(Matrix, Vec<SceneGraph>)> {
            if n > m.rows() {
                return Err(Error::Contract(format!("cannot keep {n} {what} rows out of {}", m.rows())));
            }
            if n == 0 {
                return Ok((Matrix::zeros(1, m.cols()), Vec::new()));
            }
            let data = m.data()[..n * m.cols()].to_vec();
            Ok((Matrix::from_vec(n, m.cols(), data)?, graphs.iter().take(n).cloned().collect()))
        };
        let (target_features, target_graphs) = take(&self.target_features, &self.target_graphs, n_t, "target")?;
        let (reference_features, reference_graphs) =
            take(&self.reference_features, &self.reference_graphs, n_r, "reference")?;
        Ok(GroupSample {
            target_features,
            reference_features,
            target_graphs,
            reference_graphs,
            ..self.clone()
        })
    }
}

/// Output of [`generate_corpus`].
#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<GroupSample>,
    pub vocab: Vocabulary,
    pub prototypes: Prototypes,
    pub lexicon: Lexicon,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<GroupSample> {
        select_split(&self.samples, split)
    }
}

pub fn select_split(samples: &[GroupSample], split: Split) -> Vec<GroupSample> {
    samples.iter().filter(|s| s.split == split).cloned().collect()
}

fn pick<'a>(words: &'a [String], rng: &mut impl Rng, exclude: &[&str]) -> Result<&'a String> {
    let allowed: Vec<&String> = words.iter().filter(|w| !exclude.contains(&w.as_str())).collect();
    allowed
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::Generation("lexicon too small to fill a slot".into()))
}

/// Draws a graph conforming to `template`.
pub fn random_graph(template: CaptionTemplate, lexicon: &Lexicon, rng: &mut impl Rng) -> Result<SceneGraph> {
    let (nouns, adjs, rels) = (lexicon.nouns(), lexicon.adjectives(), lexicon.relations());
    let subject = pick(nouns, rng, &[])?.clone();
    let mut g = SceneGraph::subject(subject.clone());
    match template {
        CaptionTemplate::AdjObj => g.subject_attrs.push(pick(adjs, rng, &[])?.clone()),
        // Compound modifiers come from the first third of the noun list and
        // heads from the rest, so a compound is never reversible.
        CaptionTemplate::NnObj => {
            let split = nouns.len().div_ceil(3).min(nouns.len() - 1);
            if split == 0 {
                return Err(Error::Generation("compounds need at least two nouns".into()));
            }
            let modifier = pick(&nouns[..split], rng, &[])?.clone();
            let head = pick(&nouns[split..], rng, &[])?.clone();
            g = SceneGraph::subject(head).with_subject_attr(modifier);
        }
        _ => {
            let rel = pick(rels, rng, &[])?.clone();
            let obj = pick(nouns, rng, &[&subject])?.clone();
            g = g.with_relation(rel, obj);
            if matches!(template, CaptionTemplate::AttSubRelObj | CaptionTemplate::AttSubRelAttObj) {
                g.subject_attrs.push(pick(adjs, rng, &[])?.clone());
            }
            if matches!(template, CaptionTemplate::SubRelAttObj | CaptionTemplate::AttSubRelAttObj) {
                g.object_attrs.push(pick(adjs, rng, &[])?.clone());
            }
        }
    }
    Ok(g)
}

/// Share of references that put the subject in a random relation.
const REFERENCE_RELATION_P: f64 = 0.7;

/// A random partial match of `target`: its subject together with the
/// subject's modifiers, in a randomly drawn relation to another noun some of
/// the time. May coincide with `target`; the caller rejects full matches.
pub fn perturb_graph(target: &SceneGraph, lexicon: &Lexicon, rng: &mut impl Rng) -> Result<SceneGraph> {
    let mut g = SceneGraph::subject(target.subject.clone());
    g.subject_attrs = target.subject_attrs.clone();
    if rng.random_bool(REFERENCE_RELATION_P) {
        let rel = pick(lexicon.relations(), rng, &[])?.clone();
        let obj = pick(lexicon.nouns(), rng, &[&target.subject])?.clone();
        g = g.with_relation(rel, obj);
    }
    Ok(g)
}

fn weighted_template(weights: &[f64; 6], rng: &mut impl Rng) -> CaptionTemplate {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (t, w) in CaptionTemplate::ALL.iter().zip(weights) {
        if u < *w {
            return *t;
        }
        u -= w;
    }
    *CaptionTemplate::ALL
        .iter()
        .zip(weights)
        .rev()
        .find(|(_, w)| **w > 0.0)
        .map(|(t, _)| t)
        .expect("some weight is positive")
}

const MAX_REFERENCE_ATTEMPTS: usize = 200;

fn generate_sample(
    index: usize,
    config: &GenConfig,
    lexicon: &Lexicon,
    prototypes: &Prototypes,
) -> Result<GroupSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ index as u64);
    let template = weighted_template(&config.template_weights, &mut rng);
    let graph = random_graph(template, lexicon, &mut rng)?;

    let mut target = Vec::with_capacity(config.n_t * config.d);
    for _ in 0..config.n_t {
        target.extend(synthesize_feature(&graph, prototypes, config.noise_sigma, &mut rng)?);
    }

    let mut reference_graphs: Vec<SceneGraph> = Vec::with_capacity(config.n_r);
    let mut attempts = 0;
    while reference_graphs.len() < config.n_r {
        attempts += 1;
        if attempts > MAX_REFERENCE_ATTEMPTS * config.n_r {
            return Err(Error::Generation(format!(
                "could not find {} distinct partial matches for `{}`",
                config.n_r, graph
            )));
        }
        let candidate = perturb_graph(&graph, lexicon, &mut rng)?;
        if matches_fully(&candidate, &graph) || reference_graphs.iter().any(|r| matches_fully(r, &candidate)) {
            continue;
        }
        reference_graphs.push(candidate);
    }
    let mut reference = Vec::with_capacity(config.n_r * config.d);
    for g in &reference_graphs {
        reference.extend(synthesize_feature(g, prototypes, config.noise_sigma, &mut rng)?);
    }

    Ok(GroupSample {
        id: index,
        caption: flatten(&graph),
        tokens: Vec::new(),
        target_features: Matrix::from_vec(config.n_t, config.d, target)?,
        reference_features: Matrix::from_vec(config.n_r, config.d, reference)?,
        target_graphs: vec![graph.clone(); config.n_t],
        graph,
        template,
        reference_graphs,
        split: Split::Train,
    })
}

/// Generates, tokenizes and splits a full corpus.
pub fn generate_corpus(config: &GenConfig) -> Result<Corpus> {
    config.validate()?;
    let lexicon = config.load_lexicon()?;
    let prototypes = Prototypes::generate(&lexicon, config.d, config.seed);
    let mut samples = (0..config.n_samples)
        .map(|i| generate_sample(i, config, &lexicon, &prototypes))
        .collect::<Result<Vec<_>>>()?;

    let vocab = Vocabulary::from_words(samples.iter().flat_map(|s| s.caption.iter()));
    for s in &mut samples {
        s.tokens = vocab.encode(&s.caption);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SPLIT_STREAM);
    split(&mut samples, &config.fractions, &mut rng)?;
    Ok(Corpus {
        samples,
        vocab,
        prototypes,
        lexicon,
    })
}

/// Assigns split labels. Test captions never occur in train; val is drawn at
/// the sample level from the non-test pool and may share captions with train.
pub fn split(samples: &mut [GroupSample], fractions: &SplitFractions, rng: &mut impl Rng) -> Result<()> {
    fractions.validate()?;
    let mut by_caption: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_caption.entry(s.caption_text()).or_default().push(i);
    }
    let mut captions: Vec<&Vec<usize>> = by_caption.values().collect();
    captions.shuffle(rng);

    let n = samples.len();
    let want_test = (fractions.test * n as f64).round() as usize;
    let want_val = (fractions.val * n as f64).round() as usize;
    let mut test = Vec::new();
    let mut rest = Vec::new();
    for group in captions {
        if test.len() < want_test {
            test.extend_from_slice(group);
        } else {
            rest.extend_from_slice(group);
        }
    }
    if test.len() < want_test || (fractions.train > 0.0 && rest.len() <= want_val) {
        return Err(Error::Split(format!(
            "{} distinct captions over {n} samples cannot honor fractions {fractions:?}",
            by_caption.len()
        )));
    }
    rest.sort_unstable();
    rest.shuffle(rng);
    for &i in &test {
        samples[i].split = Split::Test;
    }
    for (k, &i) in rest.iter().enumerate() {
        samples[i].split = if k < want_val { Split::Val } else { Split::Train };
    }
    Ok(())
}

/// Source of unrelated features for the noise-image experiment.
#[derive(Clone, Debug, Default)]
pub struct NoisePool {
    entries: Vec<(SceneGraph, Vec<f64>)>,
}

impl NoisePool {
    /// Collects every (non-zero-filled) target row of `samples`.
    pub fn from_samples(samples: &[GroupSample]) -> Self {
        let mut entries = Vec::new();
        for s in samples {
            for (r, g) in s.target_graphs.iter().enumerate() {
                entries.push((g.clone(), s.target_features.row(r).to_vec()));
            }
        }
        NoisePool { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Replaces `k` randomly chosen target rows with features whose source graph
/// has a different subject. The caption is unchanged.
pub fn inject_noise_images(
    sample: &GroupSample,
    k: usize,
    pool: &NoisePool,
    rng: &mut impl Rng,
) -> Result<GroupSample> {
    let n_t = sample.target_graphs.len();
    if k > n_t {
        return Err(Error::Contract(format!("cannot replace {k} of {n_t} target images")));
    }
    let mut out = sample.clone();
    if k == 0 {
        return Ok(out);
    }
    let unrelated: Vec<&(SceneGraph, Vec<f64>)> = pool
        .entries
        .iter()
        .filter(|(g, _)| g.subject != sample.graph.subject)
        .collect();
    if unrelated.is_empty() {
        return Err(Error::Generation(format!("no unrelated image for subject `{}`", sample.graph.subject)));
    }
    let mut slots: Vec<usize> = (0..n_t).collect();
    slots.shuffle(rng);
    for &slot in &slots[..k] {
        let (g, f) = unrelated.choose(rng).expect("non-empty");
        out.target_features.row_mut(slot).copy_from_slice(f);
        out.target_graphs[slot] = g.clone();
    }
    Ok(out)
}

#[derive(Deserialize)]
struct SampleRecord {
    id: usize,
    caption: String,
    tokens: Vec<usize>,
    target_features: Vec<Vec<f64>>,
    reference_features: Vec<Vec<f64>>,
    graph: SceneGraph,
    template: CaptionTemplate,
    target_graphs: Vec<SceneGraph>,
    reference_graphs: Vec<SceneGraph>,
    split: Split,
}

fn write_matrix(out: &mut String, m: &Matrix) {
    out.push('[');
    for r in 0..m.rows() {
        if r > 0 {
            out.push(',');
        }
        out.push('[');
        for (c, v) in m.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").expect("writing to String");
        }
        out.push(']');
    }
    out.push(']');
}

/// Serializes one sample as a single JSON line (no trailing newline).
/// Floats are written with 17 significant digits.
pub fn sample_to_json_line(s: &GroupSample) -> Result<String> {
    let mut line = String::with_capacity(16 * 1024);
    write!(
        line,
        "{{\"id\":{},\"caption\":{},\"tokens\":{},\"target_features\":",
        s.id,
        serde_json::to_string(&s.caption_text())?,
        serde_json::to_string(&s.tokens)?
    )
    .expect("writing to String");
    write_matrix(&mut line, &s.target_features);
    line.push_str(",\"reference_features\":");
    write_matrix(&mut line, &s.reference_features);
    write!(
        line,
        ",\"graph\":{},\"template\":{},\"target_graphs\":{},\"reference_graphs\":{},\"split\":{}}}",
        serde_json::to_string(&s.graph)?,
        serde_json::to_string(&s.template)?,
        serde_json::to_string(&s.target_graphs)?,
        serde_json::to_string(&s.reference_graphs)?,
        serde_json::to_string(&s.split)?
    )
    .expect("writing to String");
    Ok(line)
}

pub fn sample_from_json_line(line: &str) -> Result<GroupSample> {
    let r: SampleRecord = serde_json::from_str(line)?;
    Ok(GroupSample {
        id: r.id,
        caption: r.caption.split_whitespace().map(str::to_string).collect(),
        tokens: r.tokens,
        target_features: Matrix::from_rows(&r.target_features)?,
        reference_features: Matrix::from_rows(&r.reference_features)?,
        graph: r.graph,
        template: r.template,
        target_graphs: r.target_graphs,
        reference_graphs: r.reference_graphs,
        split: r.split,
    })
}

pub fn write_jsonl(samples: &[GroupSample], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        w.write_all(sample_to_json_line(s)?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<GroupSample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(sample_from_json_line(&line).map_err(|e| Error::parse(format!("line {}: {e}", lineno + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegraph::{matches_partially, parse};

    fn small_config() -> GenConfig {
        GenConfig {
            n_samples: 240,
            ..GenConfig::default()
        }
    }

    #[test]
    fn vocabulary_reserves_specials_and_round_trips() {
        let v = Vocabulary::from_words(["woman", "in", "chair", "in"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.word(PAD), Some("<pad>"));
        assert_eq!(v.id("chair"), Some(4));
        let ids = v.encode(&["woman", "in", "spaceship"]);
        assert_eq!(ids, vec![BOS, 6, 5, UNK, EOS]);
        assert_eq!(v.decode(&ids), vec!["woman", "in", "<unk>"]);
        assert_eq!(Vocabulary::from_file_string(&v.to_file_string()).unwrap(), v);
        assert!(Vocabulary::from_file_string("a\na\n").is_err());
    }

    #[test]
    fn noiseless_features_are_linear_in_words() {
        let lex = Lexicon::default();
        let protos = Prototypes::generate(&lex, 16, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = SceneGraph::subject("woman").with_relation("in", "chair");
        let a = synthesize_feature(&full, &protos, 0.0, &mut rng).unwrap();
        let b = synthesize_feature(&full, &protos, 0.0, &mut rng).unwrap();
        assert_eq!(a, b);
        let woman = synthesize_feature(&SceneGraph::subject("woman"), &protos, 0.0, &mut rng).unwrap();
        for k in 0..16 {
            let diff = a[k] - woman[k];
            let expected = protos.get("in").unwrap()[k] + protos.get("chair").unwrap()[k];
            assert!((diff - expected).abs() < 1e-12);
        }
        let missing = SceneGraph::subject("spaceship");
        assert!(matches!(
            synthesize_feature(&missing, &protos, 0.0, &mut rng),
            Err(Error::Lexicon(_))
        ));
    }

    #[test]
    fn prototypes_are_unit_norm() {
        let protos = Prototypes::generate(&Lexicon::default(), 32, 17);
        for w in Lexicon::default().words() {
            let n: f64 = protos.get(w).unwrap().iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prototypes_are_orthonormal_when_the_lexicon_fits() {
        let lex = Lexicon::default();
        let protos = Prototypes::generate(&lex, 32, 17);
        let words: Vec<&String> = lex.words().collect();
        assert!(words.len() <= 32);
        for (i, a) in words.iter().enumerate() {
            for b in &words[i + 1..] {
                let dot: f64 = protos.get(a).unwrap().iter().zip(protos.get(b).unwrap()).map(|(x, y)| x * y).sum();
                assert!(dot.abs() < 1e-12, "{a}·{b} = {dot}");
            }
        }
        // Too many words for d: independent draws, still unit norm.
        let small = Prototypes::generate(&lex, 8, 17);
        let n: f64 = small.get("woman").unwrap().iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compounds_run_from_modifier_nouns_to_head_nouns() {
        let lex = Lexicon::default();
        let split = lex.nouns().len().div_ceil(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..300 {
            let g = random_graph(CaptionTemplate::NnObj, &lex, &mut rng).unwrap();
            let rank = |w: &str| lex.nouns().iter().position(|n| n == w).unwrap();
            assert!(rank(&g.subject_attrs[0]) < split && rank(&g.subject) >= split);
        }
    }

    #[test]
    fn references_keep_the_subject_phrase() {
        let lex = Lexicon::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let target = SceneGraph::subject("woman")
            .with_subject_attr("young")
            .with_relation("with", "hat")
            .with_object_attr("straw");
        for _ in 0..200 {
            let r = perturb_graph(&target, &lex, &mut rng).unwrap();
            assert_eq!((r.subject.as_str(), r.subject_attrs.as_slice()), ("woman", &["young".to_string()][..]));
            assert!(r.object_attrs.is_empty());
            assert!(r.object.as_deref() != Some("woman"));
        }
    }

    #[test]
    fn same_graph_features_separate_from_other_subjects() {
        // Monte-Carlo: dot products of pairs from one graph vs pairs with
        // different subjects, over 1000 draws each.
        let config = GenConfig::default();
        let lex = Lexicon::default();
        let protos = Prototypes::generate(&lex, config.d, config.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut same, mut diff) = (Vec::new(), Vec::new());
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for _ in 0..1000 {
            let t = CaptionTemplate::ALL[rng.random_range(0..6)];
            let g = random_graph(t, &lex, &mut rng).unwrap();
            let mut h = random_graph(t, &lex, &mut rng).unwrap();
            while h.subject == g.subject || h.words().any(|w| g.words().any(|v| v == w)) {
                h = random_graph(t, &lex, &mut rng).unwrap();
            }
            let a = synthesize_feature(&g, &protos, config.noise_sigma, &mut rng).unwrap();
            let b = synthesize_feature(&g, &protos, config.noise_sigma, &mut rng).unwrap();
            let c = synthesize_feature(&h, &protos, config.noise_sigma, &mut rng).unwrap();
            same.push(dot(&a, &b));
            diff.push(dot(&a, &c));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let gap = mean(&same) - mean(&diff);
        assert!(gap > 3.0 * sd(&diff), "gap {gap}, sd {}", sd(&diff));
    }

    #[test]
    fn generated_samples_satisfy_invariants() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let lex = &corpus.lexicon;
        for s in &corpus.samples {
            assert_eq!(s.target_features.shape(), (5, 32));
            assert_eq!(s.reference_features.shape(), (15, 32));
            assert!(s.target_graphs.iter().all(|g| matches_fully(g, &s.graph)));
            assert!(s.reference_graphs.iter().all(|g| matches_partially(g, &s.graph)));
            for (i, a) in s.reference_graphs.iter().enumerate() {
                for b in &s.reference_graphs[i + 1..] {
                    assert!(!matches_fully(a, b));
                }
            }
            assert_eq!(corpus.vocab.decode(&s.tokens), s.caption);
            let (g, t) = parse(&s.caption, lex).unwrap();
            assert_eq!(t, s.template);
            assert!(matches_fully(&g, &s.graph));
        }
    }

    #[test]
    fn test_and_train_captions_are_disjoint() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let captions = |split| -> BTreeSet<String> {
            corpus.samples.iter().filter(|s| s.split == split).map(|s| s.caption_text()).collect()
        };
        assert!(captions(Split::Train).is_disjoint(&captions(Split::Test)));
        let count = |split| corpus.samples.iter().filter(|s| s.split == split).count();
        assert_eq!(count(Split::Test), 20);
        assert_eq!(count(Split::Val), 20);
        assert_eq!(count(Split::Train), 200);
    }

    #[test]
    fn split_fails_without_enough_captions() {
        let mut samples = generate_corpus(&small_config()).unwrap().samples;
        for s in &mut samples {
            s.caption = vec!["same".into()];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            split(&mut samples, &SplitFractions::default(), &mut rng),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn impossible_reference_count_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.tsv");
        let tiny = Lexicon::new(
            vec!["cat".into(), "mat".into()],
            vec!["red".into()],
            vec!["on".into()],
        )
        .unwrap();
        std::fs::write(&path, tiny.to_tsv()).unwrap();
        let config = GenConfig {
            n_samples: 4,
            n_r: 50,
            lexicon: Some(path),
            ..GenConfig::default()
        };
        assert!(matches!(generate_corpus(&config), Err(Error::Generation(_))));
    }

    #[test]
    fn template_histogram_tracks_weights() {
        let config = GenConfig {
            n_samples: 10_000,
            n_t: 1,
            n_r: 1,
            ..GenConfig::default()
        };
        let corpus = generate_corpus(&config).unwrap();
        let props = config.template_proportions();
        for (t, p) in CaptionTemplate::ALL.iter().zip(props) {
            let n = corpus.samples.iter().filter(|s| s.template == *t).count() as f64;
            let observed = n / config.n_samples as f64;
            assert!((observed - p).abs() <= 0.2 * p, "{t}: {observed} vs {p}");
        }
    }

    #[test]
    fn jsonl_round_trips_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let config = GenConfig {
            n_samples: 48,
            ..GenConfig::default()
        };
        let a = generate_corpus(&config).unwrap();
        let b = generate_corpus(&config).unwrap();
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_jsonl(&a.samples, &pa).unwrap();
        write_jsonl(&b.samples, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(read_jsonl(&pa).unwrap(), a.samples);
    }

    #[test]
    fn noise_injection_contracts() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let pool = NoisePool::from_samples(&corpus.samples);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = &corpus.samples[0];
        assert_eq!(&inject_noise_images(s, 0, &pool, &mut rng).unwrap(), s);
        assert!(matches!(inject_noise_images(s, 6, &pool, &mut rng), Err(Error::Contract(_))));

        let all = inject_noise_images(s, 5, &pool, &mut rng).unwrap();
        assert_eq!(all.caption, s.caption);
        assert!(all.target_graphs.iter().all(|g| !matches_fully(g, &s.graph)));
        assert!(all.target_graphs.iter().all(|g| g.subject != s.graph.subject));

        let two = inject_noise_images(s, 2, &pool, &mut rng).unwrap();
        let failing = two.target_graphs.iter().filter(|g| !matches_fully(g, &s.graph)).count();
        assert_eq!(failing, 2);
        let changed = (0..5).filter(|&r| two.target_features.row(r) != s.target_features.row(r)).count();
        assert_eq!(changed, 2);
    }

    #[test]
    fn subsample_takes_prefixes_and_zero_fills() {
        let corpus = generate_corpus(&small_config()).unwrap();
        let s = &corpus.samples[3];
        let sub = s.subsample(3, 0).unwrap();
        assert_eq!(sub.target_features.row(2), s.target_features.row(2));
        assert_eq!(sub.target_features.rows(), 3);
        assert_eq!(sub.reference_features, Matrix::zeros(1, 32));
        assert!(sub.reference_graphs.is_empty());
        assert!(s.subsample(0, 0).is_err());
        assert!(s.subsample(6, 1).is_err());
    }
}
