//! Caption evaluation: WordAcc, WER, BLEU-1/2, ROUGE-L, METEOR (exact match
//! only) and CIDEr, each against a single reference.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROUGE_BETA2: f64 = 1.2;
const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: f64 = 3.0;
const METEOR_GAMMA: f64 = 0.5;
const CIDER_MAX_N: usize = 4;
const CIDER_SCALE: f64 = 10.0;

/// Lowercases, strips `,.!?;:` and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !matches!(c, ',' | '.' | '!' | '?' | ';' | ':'))
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPair {
    pub prediction: Vec<String>,
    pub reference: Vec<String>,
}

impl TokenizedPair {
    pub fn new(prediction: Vec<String>, reference: Vec<String>) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::Contract("reference caption is empty".into()));
        }
        Ok(TokenizedPair { prediction, reference })
    }

    pub fn from_text(prediction: &str, reference: &str) -> Result<Self> {
        Self::new(tokenize(prediction), tokenize(reference))
    }
}

/// Fraction of positions where the words agree, over the longer length.
pub fn word_acc<S: PartialEq>(prediction: &[S], reference: &[S]) -> f64 {
    let len = prediction.len().max(reference.len());
    if len == 0 {
        return 1.0;
    }
    let hits = prediction.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / len as f64
}

/// Word-level edit distance with unit costs.
pub fn levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn wer<S: PartialEq>(prediction: &[S], reference: &[S]) -> f64 {
    levenshtein(prediction, reference) as f64 / reference.len().max(1) as f64
}

fn ngrams<S: AsRef<str>>(words: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU over orders `1..=n` (n is 1 or 2), unsmoothed.
pub fn bleu_n(pairs: &[TokenizedPair], n: usize) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::Contract(format!("BLEU order {n} not in {{1, 2}}")));
    }
    let (c, r): (usize, usize) = pairs
        .iter()
        .fold((0, 0), |(c, r), p| (c + p.prediction.len(), r + p.reference.len()));
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for p in pairs {
            let refs = ngrams(&p.reference, order);
            for (g, count) in ngrams(&p.prediction, order) {
                matched += count.min(refs.get(&g).copied().unwrap_or(0));
                total += count;
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<S: PartialEq>(prediction: &[S], reference: &[S]) -> f64 {
    let l = lcs(prediction, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / prediction.len() as f64;
    let r = l as f64 / reference.len() as f64;
    (1.0 + ROUGE_BETA2) * p * r / (r + ROUGE_BETA2 * p)
}

/// METEOR with exact unigram matching. Each prediction word aligns to the
/// leftmost unused equal reference word.
pub fn meteor_lite<S: PartialEq>(prediction: &[S], reference: &[S]) -> f64 {
    let mut used = vec![false; reference.len()];
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    for (i, w) in prediction.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *w) {
            used[j] = true;
            alignment.push((i, j));
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let p = m as f64 / prediction.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    fmean * (1.0 - penalty)
}

/// Per-pair CIDEr scores, with document frequencies taken over the references
/// of `pairs`. An order whose reference has no n-gram with non-zero weight is
/// left out of that pair's average.
pub fn cider_per_pair(pairs: &[TokenizedPair]) -> Vec<f64> {
    let n_docs = pairs.len() as f64;
    let mut df: Vec<HashMap<Vec<&str>, usize>> = vec![HashMap::new(); CIDER_MAX_N];
    let ref_grams: Vec<Vec<HashMap<Vec<&str>, usize>>> = pairs
        .iter()
        .map(|p| (1..=CIDER_MAX_N).map(|n| ngrams(&p.reference, n)).collect())
        .collect();
    for grams in &ref_grams {
        for (n, g) in grams.iter().enumerate() {
            for key in g.keys() {
                *df[n].entry(key.clone()).or_insert(0) += 1;
            }
        }
    }
    let idf = |n: usize, g: &[&str]| n_docs.ln() - (df[n].get(g).copied().unwrap_or(0).max(1) as f64).ln();

    pairs
        .iter()
        .zip(&ref_grams)
        .map(|(p, refs)| {
            let mut sims = Vec::new();
            for n in 0..CIDER_MAX_N {
                let r = tfidf(&refs[n], |g| idf(n, g));
                let r_norm = r.values().map(|v| v * v).sum::<f64>().sqrt();
                if r_norm == 0.0 {
                    continue;
                }
                let c = tfidf(&ngrams(&p.prediction, n + 1), |g| idf(n, g));
                let c_norm = c.values().map(|v| v * v).sum::<f64>().sqrt();
                let dot: f64 = c.iter().map(|(g, v)| v * r.get(g).copied().unwrap_or(0.0)).sum();
                sims.push(if c_norm == 0.0 { 0.0 } else { dot / (c_norm * r_norm) });
            }
            if sims.is_empty() {
                0.0
            } else {
                CIDER_SCALE * sims.iter().sum::<f64>() / sims.len() as f64
            }
        })
        .collect()
}

fn tfidf<'a>(grams: &HashMap<Vec<&'a str>, usize>, idf: impl Fn(&[&str]) -> f64) -> HashMap<Vec<&'a str>, f64> {
    grams.iter().map(|(g, &c)| (g.clone(), c as f64 * idf(g))).collect()
}

pub fn cider(pairs: &[TokenizedPair]) -> f64 {
    mean(&cider_per_pair(pairs))
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Percentage in [0, 100].
    pub word_acc: f64,
    pub wer: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub n_samples: usize,
}

pub fn evaluate_corpus(pairs: &[TokenizedPair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty corpus".into()));
    }
    let per = |f: fn(&[String], &[String]) -> f64| -> f64 {
        mean(&pairs.iter().map(|p| f(&p.prediction, &p.reference)).collect::<Vec<_>>())
    };
    Ok(MetricReport {
        word_acc: 100.0 * per(word_acc),
        wer: per(wer),
        bleu1: bleu_n(pairs, 1)?,
        bleu2: bleu_n(pairs, 2)?,
        meteor: per(meteor_lite),
        rouge_l: per(rouge_l),
        cider: cider(pairs),
        n_samples: pairs.len(),
    })
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("WordAcc", self.word_acc),
            ("WER", self.wer),
            ("BLEU1", self.bleu1),
            ("BLEU2", self.bleu2),
            ("METEOR", self.meteor),
            ("ROUGE-L", self.rouge_l),
            ("CIDEr", self.cider),
        ];
        writeln!(f, "{:<10}{:>12}", "metric", "value")?;
        for (name, v) in rows {
            writeln!(f, "{name:<10}{v:>12.4}")?;
        }
        write!(f, "{:<10}{:>12}", "samples", self.n_samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn word_acc_examples() {
        assert_eq!(word_acc(&w("woman with straw hat"), &w("woman with cowboy hat")), 0.75);
        assert_eq!(word_acc(&w("woman with hat"), &w("woman with cowboy hat")), 0.5);
        assert_eq!(word_acc(&w("a b"), &w("a b")), 1.0);
        assert_eq!(word_acc(&w("a b c d"), &w("a b")), 0.5);
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&w("woman with hat"), &w("woman with cowboy hat")), 0.25);
        assert_eq!(wer(&w(""), &w("a b c d")), 1.0);
        assert_eq!(wer(&w("x y z w v"), &w("a")), 5.0);
    }

    #[test]
    fn bleu_examples() {
        let pairs = vec![TokenizedPair::from_text("woman with hat", "woman with cowboy hat").unwrap()];
        let bp = (1.0f64 - 4.0 / 3.0).exp();
        assert!((bleu_n(&pairs, 1).unwrap() - bp).abs() < 1e-12);
        assert!((bp - 0.7165).abs() < 1e-4);
        let none = vec![TokenizedPair::from_text("hat woman", "woman hat").unwrap()];
        assert_eq!(bleu_n(&none, 2).unwrap(), 0.0);
        assert!(bleu_n(&none, 3).is_err());
        let same = vec![TokenizedPair::from_text("a b c", "a b c").unwrap()];
        assert_eq!(bleu_n(&same, 2).unwrap(), 1.0);
    }

    #[test]
    fn bleu_clips_repeated_words() {
        let pairs = vec![TokenizedPair::from_text("the the the", "the cat").unwrap()];
        assert!((bleu_n(&pairs, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_and_meteor_edges() {
        assert_eq!(rouge_l(&w("a b"), &w("a b")), 1.0);
        assert_eq!(rouge_l(&w("a b"), &w("c d")), 0.0);
        // LCS 3 of (3, 4).
        let (p, r) = (1.0, 0.75);
        let expected = 2.2 * p * r / (r + 1.2 * p);
        assert!((rouge_l(&w("woman with hat"), &w("woman with cowboy hat")) - expected).abs() < 1e-12);

        assert_eq!(meteor_lite(&w("a b"), &w("c d")), 0.0);
        // Identity over 4 words: one chunk, penalty 0.5 / 64.
        assert!((meteor_lite(&w("a b c d"), &w("a b c d")) - (1.0 - 0.5 / 64.0)).abs() < 1e-12);
        // One shared word, P = R = 1/3, one chunk of one match.
        assert!((meteor_lite(&w("x a y"), &w("z a q")) - (1.0 / 3.0) * 0.5).abs() < 1e-12);
    }

    #[test]
    fn cider_examples() {
        let pairs: Vec<_> = ["woman in chair", "dog on beach", "red hat"]
            .iter()
            .map(|s| TokenizedPair::from_text(s, s).unwrap())
            .collect();
        assert!((cider(&pairs) - 10.0).abs() < 1e-12);

        let disjoint = vec![
            TokenizedPair::from_text("x y", "a b").unwrap(),
            TokenizedPair::from_text("z", "c d").unwrap(),
        ];
        assert_eq!(cider(&disjoint), 0.0);

        // Refs "a b" and "a c": idf(a)=0, idf(b)=idf(c)=ln 2; all bigrams ln 2.
        // Pair 1 predicts "a b": unigram cos 1, bigram cos 1 -> 10.
        // Pair 2 predicts "a b": unigram cos 0, bigram cos 0 -> 0.
        let hand = vec![
            TokenizedPair::from_text("a b", "a b").unwrap(),
            TokenizedPair::from_text("a b", "a c").unwrap(),
        ];
        let per = cider_per_pair(&hand);
        assert!((per[0] - 10.0).abs() < 1e-12 && per[1] == 0.0);
        assert!((cider(&hand) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn tokenization_contract() {
        assert_eq!(tokenize("  Woman, with HAT!  "), vec!["woman", "with", "hat"]);
        assert!(TokenizedPair::from_text("a", " ...").is_err());
    }

    #[test]
    fn report_aggregates() {
        let pairs = vec![
            TokenizedPair::from_text("woman with straw hat", "woman with cowboy hat").unwrap(),
            TokenizedPair::from_text("woman with hat", "woman with cowboy hat").unwrap(),
        ];
        let r = evaluate_corpus(&pairs).unwrap();
        assert!((r.word_acc - 62.5).abs() < 1e-12);
        assert_eq!(r.n_samples, 2);
        assert!(r.to_string().contains("WordAcc"));
        assert!(evaluate_corpus(&[]).is_err());
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..8)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn self_comparison_is_perfect(p in sentence()) {
            prop_assert_eq!(word_acc(&p, &p), 1.0);
            prop_assert_eq!(wer(&p, &p), 0.0);
        }

        #[test]
        fn edit_distance_is_symmetric(a in sentence(), b in sentence()) {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        }

        #[test]
        fn bounded_metrics_stay_bounded(p in prop::collection::vec(sentence(), 1..6), r in prop::collection::vec(sentence(), 6)) {
            let pairs: Vec<_> = p.into_iter().zip(r).map(|(a, b)| TokenizedPair::new(a, b).unwrap()).collect();
            for x in &pairs {
                for v in [word_acc(&x.prediction, &x.reference), rouge_l(&x.prediction, &x.reference), meteor_lite(&x.prediction, &x.reference)] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert!(wer(&x.prediction, &x.reference) >= 0.0);
            }
            for n in 1..=2 {
                let b = bleu_n(&pairs, n).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            }
            prop_assert!(cider(&pairs) >= 0.0);
        }
    }
}
