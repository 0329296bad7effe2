//! Mini-batch Adam training and corpus evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamStore};
use crate::datagen::GroupSample;
use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_corpus, word_acc, MetricReport, TokenizedPair};
use crate::model::Model;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = store.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the gradients in `store`, which are
/// zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let (value, grad) = (p.value.data_mut(), p.grad.data());
        for (k, &g) in grad.iter().enumerate() {
            let mk = &mut m.data_mut()[k];
            *mk = state.beta1 * *mk + (1.0 - state.beta1) * g;
            let vk = &mut v.data_mut()[k];
            *vk = state.beta2 * *vk + (1.0 - state.beta2) * g * g;
            let m_hat = m.data()[k] / c1;
            let v_hat = v.data()[k] / c2;
            value[k] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    store.zero_grads();
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    /// Global-norm gradient clipping threshold.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            seed: 1,
            shuffle: true,
            eval_every: 1,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "batch_size {} must be >= 1 and lr {} finite and >= 0",
                self.batch_size, self.lr
            )));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Token-weighted mean training loss over the epoch.
    pub mean_loss: f64,
    /// Greedy-decoded validation WordAcc in percent.
    pub val_wordacc: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step in order.
    pub batch_losses: Vec<f64>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,val_wordacc,wall_ms\n");
        for e in &self.epochs {
            let val = e.val_wordacc.map(|v| format!("{v:.4}")).unwrap_or_default();
            writeln!(s, "{},{:.10},{},{}", e.epoch, e.mean_loss, val, e.wall_ms).expect("writing to String");
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    let norm = store.grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
}

/// Trains `model` in place. `progress` receives each finished epoch.
pub fn train_with_progress(
    model: &mut Model,
    train: &[GroupSample],
    val: &[GroupSample],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainingLog> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut adam = AdamState::new(&model.store, config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let start = Instant::now();
    model.store.zero_grads();

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut weighted, mut tokens) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&GroupSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &batch)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            g.backward(loss)?;
            g.accumulate_param_grads(&mut model.store);
            drop(g);
            if let Some(c) = config.grad_clip {
                clip_gradients(&mut model.store, c);
            }
            adam_step(&mut model.store, &mut adam);

            let n_tok: usize = batch.iter().map(|s| s.tokens.len() - 1).sum();
            weighted += value * n_tok as f64;
            tokens += n_tok;
            log.batch_losses.push(value);
        }
        let val_wordacc = if config.eval_every > 0 && epoch % config.eval_every == 0 && !val.is_empty() {
            Some(word_accuracy(model, val, &DecodeConfig::greedy(8))?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            mean_loss: weighted / tokens as f64,
            val_wordacc,
            wall_ms: start.elapsed().as_millis(),
        };
        progress(&entry);
        log.epochs.push(entry);
    }
    model.meta.epoch = config.epochs;
    model.meta.seed = config.seed;
    model.meta.final_loss = log.final_loss().unwrap_or(f64::NAN);
    Ok(log)
}

pub fn train(model: &mut Model, train: &[GroupSample], val: &[GroupSample], config: &TrainConfig) -> Result<TrainingLog> {
    train_with_progress(model, train, val, config, |_| {})
}

/// Generated captions for `samples`, in order.
pub fn predict(model: &Model, samples: &[GroupSample], decode: &DecodeConfig) -> Result<Vec<Vec<String>>> {
    samples
        .iter()
        .map(|s| model.caption(&s.target_features, &s.reference_features, decode))
        .collect()
}

/// Mean WordAcc in percent.
pub fn word_accuracy(model: &Model, samples: &[GroupSample], decode: &DecodeConfig) -> Result<f64> {
    let preds = predict(model, samples, decode)?;
    let total: f64 = preds.iter().zip(samples).map(|(p, s)| word_acc(p, &s.caption)).sum();
    Ok(100.0 * total / samples.len().max(1) as f64)
}

pub fn evaluate(model: &Model, samples: &[GroupSample], decode: &DecodeConfig) -> Result<MetricReport> {
    let preds = predict(model, samples, decode)?;
    let pairs = preds
        .into_iter()
        .zip(samples)
        .map(|(p, s)| TokenizedPair::new(p, s.caption.clone()))
        .collect::<Result<Vec<_>>>()?;
    evaluate_corpus(&pairs)
}
