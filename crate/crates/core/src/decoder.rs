//! LSTM caption decoder: state initialization from the decoder input,
//! teacher-forced loss, greedy and beam-search generation.

use std::cmp::Ordering;

use rand::Rng;

use crate::autograd::{sigmoid, Graph, NodeId, ParamId, ParamStore};
use crate::datagen::{BOS, EOS, NUM_RESERVED, PAD};
use crate::error::{Error, Result};
use crate::nn::{init_uniform, Linear};
use crate::tensor::Matrix;

/// Embedding table, packed LSTM gates (order i, f, g, o), state
/// initialization and output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decoder {
    pub embed: ParamId,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub init_h: Linear,
    pub init_c: Linear,
    pub out: Linear,
    pub vocab_size: usize,
    pub m: usize,
    pub h: usize,
    pub e: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    pub max_len: usize,
    pub beam_width: usize,
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_len: 8,
            beam_width: 3,
            length_normalize: false,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            max_len,
            beam_width: 1,
            length_normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len < 2 {
            return Err(Error::Config(format!(
                "beam_width {} must be >= 1 and max_len {} >= 2",
                self.beam_width, self.max_len
            )));
        }
        Ok(())
    }
}

impl Decoder {
    pub fn new(store: &mut ParamStore, vocab_size: usize, m: usize, h: usize, e: usize, rng: &mut impl Rng) -> Result<Self> {
        if vocab_size < NUM_RESERVED || m == 0 || h == 0 || e == 0 {
            return Err(Error::Config(format!(
                "decoder dims invalid: V={vocab_size} m={m} h={h} e={e}"
            )));
        }
        Ok(Decoder {
            embed: store.add("dec.embed", init_uniform(vocab_size, e, e, rng))?,
            w_ih: store.add("dec.w_ih", init_uniform(e, 4 * h, e, rng))?,
            w_hh: store.add("dec.w_hh", init_uniform(h, 4 * h, h, rng))?,
            b: store.add("dec.b", init_uniform(1, 4 * h, h, rng))?,
            init_h: Linear::new(store, "dec.init_h", m, h, rng)?,
            init_c: Linear::new(store, "dec.init_c", m, h, rng)?,
            out: Linear::new(store, "dec.out", h, vocab_size, rng)?,
            vocab_size,
            m,
            h,
            e,
        })
    }

    fn check_input(&self, shape: (usize, usize)) -> Result<()> {
        if shape.1 != self.m {
            return Err(Error::Dimension {
                op: "init_state",
                left: shape,
                right: (shape.0, self.m),
            });
        }
        Ok(())
    }

    /// `h0 = tanh(z·Wh + bh)`, `c0 = tanh(z·Wc + bc)` for each row of `z`.
    pub fn init_state(&self, g: &mut Graph, store: &ParamStore, z: NodeId) -> Result<(NodeId, NodeId)> {
        self.check_input(g.value(z).shape())?;
        let h = self.init_h.forward(g, store, z)?;
        let c = self.init_c.forward(g, store, z)?;
        Ok((g.tanh(h), g.tanh(c)))
    }

    pub fn init_state_plain(&self, store: &ParamStore, z: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(z.shape())?;
        let h = self.init_h.apply(store, z)?.map(f64::tanh);
        let c = self.init_c.apply(store, z)?.map(f64::tanh);
        Ok((h, c))
    }

    fn cell(&self, g: &mut Graph, store: &ParamStore, x_proj: NodeId, h: NodeId, c: NodeId) -> Result<(NodeId, NodeId)> {
        let w_hh = g.param(store, self.w_hh);
        let hh = g.matmul(h, w_hh)?;
        let gates = g.add(x_proj, hh)?;
        let n = self.h;
        let i = g.slice_cols(gates, 0, n)?;
        let f = g.slice_cols(gates, n, n)?;
        let cand = g.slice_cols(gates, 2 * n, n)?;
        let o = g.slice_cols(gates, 3 * n, n)?;
        let (i, f, cand, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(cand), g.sigmoid(o));
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Mean per-token NLL of `seqs` (each `BOS … EOS`) given one decoder
    /// input row per sequence. Sequences of different lengths are padded and
    /// the padding is masked out, so the result is the mean over all real
    /// prediction positions of the batch.
    pub fn teacher_forced_loss(&self, g: &mut Graph, store: &ParamStore, z: NodeId, seqs: &[Vec<usize>]) -> Result<NodeId> {
        let batch = seqs.len();
        if batch == 0 || g.value(z).rows() != batch {
            return Err(Error::Contract(format!(
                "{} sequences for {} decoder inputs",
                batch,
                g.value(z).rows()
            )));
        }
        for s in seqs {
            self.validate_sequence(s)?;
        }
        let steps = seqs.iter().map(|s| s.len() - 1).max().expect("non-empty batch");

        // Time-major layout: row t*B + b is step t of sequence b.
        let mut inputs = Vec::with_capacity(steps * batch);
        let mut targets = Vec::with_capacity(steps * batch);
        let mut pad = Vec::with_capacity(steps * batch);
        for t in 0..steps {
            for s in seqs {
                let real = t + 1 < s.len();
                inputs.push(if real { s[t] } else { PAD });
                targets.push(if real { s[t + 1] } else { PAD });
                pad.push(!real);
            }
        }

        let (mut h, mut c) = self.init_state(g, store, z)?;
        let embed = g.param(store, self.embed);
        let w_ih = g.param(store, self.w_ih);
        let b = g.param(store, self.b);
        let x = g.gather_rows(embed, &inputs)?;
        let x = g.matmul(x, w_ih)?;
        let x = g.add_row_vec(x, b)?;
        let mut hidden = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_t = g.slice_rows(x, t * batch, batch)?;
            (h, c) = self.cell(g, store, x_t, h, c)?;
            hidden.push(h);
        }
        let hs = g.concat_rows(&hidden)?;
        let logits = self.out.forward(g, store, hs)?;
        g.cross_entropy(logits, &targets, &pad)
    }

    fn validate_sequence(&self, s: &[usize]) -> Result<()> {
        if s.len() < 2 || s[0] != BOS || s[s.len() - 1] != EOS {
            return Err(Error::Contract(format!("sequence {s:?} must be BOS … EOS")));
        }
        if s[1..s.len() - 1].iter().any(|&t| matches!(t, PAD | BOS | EOS)) {
            return Err(Error::Contract(format!("sequence {s:?} has a special token inside")));
        }
        if let Some(&bad) = s.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Vocab { id: bad, size: self.vocab_size });
        }
        Ok(())
    }

    /// One tape-free LSTM step on a single `1×h` state.
    pub fn lstm_step(&self, store: &ParamStore, h: &Matrix, c: &Matrix, token: usize) -> Result<(Matrix, Matrix, Matrix)> {
        if token >= self.vocab_size {
            return Err(Error::Vocab { id: token, size: self.vocab_size });
        }
        let n = self.h;
        let embed = store.value(self.embed);
        let x = Matrix::row_vector(embed.row(token))?;
        let mut gates = x.matmul(store.value(self.w_ih))?;
        let hh = h.matmul(store.value(self.w_hh))?;
        let b = store.value(self.b);
        for k in 0..4 * n {
            gates.data_mut()[k] += hh.data()[k] + b.data()[k];
        }
        let gd = gates.data();
        let mut h_next = vec![0.0; n];
        let mut c_next = vec![0.0; n];
        for k in 0..n {
            let i = sigmoid(gd[k]);
            let f = sigmoid(gd[n + k]);
            let cand = gd[2 * n + k].tanh();
            let o = sigmoid(gd[3 * n + k]);
            c_next[k] = f * c.data()[k] + i * cand;
            h_next[k] = o * c_next[k].tanh();
        }
        let h_next = Matrix::row_vector(&h_next)?;
        let logits = self.out.apply(store, &h_next)?;
        Ok((h_next, Matrix::row_vector(&c_next)?, logits))
    }

    /// Binds the decoder to one input row for generation.
    pub fn stepper<'a>(&'a self, store: &'a ParamStore, z: &Matrix) -> Result<LstmStepper<'a>> {
        if z.rows() != 1 {
            return Err(Error::Dimension {
                op: "stepper",
                left: z.shape(),
                right: (1, self.m),
            });
        }
        let (h0, c0) = self.init_state_plain(store, z)?;
        Ok(LstmStepper {
            decoder: self,
            store,
            h0,
            c0,
        })
    }
}

/// Autoregressive source of next-token logits.
pub trait StepModel {
    type State: Clone;
    fn vocab_size(&self) -> usize;
    fn start(&self) -> Self::State;
    /// Feeds `token` and returns the next state and the logits that follow it.
    fn step(&self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

pub struct LstmStepper<'a> {
    decoder: &'a Decoder,
    store: &'a ParamStore,
    h0: Matrix,
    c0: Matrix,
}

impl StepModel for LstmStepper<'_> {
    type State = (Matrix, Matrix);

    fn vocab_size(&self) -> usize {
        self.decoder.vocab_size
    }

    fn start(&self) -> Self::State {
        (self.h0.clone(), self.c0.clone())
    }

    fn step(&self, (h, c): &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)> {
        let (h, c, logits) = self.decoder.lstm_step(self.store, h, c, token)?;
        Ok(((h, c), logits.into_data()))
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

fn emittable(token: usize) -> bool {
    token != PAD && token != BOS
}

/// A generated caption. `tokens` excludes BOS and EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities of every emitted token, EOS included.
    pub logprob: f64,
    pub finished: bool,
}

/// Highest-logit emittable token each step; ties go to the lowest id.
pub fn greedy_decode<M: StepModel>(model: &M, config: &DecodeConfig) -> Result<Decoded> {
    config.validate()?;
    let mut state = model.start();
    let mut token = BOS;
    let mut out = Decoded {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    };
    for _ in 0..config.max_len {
        let (next, logits) = model.step(&state, token)?;
        let lp = log_softmax(&logits);
        let best = (0..lp.len())
            .filter(|&t| emittable(t))
            .fold(None, |best: Option<usize>, t| match best {
                Some(b) if lp[b] >= lp[t] => Some(b),
                _ => Some(t),
            })
            .ok_or_else(|| Error::Contract("vocabulary has no emittable token".into()))?;
        out.logprob += lp[best];
        if best == EOS {
            out.finished = true;
            break;
        }
        out.tokens.push(best);
        state = next;
        token = best;
    }
    Ok(out)
}

#[derive(Clone)]
struct Hypothesis<S> {
    tokens: Vec<usize>,
    logprob: f64,
    state: S,
}

fn score(logprob: f64, emitted: usize, normalize: bool) -> f64 {
    if normalize {
        logprob / emitted.max(1) as f64
    } else {
        logprob
    }
}

/// Higher score first; equal scores fall back to lexicographic token order.
fn rank(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_tokens.cmp(b_tokens))
}

/// Beam search over cumulative log-probability, never worse than greedy.
///
/// Candidates are ranked over all live beams; an EOS candidate ranked ahead
/// of the last live slot is retired and does not take a slot. The answer is
/// the best of the retired hypotheses, the beams alive at `max_len`, and the
/// greedy decode (plain beam search can prune the greedy path).
pub fn beam_search_decode<M: StepModel>(model: &M, config: &DecodeConfig) -> Result<Decoded> {
    let beam = beam_only(model, config)?;
    let greedy = greedy_decode(model, config)?;
    Ok(best_of(vec![beam, greedy], config.length_normalize))
}

fn best_of(pool: Vec<Decoded>, norm: bool) -> Decoded {
    let emitted = |d: &Decoded| d.tokens.len() + usize::from(d.finished);
    pool.into_iter()
        .min_by(|a, b| {
            rank(
                score(a.logprob, emitted(a), norm),
                &a.tokens,
                score(b.logprob, emitted(b), norm),
                &b.tokens,
            )
        })
        .expect("pool is non-empty")
}

/// The beam's own answer, without the greedy fallback.
fn beam_only<M: StepModel>(model: &M, config: &DecodeConfig) -> Result<Decoded> {
    config.validate()?;
    let norm = config.length_normalize;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state: model.start(),
    }];
    let mut done: Vec<Decoded> = Vec::new();

    for _ in 0..config.max_len {
        let mut candidates: Vec<(usize, usize, f64, M::State)> = Vec::new();
        for (bi, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let (next, logits) = model.step(&hyp.state, prev)?;
            let lp = log_softmax(&logits);
            for (t, &l) in lp.iter().enumerate().filter(|(t, _)| emittable(*t)) {
                candidates.push((bi, t, hyp.logprob + l, next.clone()));
            }
        }
        let seq = |bi: usize, t: usize| -> Vec<usize> {
            let mut s = live[bi].tokens.clone();
            s.push(t);
            s
        };
        let keyed: Vec<(Vec<usize>, f64)> = candidates
            .iter()
            .map(|&(bi, t, lp, _)| (seq(bi, t), score(lp, live[bi].tokens.len() + 1, norm)))
            .collect();
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| rank(keyed[a].1, &keyed[a].0, keyed[b].1, &keyed[b].0));

        let mut next_live = Vec::with_capacity(config.beam_width);
        for idx in order {
            if next_live.len() == config.beam_width {
                break;
            }
            let (bi, t, lp, ref state) = candidates[idx];
            if t == EOS {
                done.push(Decoded {
                    tokens: live[bi].tokens.clone(),
                    logprob: lp,
                    finished: true,
                });
            } else {
                next_live.push(Hypothesis {
                    tokens: keyed[idx].0.clone(),
                    logprob: lp,
                    state: state.clone(),
                });
            }
        }
        live = next_live;
        // Extensions only lower an unnormalized score.
        let best_done = done.iter().map(|d| d.logprob).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || (!norm && live.iter().all(|h| h.logprob < best_done)) {
            break;
        }
    }
    done.extend(live.into_iter().map(|h| Decoded {
        tokens: h.tokens,
        logprob: h.logprob,
        finished: false,
    }));
    if done.is_empty() {
        return Err(Error::Contract("beam search produced no hypothesis".into()));
    }
    Ok(best_of(done, norm))
}

/// Dispatches on `beam_width`.
pub fn decode<M: StepModel>(model: &M, config: &DecodeConfig) -> Result<Decoded> {
    if config.beam_width == 1 {
        greedy_decode(model, config)
    } else {
        beam_search_decode(model, config)
    }
}
