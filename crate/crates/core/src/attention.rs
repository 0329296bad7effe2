//! Single-head transformer block and the group aggregation strategies built
//! on it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::autograd::{Graph, Mask, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::Matrix;

/// Q/K/V projections (d×d), then a ReLU feed-forward layer of width `d_ff`.
///
/// ```text
/// A  = softmax(Q Kᵀ / √d)       Q = ΦWq + bq, K = ΦWk + bk, V = ΦWv + bv
/// V' = V + A V
/// Φ' = V' + relu(V'W1 + b1) W2 + b2
/// ```
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    pub d: usize,
}

/// Nodes produced by one block application.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: NodeId,
    /// Row-stochastic attention weights.
    pub attention: NodeId,
    /// Scaled logits before masking and softmax.
    pub logits: NodeId,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(TransformerBlock {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, d_ff, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), d_ff, d, rng)?,
            d,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, phi: NodeId, mask: Option<&Mask>) -> Result<BlockOutput> {
        let cols = g.value(phi).cols();
        if cols != self.d {
            return Err(Error::Dimension {
                op: "transformer_forward",
                left: g.value(phi).shape(),
                right: (self.d, self.d),
            });
        }
        let q = self.q.forward(g, store, phi)?;
        let k = self.k.forward(g, store, phi)?;
        let v = self.v.forward(g, store, phi)?;
        let qk = g.matmul_nt(q, k)?;
        let logits = g.scale(qk, 1.0 / (self.d as f64).sqrt());
        let attention = g.row_softmax(logits, mask)?;
        let av = g.matmul(attention, v)?;
        let v_res = g.add(v, av)?;
        let hidden = self.ff1.forward(g, store, v_res)?;
        let hidden = g.relu(hidden);
        let ff = self.ff2.forward(g, store, hidden)?;
        let out = g.add(v_res, ff)?;
        Ok(BlockOutput { out, attention, logits })
    }
}

/// Mask over `[targets; references]` that only lets rows attend across groups.
pub fn cross_group_mask(n_t: usize, n_r: usize) -> Mask {
    let n = n_t + n_r;
    Mask::new(n, n, |r, c| (r < n_t) != (c < n_t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggregationVariant {
    Average,
    SelfAttention,
    AttenAll,
    Cross,
    NegCross,
}

impl AggregationVariant {
    pub const ALL: [AggregationVariant; 5] = [
        AggregationVariant::Average,
        AggregationVariant::SelfAttention,
        AggregationVariant::AttenAll,
        AggregationVariant::Cross,
        AggregationVariant::NegCross,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AggregationVariant::Average => "average",
            AggregationVariant::SelfAttention => "sa",
            AggregationVariant::AttenAll => "attenall",
            AggregationVariant::Cross => "ca",
            AggregationVariant::NegCross => "nca",
        }
    }
}

impl fmt::Display for AggregationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AggregationVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation `{s}` (average|sa|attenall|ca|nca)")))
    }
}

/// Per-variant parameters. Variants own only the blocks they use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Aggregator {
    Average,
    SelfAttention {
        shared: TransformerBlock,
    },
    AttenAll {
        proj_t: Linear,
        proj_r: Linear,
        all: TransformerBlock,
    },
    Cross {
        shared: TransformerBlock,
        cross: TransformerBlock,
    },
    NegCross {
        shared: TransformerBlock,
        cross_t: TransformerBlock,
        cross_r: TransformerBlock,
    },
}

/// Pooled 1×d group vectors plus the attention nodes that produced them.
#[derive(Clone, Debug)]
pub struct Aggregated {
    pub t: NodeId,
    pub r: NodeId,
    pub attention: Vec<(&'static str, NodeId)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRecord {
    pub name: String,
    pub weights: Matrix,
}

impl Aggregator {
    pub fn new(variant: AggregationVariant, store: &mut ParamStore, d: usize, d_ff: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut block = |name: &str| TransformerBlock::new(store, name, d, d_ff, rng);
        Ok(match variant {
            AggregationVariant::Average => Aggregator::Average,
            AggregationVariant::SelfAttention => Aggregator::SelfAttention {
                shared: block("agg.shared")?,
            },
            AggregationVariant::AttenAll => {
                let all = block("agg.all")?;
                Aggregator::AttenAll {
                    proj_t: Linear::new(store, "agg.proj_t", d, d, rng)?,
                    proj_r: Linear::new(store, "agg.proj_r", d, d, rng)?,
                    all,
                }
            }
            AggregationVariant::Cross => Aggregator::Cross {
                shared: block("agg.shared")?,
                cross: block("agg.cross")?,
            },
            AggregationVariant::NegCross => Aggregator::NegCross {
                shared: block("agg.shared")?,
                cross_t: block("agg.cross_t")?,
                cross_r: block("agg.cross_r")?,
            },
        })
    }

    pub fn variant(&self) -> AggregationVariant {
        match self {
            Aggregator::Average => AggregationVariant::Average,
            Aggregator::SelfAttention { .. } => AggregationVariant::SelfAttention,
            Aggregator::AttenAll { .. } => AggregationVariant::AttenAll,
            Aggregator::Cross { .. } => AggregationVariant::Cross,
            Aggregator::NegCross { .. } => AggregationVariant::NegCross,
        }
    }

    /// Reduces `phi_t` (n_t×d) and `phi_r` (n_r×d) to one vector each.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, phi_t: NodeId, phi_r: NodeId) -> Result<Aggregated> {
        let (n_t, d_t) = g.value(phi_t).shape();
        let (n_r, d_r) = g.value(phi_r).shape();
        if d_t != d_r {
            return Err(Error::Dimension {
                op: "aggregate",
                left: (n_t, d_t),
                right: (n_r, d_r),
            });
        }
        match self {
            Aggregator::Average => Ok(Aggregated {
                t: g.mean_rows(phi_t),
                r: g.mean_rows(phi_r),
                attention: Vec::new(),
            }),
            Aggregator::SelfAttention { shared } => {
                let bt = shared.forward(g, store, phi_t, None)?;
                let br = shared.forward(g, store, phi_r, None)?;
                Ok(Aggregated {
                    t: g.mean_rows(bt.out),
                    r: g.mean_rows(br.out),
                    attention: vec![("target", bt.attention), ("reference", br.attention)],
                })
            }
            Aggregator::AttenAll { proj_t, proj_r, all } => {
                let pt = proj_t.forward(g, store, phi_t)?;
                let pr = proj_r.forward(g, store, phi_r)?;
                let stacked = g.concat_rows(&[pt, pr])?;
                let b = all.forward(g, store, stacked, None)?;
                let (t, r) = split_pool(g, b.out, n_t, n_r)?;
                Ok(Aggregated {
                    t,
                    r,
                    attention: vec![("all", b.attention)],
                })
            }
            Aggregator::Cross { shared, cross } => {
                let bt = shared.forward(g, store, phi_t, None)?;
                let br = shared.forward(g, store, phi_r, None)?;
                let stacked = g.concat_rows(&[bt.out, br.out])?;
                let mask = cross_group_mask(n_t, n_r);
                let bc = cross.forward(g, store, stacked, Some(&mask))?;
                let (t, r) = split_pool(g, bc.out, n_t, n_r)?;
                Ok(Aggregated {
                    t,
                    r,
                    attention: vec![("target", bt.attention), ("reference", br.attention), ("cross", bc.attention)],
                })
            }
            Aggregator::NegCross { shared, cross_t, cross_r } => {
                let bt = shared.forward(g, store, phi_t, None)?;
                let br = shared.forward(g, store, phi_r, None)?;
                let neg = g.neg(br.out);
                let stacked = g.concat_rows(&[bt.out, neg])?;
                let mask = cross_group_mask(n_t, n_r);
                let ct = cross_t.forward(g, store, stacked, Some(&mask))?;
                let cr = cross_r.forward(g, store, stacked, Some(&mask))?;
                let (t, _) = split_pool(g, ct.out, n_t, n_r)?;
                let (_, r) = split_pool(g, cr.out, n_t, n_r)?;
                Ok(Aggregated {
                    t,
                    r,
                    attention: vec![
                        ("target", bt.attention),
                        ("reference", br.attention),
                        ("cross_t", ct.attention),
                        ("cross_r", cr.attention),
                    ],
                })
            }
        }
    }
}

fn split_pool(g: &mut Graph, stacked: NodeId, n_t: usize, n_r: usize) -> Result<(NodeId, NodeId)> {
    let t = g.slice_rows(stacked, 0, n_t)?;
    let r = g.slice_rows(stacked, n_t, n_r)?;
    Ok((g.mean_rows(t), g.mean_rows(r)))
}

/// Reads attention weights out of an evaluated graph.
pub fn collect_records(g: &Graph, aggregated: &Aggregated) -> Vec<AttentionRecord> {
    aggregated
        .attention
        .iter()
        .map(|(name, node)| AttentionRecord {
            name: name.to_string(),
            weights: g.value(*node).clone(),
        })
        .collect()
}
