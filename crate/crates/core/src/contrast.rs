//! Joint context over both groups and the contrastive decoder input.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::TransformerBlock;
use crate::autograd::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContrastVariant {
    /// `[t; r]`
    None,
    /// `[t; r; t−c; r−c]`
    Contrast,
    /// `[t; r; t−r]`
    Contrast1,
    /// `[t; r; t−c]`
    Contrast2,
}

impl ContrastVariant {
    pub const ALL: [ContrastVariant; 4] = [
        ContrastVariant::None,
        ContrastVariant::Contrast,
        ContrastVariant::Contrast1,
        ContrastVariant::Contrast2,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ContrastVariant::None => "none",
            ContrastVariant::Contrast => "contrast",
            ContrastVariant::Contrast1 => "contrast1",
            ContrastVariant::Contrast2 => "contrast2",
        }
    }

    /// Width of the decoder input in multiples of `d`.
    pub fn segments(self) -> usize {
        match self {
            ContrastVariant::None => 2,
            ContrastVariant::Contrast => 4,
            ContrastVariant::Contrast1 | ContrastVariant::Contrast2 => 3,
        }
    }

    pub fn needs_context(self) -> bool {
        matches!(self, ContrastVariant::Contrast | ContrastVariant::Contrast2)
    }
}

impl fmt::Display for ContrastVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ContrastVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown contrast `{s}` (none|contrast|contrast1|contrast2)")))
    }
}

/// Common information of both groups: a dedicated transformer block over the
/// stacked raw features, mean-pooled. `PlainMean` skips the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JointContext {
    Attention(TransformerBlock),
    PlainMean,
}

impl JointContext {
    pub fn new(store: &mut ParamStore, d: usize, d_ff: usize, plain_mean: bool, rng: &mut impl Rng) -> Result<Self> {
        if plain_mean {
            Ok(JointContext::PlainMean)
        } else {
            Ok(JointContext::Attention(TransformerBlock::new(store, "ctx.fa", d, d_ff, rng)?))
        }
    }

    /// `phi_t: n_t×d`, `phi_r: n_r×d` → `1×d`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, phi_t: NodeId, phi_r: NodeId) -> Result<NodeId> {
        let stacked = g.concat_rows(&[phi_t, phi_r])?;
        match self {
            JointContext::Attention(block) => {
                let b = block.forward(g, store, stacked, None)?;
                Ok(g.mean_rows(b.out))
            }
            JointContext::PlainMean => Ok(g.mean_rows(stacked)),
        }
    }
}

/// Lays out the decoder input for `variant`. `c` is required by the variants
/// that subtract the joint context.
pub fn contrastive_features(
    g: &mut Graph,
    t: NodeId,
    r: NodeId,
    c: Option<NodeId>,
    variant: ContrastVariant,
) -> Result<NodeId> {
    for x in [t, r].into_iter().chain(c) {
        if g.value(x).rows() != 1 || g.value(x).shape() != g.value(t).shape() {
            return Err(Error::Dimension {
                op: "contrastive_features",
                left: g.value(t).shape(),
                right: g.value(x).shape(),
            });
        }
    }
    let context = || c.ok_or_else(|| Error::Contract(format!("contrast variant `{variant}` needs a joint context")));
    let parts = match variant {
        ContrastVariant::None => vec![t, r],
        ContrastVariant::Contrast => {
            let c = context()?;
            let dt = g.sub(t, c)?;
            let dr = g.sub(r, c)?;
            vec![t, r, dt, dr]
        }
        ContrastVariant::Contrast1 => {
            let d = g.sub(t, r)?;
            vec![t, r, d]
        }
        ContrastVariant::Contrast2 => {
            let dt = g.sub(t, context()?)?;
            vec![t, r, dt]
        }
    };
    g.concat_cols(&parts)
}
