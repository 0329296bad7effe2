//! Parameter initialization and the affine layer shared by every module.

use rand::Rng;

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Matrix;

/// `rows × cols` matrix uniform in `±1/√fan_in`.
pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Matrix {
    let s = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-s..=s)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data length")
}

/// `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.add(format!("{name}.w"), init_uniform(fan_in, fan_out, fan_in, rng))?;
        let b = store.add(format!("{name}.b"), init_uniform(1, fan_out, fan_in, rng))?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add_row_vec(xw, b)
    }

    /// Tape-free evaluation.
    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(store.value(self.w))?;
        let b = store.value(self.b);
        for r in 0..out.rows() {
            out.row_mut(r).iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
        }
        Ok(out)
    }
}
