//! Central finite-difference verification of tape gradients.

use super::{Graph, NodeId, ParamStore};
use crate::error::Result;
use crate::tensor::Matrix;

pub const FD_STEP: f64 = 1e-4;

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares the tape gradient of a scalar function of `store` against central
/// differences on every coordinate and returns the worst relative error.
///
/// `f` must rebuild its graph from the store on each call. Parameter values
/// are restored before returning; gradients in `store` are left zeroed.
pub fn grad_check<F>(store: &mut ParamStore, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    store.zero_grads();
    let mut graph = Graph::new();
    let root = f(&mut graph, store)?;
    graph.backward(root)?;
    graph.accumulate_param_grads(store);
    let analytic: Vec<Matrix> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grads();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = f(&mut g, store)?;
        Ok(g.value(root).item())
    };

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        for k in 0..grad.data().len() {
            let orig = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + FD_STEP;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig - FD_STEP;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// [`grad_check`] over free input matrices instead of a parameter store.
pub fn grad_check_inputs<F>(inputs: &[Matrix], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut store = ParamStore::new();
    for (i, m) in inputs.iter().enumerate() {
        store.add(format!("input{i}"), m.clone())?;
    }
    grad_check(&mut store, |g, s| {
        let nodes: Vec<NodeId> = s.ids().map(|id| g.param(s, id)).collect();
        f(g, &nodes)
    })
}
