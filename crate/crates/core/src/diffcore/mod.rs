//! Reverse-mode differentiation over small dense `f64` matrices.

mod array;
mod graph;
pub(crate) mod kernels;
mod params;

use std::collections::{BTreeSet, HashMap};

pub use array::Array;
pub use graph::{BackwardCounters, Evaluation, GradientSet, Graph, NodeId, Op, OpCounters, Scope, ScopeCount};
pub use kernels::{GELU_A, GELU_C, LN_EPS};
pub use params::ParamStore;

use crate::error::Result;

/// Forward evaluation returning the graph's named outputs.
pub fn evaluate(
    graph: &Graph,
    inputs: &HashMap<String, Array>,
    params: &ParamStore,
) -> Result<std::collections::BTreeMap<String, Array>> {
    Ok(graph.evaluate(inputs, params)?.outputs(graph))
}

/// Forward plus reverse pass; gradients of the scalar `root` with respect to
/// every name in `wrt` (trainable parameters or inputs).
pub fn gradients(
    graph: &Graph,
    root: NodeId,
    inputs: &HashMap<String, Array>,
    params: &ParamStore,
    wrt: &BTreeSet<String>,
) -> Result<(Evaluation, GradientSet)> {
    let eval = graph.evaluate(inputs, params)?;
    let grads = graph.backward(&eval, root, params, wrt)?;
    Ok((eval, grads))
}

/// Relative error used by gradient checks: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between analytic gradients and central finite
/// differences over every trainable scalar that feeds the root.
pub fn grad_check(
    graph: &Graph,
    root: NodeId,
    inputs: &HashMap<String, Array>,
    params: &ParamStore,
    step: f64,
) -> Result<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let wrt: BTreeSet<String> = graph
        .param_names()
        .filter(|n| params.is_trainable(n))
        .map(str::to_string)
        .collect();
    if wrt.is_empty() {
        return Ok(0.0);
    }
    let (_, analytic) = gradients(graph, root, inputs, params, &wrt)?;
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let loss_at = |p: &ParamStore| -> Result<f64> { Ok(graph.evaluate(inputs, p)?.value(root).item()) };
    for name in &wrt {
        let g = &analytic.grads[name];
        for i in 0..g.len() {
            let orig = probe.get(name).unwrap().data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = loss_at(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = loss_at(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(g.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
