use crate::error::Result;

use super::graph::{Graph, NodeId};

/// Largest relative disagreement between the analytic gradient of `root` and
/// a central-difference estimate, over every coordinate of every
/// differentiable input.
///
/// Uses the input values bound by the most recent forward pass and leaves the
/// graph re-evaluated at those values.
pub fn grad_check(graph: &mut Graph, root: NodeId, eps: f64) -> Result<f64> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let analytic = graph.backward(root)?;
    let mut bindings = graph.bound_inputs()?;

    let mut worst: f64 = 0.0;
    for (name, grad) in analytic.iter_named() {
        for i in 0..grad.len() {
            let original = bindings[name].data()[i];

            bindings.get_mut(name).unwrap().data_mut()[i] = original + eps;
            let plus = graph.eval_scalar(&bindings, root)?;
            bindings.get_mut(name).unwrap().data_mut()[i] = original - eps;
            let minus = graph.eval_scalar(&bindings, root)?;
            bindings.get_mut(name).unwrap().data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    graph.forward(&bindings)?;
    Ok(worst)
}
