use super::{Graph, NodeId, Tensor};
use crate::Result;

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// `build` receives a fresh graph and one node per entry of `params`, and
/// returns the scalar loss node. It is called once for the analytic pass and
/// twice per parameter entry for the numeric one, so it must be
/// deterministic.
///
/// Returns the maximum over all entries of
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`, or infinity
/// if any evaluation is not finite.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).item().unwrap_or(f64::NAN))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &ids)?;
    if !g.value(loss).item().is_some_and(f64::is_finite) {
        return Ok(f64::INFINITY);
    }
    let grads = g.backward(loss)?;

    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for (p, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + epsilon;
            let plus = eval(&probe)?;
            probe[p].data_mut()[i] = orig - epsilon;
            let minus = eval(&probe)?;
            probe[p].data_mut()[i] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Ok(f64::INFINITY);
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
