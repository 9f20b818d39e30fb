use super::graph::{Graph, NodeId};
use super::tensor::{ParamId, ParamStore};
use super::NnError;
use crate::scalar::Scalar;

/// Denominator floor of the relative error, so entries whose true gradient
/// is (numerically) zero are judged on absolute error instead.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

/// Compares back-propagated gradients with central differences
/// `(f(θ+eps) - f(θ-eps)) / 2eps` for every parameter entry.
///
/// `forward` must build a deterministic scalar output on a fresh graph.
/// Parameter values are restored and gradients zeroed on return.
pub fn gradient_check<T, F>(store: &mut ParamStore<T>, eps: T, mut forward: F) -> Result<GradCheckReport, NnError>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &ParamStore<T>) -> Result<NodeId, NnError>,
{
    let mut eval = |store: &ParamStore<T>| -> Result<(Graph<T>, NodeId), NnError> {
        let mut graph = Graph::new();
        let out = forward(&mut graph, store)?;
        let y = graph.scalar(out);
        if !y.is_finite() {
            return Err(NnError::NonFinite("forward output".into()));
        }
        Ok((graph, out))
    };

    store.zero_grad();
    let (graph, out) = eval(store)?;
    graph.backward(out, store)?;
    let analytic: Vec<Vec<T>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    store.zero_grad();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    let two_eps = eps + eps;
    for (pi, grads) in analytic.iter().enumerate() {
        let id = ParamId(pi);
        for k in 0..grads.len() {
            let original = store.value(id).data()[k];
            let mut perturbed = |delta: T, store: &mut ParamStore<T>| -> Result<T, NnError> {
                store.get_mut(id).value.data_mut()[k] = original + delta;
                let (g, o) = eval(store)?;
                Ok(g.scalar(o))
            };
            let plus = perturbed(eps, store);
            let minus = perturbed(-eps, store);
            store.get_mut(id).value.data_mut()[k] = original;
            let numeric = ((plus? - minus?) / two_eps).to_real();
            let a = grads[k].to_real();
            if !a.is_finite() || !numeric.is_finite() {
                let name = &store.get(id).name;
                return Err(NnError::NonFinite(format!("gradient of {name}[{k}]")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            report.entries += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}
