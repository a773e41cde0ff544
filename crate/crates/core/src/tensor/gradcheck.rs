use super::{Graph, Matrix, NodeId};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`.
///
/// `f` receives a fresh graph and the parameter nodes (in `params` order) and
/// returns the 1×1 loss node. The result is the maximum over all parameter
/// entries of `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn finite_diff_check<F>(f: F, params: &[Matrix], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<_> = values.iter().map(|m| g.param(m.clone())).collect();
        let loss = f(&mut g, &ids)?;
        scalar(&g, loss)
    };

    let mut g = Graph::new();
    let ids: Vec<_> = params.iter().map(|m| g.param(m.clone())).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Matrix> = ids.iter().map(|&id| g.grad(id)).collect();

    let mut perturbed = params.to_vec();
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        for e in 0..params[p].len() {
            let orig = params[p].as_slice()[e];
            perturbed[p].as_mut_slice()[e] = orig + eps;
            let plus = eval(&perturbed)?;
            perturbed[p].as_mut_slice()[e] = orig - eps;
            let minus = eval(&perturbed)?;
            perturbed[p].as_mut_slice()[e] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[p].as_slice()[e];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn scalar(g: &Graph, id: NodeId) -> Result<f64> {
    let v = g.value(id);
    if v.shape() != (1, 1) {
        return Err(Error::NonScalarLoss {
            rows: v.rows(),
            cols: v.cols(),
        });
    }
    Ok(v.get(0, 0))
}
