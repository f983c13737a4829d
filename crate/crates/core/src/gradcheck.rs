//! Central finite-difference checks of reverse-mode gradients.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, ScsmError};
use crate::params::{ParamId, ParamStore};

/// Step of the five-point central stencil. Its truncation error is
/// `O(h^4)`, so a large step keeps cancellation noise small too.
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Number of scalar entries compared.
    pub checked: usize,
    pub worst_rel: f64,
    /// `path[index]` of the worst entry.
    pub worst_at: String,
    /// Analytic and numeric values at the worst entry.
    pub worst_pair: (f64, f64),
    /// Entries whose analytic gradient was non-zero.
    pub nonzero: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn sample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max).collect()
    }
}

/// Compares the analytic gradient of the scalar `loss` with five-point central
/// differences `(8(f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h` for every
/// listed parameter. Parameters are made trainable for
/// the duration of the check, and at most `max_per_param` evenly spaced
/// entries of each are perturbed.
pub fn check_params(
    store: &mut ParamStore,
    params: &[ParamId],
    max_per_param: usize,
    step: f64,
    floor: f64,
    loss: &dyn Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    let saved: Vec<(bool, bool)> = params.iter().map(|&id| (store.get(id).trainable, store.get(id).pinned)).collect();
    for &id in params {
        let p = store.get_mut(id);
        p.trainable = true;
        p.pinned = false;
    }
    let result = run_check(store, params, max_per_param, step, floor, loss);
    for (&id, (t, pin)) in params.iter().zip(saved) {
        let p = store.get_mut(id);
        p.trainable = t;
        p.pinned = pin;
    }
    result
}

fn run_check(
    store: &mut ParamStore,
    params: &[ParamId],
    max_per_param: usize,
    step: f64,
    floor: f64,
    loss: &dyn Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    if g.value(l).numel() != 1 {
        return Err(ScsmError::dim("gradcheck loss", g.shape(l), &[1]));
    }
    let analytic: Vec<(ParamId, crate::Tensor)> = g.backward(l)?.for_params(&g);
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, store)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheckReport { checked: 0, worst_rel: 0.0, worst_at: String::new(), worst_pair: (0.0, 0.0), nonzero: 0 };
    for &id in params {
        let grad = analytic
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| crate::Tensor::zeros(store.value(id).shape()));
        let original = store.value(id).clone();
        for i in sample_indices(original.numel(), max_per_param) {
            let mut at = |offset: f64| -> Result<f64> {
                let mut t = original.clone();
                t.data_mut()[i] += offset;
                store.reset_value(id, t);
                eval(store)
            };
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            store.reset_value(id, original.clone());
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            let a = grad.data()[i];
            let rel = rel_error(a, numeric, floor);
            report.checked += 1;
            if a != 0.0 {
                report.nonzero += 1;
            }
            if rel > report.worst_rel || report.worst_at.is_empty() {
                report.worst_rel = report.worst_rel.max(rel);
                report.worst_at = format!("{}[{i}]", store.get(id).path);
                report.worst_pair = (a, numeric);
            }
        }
    }
    Ok(report)
}

/// Loss `sum(out * r)` with a fixed random `r`, so every output entry
/// contributes with its own weight.
pub fn projected_sum(g: &mut Graph, out: NodeId, r: &crate::Tensor) -> Result<NodeId> {
    let w = g.input(r.clone());
    let m = g.mul(out, w)?;
    g.sum(m)
}
