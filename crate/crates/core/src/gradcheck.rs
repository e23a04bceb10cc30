//! Central finite-difference verification of analytic gradients.

use thiserror::Error;

use crate::param::{Gradients, ParamId, ParamStore};

/// Gradient entries smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("objective is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("objective failed: {0}")]
    Objective(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares the analytic gradient returned by `objective` against central
/// differences `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every element of `ids`.
/// At most `max_per_param` elements of each parameter are probed (evenly
/// strided); `None` checks them all.
pub fn grad_check<F, E>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    max_per_param: Option<usize>,
    objective: F,
) -> Result<GradCheckReport, GradCheckError>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients), E>,
    E: std::fmt::Display,
{
    let eval = |s: &ParamStore| objective(s).map_err(|e| GradCheckError::Objective(e.to_string()));
    let (f0, analytic) = eval(store)?;
    let (f1, _) = eval(store)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(GradCheckError::NonDeterministic {
            first: f0,
            second: f1,
        });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &id in ids {
        let n = store.value(id).len();
        let stride = match max_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store)?.0;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store)?.0;
            store.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::{Tensor, TensorError};

    #[test]
    fn quadratic_passes_and_sign_error_fails() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row_vector(vec![0.3, -1.2, 2.0]).unwrap(), true);
        let objective = |s: &ParamStore| -> Result<(f64, Gradients), TensorError> {
            let mut g = Graph::new(s);
            let wv = g.param(w);
            let sq = g.matmul_t(wv, wv);
            let out = g.backward(sq)?;
            Ok((g.scalar(sq), out))
        };
        let ok = grad_check(&mut store, &[w], 1e-5, None, objective).unwrap();
        assert!(ok.max_rel_error < 1e-8, "{ok:?}");
        assert_eq!(ok.checked, 3);

        let flipped = |s: &ParamStore| -> Result<(f64, Gradients), TensorError> {
            let (v, g) = objective(s)?;
            let mut neg = Gradients::new(s.len());
            neg.add_scaled(&g, -1.0);
            Ok((v, neg))
        };
        let bad = grad_check(&mut store, &[w], 1e-5, None, flipped).unwrap();
        assert!(bad.max_rel_error > 1.0);
    }

    #[test]
    fn detects_nondeterminism() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.0), true);
        let calls = AtomicUsize::new(0);
        let res = grad_check(&mut store, &[w], 1e-5, None, |_s: &ParamStore| {
            let c = calls.fetch_add(1, Ordering::SeqCst);
            Ok::<_, TensorError>((c as f64, Gradients::new(1)))
        });
        assert!(matches!(res, Err(GradCheckError::NonDeterministic { .. })));
    }
}
