//! Central finite-difference helpers for checking analytic gradients.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor for [`rel_err`]: entries whose true gradient is below
/// this magnitude are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Numerical gradient of scalar `f` at `x` by central differences with step
/// `h * max(1, |x_i|)`.
pub fn central_diff(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let step = h * orig.abs().max(1.0);
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * step);
    }
    out
}

/// Worst disagreement found by [`check_store`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares `analytic` gradients against central differences of `f` for
/// every entry of every parameter in `store`. Parameters missing from
/// `analytic` are expected to have zero gradient.
pub fn check_store(
    store: &ParamStore,
    h: f64,
    analytic: &[(ParamId, Vec<f64>)],
    mut f: impl FnMut(&ParamStore) -> f64,
) -> GradReport {
    let mut probe = store.clone();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for id in store.ids() {
        let grad = analytic
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, g)| g.as_slice());
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            let step = h * orig.abs().max(1.0);
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(grad.map_or(0.0, |g| g[i]), numeric);
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                if e >= report.max_rel_err {
                    report.worst = Some((store.name(id).to_string(), i));
                }
            }
            report.checked += 1;
        }
    }
    report
}
