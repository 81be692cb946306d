//! Central finite differences, used to check analytic gradients.

use crate::params::ParamStore;
use crate::tape::Gradients;

/// Result of comparing analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

/// Relative error with a floor on the denominator so that two tiny
/// gradients do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Perturbs every scalar of every parameter by `+-step` and compares
/// `(f(p+h) - f(p-h)) / 2h` with `analytic`.
pub fn check_gradients(
    store: &ParamStore,
    analytic: &Gradients,
    step: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };
    for id in store.ids() {
        let n = store.get(id).len();
        for k in 0..n {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + step;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig - step;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = k;
            }
        }
    }
    report
}
