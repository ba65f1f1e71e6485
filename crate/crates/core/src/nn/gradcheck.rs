//! Central finite-difference gradient checking, used by tests and the
//! acceptance suite against every loss in the repo.

use crate::params::ParamStore;

/// Central finite differences of a scalar loss w.r.t. every parameter.
/// `f` must be deterministic (fix every rng stream it uses).
pub fn finite_diff_grad(
    store: &mut ParamStore,
    mut f: impl FnMut(&ParamStore) -> f64,
    h: f64,
) -> Vec<f64> {
    let n = store.len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = store.params()[i];
        store.params_mut()[i] = orig + h;
        let fp = f(store);
        store.params_mut()[i] = orig - h;
        let fm = f(store);
        store.params_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max relative error between analytic and numeric gradients.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
