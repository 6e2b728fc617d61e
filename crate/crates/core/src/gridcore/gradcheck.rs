//! Central finite-difference oracle for gradients.

use crate::error::{Error, Result};

use super::grid::Grid;

/// Compares an analytic gradient against central finite differences.
///
/// `f` maps a grid to a scalar; `analytic` returns its claimed gradient at
/// the same point. Every element of `point` is perturbed by `+eps` and
/// `-eps`; the relative error of element `i` is
/// `|a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`, and the maximum over all
/// elements is returned. Non-finite values of `f` are propagated as errors.
pub fn grad_check(
    f: impl Fn(&Grid) -> Result<f64>,
    analytic: impl Fn(&Grid) -> Result<Grid>,
    point: &Grid,
    eps: f64,
) -> Result<f64> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::param("eps", "must be finite and positive"));
    }
    let grad = analytic(point)?;
    if !grad.same_shape(point) {
        return Err(Error::shape("grad_check analytic gradient", point.shape_str(), grad.shape_str()));
    }
    let mut worst = 0.0f64;
    let base = point.data().to_vec();
    let (c, h, w) = point.shape();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Grid::new(c, h, w, plus)?)?;
        let fm = f(&Grid::new(c, h, w, minus)?)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("grad_check f at perturbed element {i}")));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = grad.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
