//! Training objectives and their analytic gradients.
//!
//! All losses here are differentiated by hand and return `(value, gradient)`
//! pairs; the gradients seed the graph backward pass of the model. The
//! confidence distilling term sharpens predictions away from 0.5 with a
//! curriculum exponent, the boundary texture term matches prediction texture
//! to appearance texture on boundary pixels, and the multi-scale term ties
//! predictions at two resolutions together.

use std::io::Write;

use crate::error::{Error, Result};
use crate::gridcore::{resize_bilinear, resize_bilinear_adjoint, Grid};
use crate::textfmt::fmt17;
use crate::texture::{boundary_mask, texture_appearance, texture_saliency, ModalityStack};

/// Weights of the three stage-1 loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_b: f64,
    pub lambda_m: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 1.0,
            lambda_b: 0.05,
            lambda_m: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_b", self.lambda_b),
            ("lambda_m", self.lambda_m),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Per-step component values. `total` always recomposes exactly from the
/// components and the weights used to build the report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub csd_main: f64,
    pub csd_ref: f64,
    pub btm_main: f64,
    pub btm_ref: f64,
    pub ms: f64,
    pub total: f64,
    pub rho: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.csd_main,
            self.csd_ref,
            self.btm_main,
            self.btm_ref,
            self.ms,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho.is_finite() && (0.0..=1.0).contains(&rho)) {
        return Err(Error::param("rho", format!("must be in [0, 1], got {rho}")));
    }
    Ok(())
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Value and gradient of one confidence-distilling summand, without the 1/N
/// normalization: `-|k|^e` and `-sign(k) * e * |k|^(e-1)` with
/// `k = p - 0.5`, `e = 2^(1-rho)`. Both are 0 at `k = 0`.
pub fn csd_summand(p: f64, rho: f64) -> (f64, f64) {
    let k = p - 0.5;
    if k == 0.0 {
        return (0.0, 0.0);
    }
    let e = (2.0f64).powf(1.0 - rho);
    let a = k.abs();
    (-a.powf(e), -sign0(k) * e * a.powf(e - 1.0))
}

/// Confidence distilling loss.
///
/// `-(1/N) * sum_i |p_i - 0.5|^(2^(1-rho))`. At `rho = 0` this is a negated
/// quadratic pulling gently away from 0.5; at `rho = 1` it is a negated L1
/// with constant-magnitude gradient everywhere off 0.5.
pub fn csd_loss(pred: &Grid, rho: f64) -> Result<(f64, Grid)> {
    check_rho(rho)?;
    if pred.channels() != 1 {
        return Err(Error::shape("csd_loss", "single channel", pred.shape_str()));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Grid::zeros(1, pred.height(), pred.width());
    for (i, &p) in pred.data().iter().enumerate() {
        let (v, g) = csd_summand(p, rho);
        value += v;
        grad.data_mut()[i] = g / n;
    }
    Ok((value / n, grad))
}

/// Boundary texture matching loss.
///
/// Mean over boundary pixels of the dot product between the saliency texture
/// and the appearance texture of the pixel's window. The boundary mask and
/// the appearance texture are constants of the step: only the saliency
/// texture carries gradient. An empty boundary gives 0 with zero gradient.
pub fn btm_loss(pred: &Grid, stack: &ModalityStack, k: usize, alpha: f64) -> Result<(f64, Grid)> {
    if pred.channels() != 1 {
        return Err(Error::shape("btm_loss", "single channel", pred.shape_str()));
    }
    if pred.height() != stack.height() || pred.width() != stack.width() {
        return Err(Error::shape(
            "btm_loss",
            format!("stack matching {}", pred.shape_str()),
            format!("{}x{}", stack.height(), stack.width()),
        ));
    }
    let (h, w) = (pred.height(), pred.width());
    let b = boundary_mask(pred)?;
    let mut grad = Grid::zeros(1, h, w);
    if b.count() == 0 {
        return Ok((0.0, grad));
    }
    let ts = texture_saliency(pred, k)?;
    let ta = texture_appearance(stack, k, alpha)?;
    let inv_b = 1.0 / b.count() as f64;
    let r = k / 2;
    let plane = pred.channel(0);
    let mut value = 0.0;
    for y in 0..h {
        for x in 0..w {
            if !b.is_boundary(y, x) {
                continue;
            }
            let es = ts.entries_at(y, x);
            let ea = ta.entries_at(y, x);
            value += es.iter().zip(ea).map(|(&s, &a)| s * a).sum::<f64>();
            for wy in 0..k {
                let ny = y as isize + wy as isize - r as isize;
                if ny < 0 || ny as usize >= h {
                    continue;
                }
                for wx in 0..k {
                    let nx = x as isize + wx as isize - r as isize;
                    if nx < 0 || nx as usize >= w {
                        continue;
                    }
                    let s = sign0(plane[y * w + x] - plane[ny as usize * w + nx as usize]);
                    if s == 0.0 {
                        continue;
                    }
                    let g = ea[wy * k + wx] * s * inv_b;
                    grad.data_mut()[y * w + x] += g;
                    grad.data_mut()[ny as usize * w + nx as usize] -= g;
                }
            }
        }
    }
    Ok((value * inv_b, grad))
}

/// Multi-scale consistency: mean squared difference between the main-scale
/// prediction and the reference prediction resized to the main scale.
/// Returns gradients for both predictions; the reference gradient flows
/// through the resize.
pub fn ms_loss(pred_main: &Grid, pred_ref: &Grid) -> Result<(f64, Grid, Grid)> {
    if pred_main.channels() != 1 || pred_ref.channels() != 1 {
        return Err(Error::shape(
            "ms_loss",
            "single channel predictions",
            format!("{} and {}", pred_main.shape_str(), pred_ref.shape_str()),
        ));
    }
    let (h, w) = (pred_main.height(), pred_main.width());
    let resized = resize_bilinear(pred_ref, h, w)?;
    let n = (h * w) as f64;
    let mut value = 0.0;
    let mut d_main = Grid::zeros(1, h, w);
    let mut d_resized = Grid::zeros(1, h, w);
    for i in 0..h * w {
        let diff = pred_main.data()[i] - resized.data()[i];
        value += diff * diff;
        d_main.data_mut()[i] = 2.0 * diff / n;
        d_resized.data_mut()[i] = -2.0 * diff / n;
    }
    let d_ref = resize_bilinear_adjoint(&d_resized, pred_ref.height(), pred_ref.width());
    Ok((value / n, d_main, d_ref))
}

/// Predictions and appearance stacks for one sample at the two scales.
#[derive(Debug)]
pub struct ScalePair<'a> {
    pub pred_main: &'a Grid,
    pub pred_ref: &'a Grid,
    pub stack_main: &'a ModalityStack,
    pub stack_ref: &'a ModalityStack,
}

/// Weighted stage-1 objective. Distilling and texture terms are evaluated at
/// both scales, the consistency term once across the pair. Returns the
/// report plus the loss gradient with respect to each scale's prediction.
pub fn total_loss(
    pair: &ScalePair,
    weights: &LossWeights,
    rho: f64,
    k: usize,
    alpha: f64,
) -> Result<(LossReport, Grid, Grid)> {
    weights.validate()?;
    let tag = |name: &'static str| move |e: Error| Error::Param {
        name: name.to_string(),
        reason: e.to_string(),
    };
    let (csd_main, g_cm) = csd_loss(pair.pred_main, rho).map_err(tag("csd_main"))?;
    let (csd_ref, g_cr) = csd_loss(pair.pred_ref, rho).map_err(tag("csd_ref"))?;
    let (btm_main, g_bm) = btm_loss(pair.pred_main, pair.stack_main, k, alpha).map_err(tag("btm_main"))?;
    let (btm_ref, g_br) = btm_loss(pair.pred_ref, pair.stack_ref, k, alpha).map_err(tag("btm_ref"))?;
    let (ms, g_mm, g_mr) = ms_loss(pair.pred_main, pair.pred_ref).map_err(tag("ms"))?;

    let total = weights.lambda_c * (csd_main + csd_ref)
        + weights.lambda_b * (btm_main + btm_ref)
        + weights.lambda_m * ms;
    let report = LossReport {
        csd_main,
        csd_ref,
        btm_main,
        btm_ref,
        ms,
        total,
        rho,
    };

    let combine = |gc: &Grid, gb: &Grid, gm: &Grid| -> Grid {
        let mut out = Grid::zeros(1, gc.height(), gc.width());
        for i in 0..out.len() {
            out.data_mut()[i] = weights.lambda_c * gc.data()[i]
                + weights.lambda_b * gb.data()[i]
                + weights.lambda_m * gm.data()[i];
        }
        out
    };
    Ok((report, combine(&g_cm, &g_bm, &g_mm), combine(&g_cr, &g_br, &g_mr)))
}

/// IOU loss for supervised-style retraining on binary labels:
/// `1 - sum(p*g) / sum(p + g - p*g)`. An all-zero pair has empty union and
/// scores 0 by convention.
pub fn iou_loss(pred: &Grid, label: &Grid) -> Result<(f64, Grid)> {
    if !pred.same_shape(label) {
        return Err(Error::shape("iou_loss", pred.shape_str(), label.shape_str()));
    }
    if let Some(i) = label.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::param(
            "label",
            format!("value {} at flat index {i} is not binary", label.data()[i]),
        ));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&p, &g) in pred.data().iter().zip(label.data()) {
        inter += p * g;
        union += p + g - p * g;
    }
    let mut grad = Grid::zeros(pred.channels(), pred.height(), pred.width());
    if union == 0.0 {
        return Ok((0.0, grad));
    }
    let u2 = union * union;
    for (i, (&_p, &g)) in pred.data().iter().zip(label.data()).enumerate() {
        // d(1 - I/U)/dp_i with dI/dp_i = g_i and dU/dp_i = 1 - g_i.
        grad.data_mut()[i] = -(g * union - inter * (1.0 - g)) / u2;
    }
    Ok((1.0 - inter / union, grad))
}

/// Losses that can be plotted as a one-pixel landscape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandscapeLoss {
    Csd,
    L1,
    Bce,
}

impl LandscapeLoss {
    pub fn name(self) -> &'static str {
        match self {
            LandscapeLoss::Csd => "csd",
            LandscapeLoss::L1 => "l1",
            LandscapeLoss::Bce => "bce",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "csd" => Ok(LandscapeLoss::Csd),
            "l1" => Ok(LandscapeLoss::L1),
            "bce" => Ok(LandscapeLoss::Bce),
            other => Err(Error::param("loss", format!("unknown landscape loss \"{other}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandscapeRow {
    pub loss: LandscapeLoss,
    pub rho: f64,
    pub p: f64,
    pub value: f64,
    pub grad: f64,
}

/// Per-sample loss landscape: one row per `(rho, p)` pair.
///
/// The L1 baseline is `|p - 0.5|` with subgradient `sign(p - 0.5)`. The BCE
/// baseline labels each sample with its own 0.5-threshold binarization, so
/// both baselines are label-free like the distilling loss.
pub fn landscape_export(
    loss: LandscapeLoss,
    rho_list: &[f64],
    prediction_samples: &[f64],
) -> Result<Vec<LandscapeRow>> {
    for &p in prediction_samples {
        if !(p.is_finite() && 0.0 < p && p < 1.0) {
            return Err(Error::param("p", format!("sample {p} outside (0, 1)")));
        }
    }
    for &rho in rho_list {
        check_rho(rho)?;
    }
    let mut rows = Vec::with_capacity(rho_list.len() * prediction_samples.len());
    for &rho in rho_list {
        for &p in prediction_samples {
            let (value, grad) = match loss {
                LandscapeLoss::Csd => csd_summand(p, rho),
                LandscapeLoss::L1 => ((p - 0.5).abs(), sign0(p - 0.5)),
                LandscapeLoss::Bce => {
                    let g = if p > 0.5 { 1.0 } else { 0.0 };
                    let value = -(g * p.ln() + (1.0 - g) * (1.0 - p).ln());
                    (value, (p - g) / (p * (1.0 - p)))
                }
            };
            rows.push(LandscapeRow {
                loss,
                rho,
                p,
                value,
                grad,
            });
        }
    }
    Ok(rows)
}

/// Writes landscape rows as CSV with a fixed header; floats carry 17
/// significant digits.
pub fn write_landscape_csv(rows: &[LandscapeRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "loss,rho,p,value,grad")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.loss.name(),
            fmt17(r.rho),
            fmt17(r.p),
            fmt17(r.value),
            fmt17(r.grad)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridcore::grad_check;

    fn stack_from(plane: &Grid, chan0: impl Fn(usize, usize) -> f64) -> ModalityStack {
        let (_, h, w) = plane.shape();
        let rgb = Grid::from_fn(3, h, w, |c, y, x| if c == 0 { chan0(y, x) } else { 0.0 }).unwrap();
        ModalityStack::new(rgb, &[], &[]).unwrap()
    }

    fn uniform_stack(h: usize, w: usize) -> ModalityStack {
        ModalityStack::new(Grid::constant(3, h, w, 0.5).unwrap(), &[], &[]).unwrap()
    }

    #[test]
    fn csd_at_half_is_zero() {
        let pred = Grid::constant(1, 3, 3, 0.5).unwrap();
        for rho in [0.0, 0.3, 1.0] {
            let (v, g) = csd_loss(&pred, rho).unwrap();
            assert_eq!(v, 0.0);
            assert!(g.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn csd_hand_values() {
        // rho = 0, one pixel at 1.0: -(0.5)^2.
        let (v, _) = csd_loss(&Grid::constant(1, 1, 1, 1.0).unwrap(), 0.0).unwrap();
        assert!((v - (-0.25)).abs() < 1e-15);
        // rho = 1, pixels {0.9, 0.1}: -(0.4 + 0.4)/2.
        let (v, _) = csd_loss(&Grid::new(1, 1, 2, vec![0.9, 0.1]).unwrap(), 1.0).unwrap();
        assert!((v - (-0.4)).abs() < 1e-15);
        // rho = 0, summand gradient at p = 0.8 is -2 * 0.3.
        let (_, g) = csd_summand(0.8, 0.0);
        assert!((g - (-0.6)).abs() < 1e-15);
        // rho = 0, summand gradient at p = 0.75 is -0.5.
        let (_, g) = csd_summand(0.75, 0.0);
        assert!((g - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn csd_identities_at_the_endpoints() {
        let pred = Grid::from_fn(1, 5, 5, |_, y, x| (((y * 5 + x) as f64 * 0.61).sin() * 0.5 + 0.5).clamp(0.0, 1.0)).unwrap();
        let (v0, _) = csd_loss(&pred, 0.0).unwrap();
        let sq: f64 = pred.data().iter().map(|&p| (p - 0.5) * (p - 0.5)).sum::<f64>() / pred.len() as f64;
        assert!((v0 + sq).abs() < 1e-12);
        let (v1, _) = csd_loss(&pred, 1.0).unwrap();
        let ab: f64 = pred.data().iter().map(|&p| (p - 0.5).abs()).sum::<f64>() / pred.len() as f64;
        assert!((v1 + ab).abs() < 1e-12);
    }

    #[test]
    fn csd_gradient_magnitude_monotone_in_confidence() {
        for rho in [0.0, 0.25, 0.5, 0.75] {
            let mut last = -1.0;
            for i in 1..=50 {
                let k = i as f64 * 0.01; // |k| in (0, 0.5]
                let (_, g) = csd_summand(0.5 + k, rho);
                assert!(g.abs() >= last - 1e-15, "rho={rho} k={k}");
                last = g.abs();
            }
        }
        for i in 1..=50 {
            let (_, g) = csd_summand(0.5 + i as f64 * 0.01, 1.0);
            assert!((g.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csd_gradient_matches_finite_differences() {
        for rho in [0.0, 0.25, 0.5, 0.75, 1.0] {
            // Values at least 0.05 from 0, 0.5, and 1.
            let pred = Grid::from_fn(1, 4, 4, |_, y, x| {
                let t = ((y * 4 + x) as f64 * 0.83).sin();
                if t >= 0.0 {
                    0.56 + 0.38 * t.min(1.0) * 0.99
                } else {
                    0.44 + 0.38 * t.max(-1.0) * 0.99
                }
            })
            .unwrap();
            let err = grad_check(
                |g| csd_loss(g, rho).map(|(v, _)| v),
                |g| csd_loss(g, rho).map(|(_, d)| d),
                &pred,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "rho={rho} err={err}");
        }
    }

    #[test]
    fn csd_rejects_bad_rho() {
        let pred = Grid::constant(1, 2, 2, 0.5).unwrap();
        assert!(csd_loss(&pred, -0.1).is_err());
        assert!(csd_loss(&pred, 1.1).is_err());
        assert!(csd_loss(&pred, f64::NAN).is_err());
    }

    #[test]
    fn btm_of_constant_prediction_is_zero() {
        let pred = Grid::constant(1, 6, 6, 0.8).unwrap();
        let (v, g) = btm_loss(&pred, &uniform_stack(6, 6), 3, 200.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    // [0,0,1,1] with uniform appearance: boundary pixels 1 and 2, each
    // window dot product is 1, mean 1.
    #[test]
    fn btm_row_fixture_uniform_appearance() {
        let pred = Grid::new(1, 1, 4, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (v, _) = btm_loss(&pred, &uniform_stack(1, 4), 3, 200.0).unwrap();
        assert!((v - 1.0).abs() < 1e-15, "{v}");
    }

    // Same prediction, but the appearance has the same edge: every paired
    // entry is weighted by exp(-200), so the loss collapses to ~0.
    #[test]
    fn btm_aligned_appearance_edge_scores_near_zero() {
        let pred = Grid::new(1, 1, 4, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let stack = stack_from(&pred, |_, x| if x < 2 { 0.0 } else { 1.0 });
        let (v, _) = btm_loss(&pred, &stack, 3, 200.0).unwrap();
        assert!(v < 1e-80, "{v}");
    }

    #[test]
    fn btm_rejects_shape_mismatch() {
        let pred = Grid::constant(1, 4, 4, 0.6).unwrap();
        assert!(btm_loss(&pred, &uniform_stack(5, 5), 3, 200.0).is_err());
    }

    // Finite differences with the boundary mask and appearance texture
    // frozen at the base point, matching the documented gradient flow.
    #[test]
    fn btm_gradient_matches_frozen_finite_differences() {
        for seed in 0..3u32 {
            // Values on a 0.01 lattice: pairwise differences are either exactly
            // 0 (symmetric FD cancels, matching the 0 subgradient) or far wider
            // than the FD step, so no kink of |p_i - p_j| is crossed.
            let pred = Grid::from_fn(1, 8, 8, |_, y, x| {
                let raw = ((y * 8 + x) as f64 * 0.71 + seed as f64 * 1.3).sin() * 0.49 + 0.5;
                (raw.clamp(0.0, 1.0) * 100.0).round() / 100.0
            })
            .unwrap();
            let stack = stack_from(&pred, |y, x| (((y * 3 + x * 5) as f64 * 0.29).cos() * 0.5 + 0.5).clamp(0.0, 1.0));
            let k = 5;
            // Small alpha keeps every appearance weight, and so every nonzero
            // gradient entry, far above finite-difference resolution.
            let alpha = 2.0;
            let b = boundary_mask(&pred).unwrap();
            let ta = texture_appearance(&stack, k, alpha).unwrap();
            assert!(b.count() > 0);
            let frozen_value = |p: &Grid| -> Result<f64> {
                let ts = texture_saliency(p, k)?;
                let mut v = 0.0;
                for y in 0..8 {
                    for x in 0..8 {
                        if b.is_boundary(y, x) {
                            v += ts
                                .entries_at(y, x)
                                .iter()
                                .zip(ta.entries_at(y, x))
                                .map(|(&s, &a)| s * a)
                                .sum::<f64>();
                        }
                    }
                }
                Ok(v / b.count() as f64)
            };
            let err = grad_check(
                frozen_value,
                |p| btm_loss(p, &stack, k, alpha).map(|(_, g)| g),
                &pred,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "seed={seed} err={err}");
        }
    }

    // A prediction edge sitting on the appearance edge is cheaper than the
    // same edge shifted two pixels into a flat region.
    #[test]
    fn btm_prefers_edge_aligned_boundaries() {
        for rep in 0..10usize {
            let n = 12;
            let edge = 3 + (rep % 5); // appearance edge column
            let app = Grid::from_fn(1, n, n, |_, _, x| if x < edge { 0.2 } else { 0.8 }).unwrap();
            let stack = stack_from(&app, |y, x| app.at(0, y, x));
            let pred_at = |col: usize| {
                Grid::from_fn(1, n, n, |_, _, x| if x < col { 0.1 } else { 0.9 }).unwrap()
            };
            let (aligned, _) = btm_loss(&pred_at(edge), &stack, 5, 200.0).unwrap();
            let (shifted, _) = btm_loss(&pred_at(edge + 2), &stack, 5, 200.0).unwrap();
            assert!(aligned < shifted, "rep={rep} aligned={aligned} shifted={shifted}");
        }
    }

    #[test]
    fn ms_examples() {
        let a = Grid::from_fn(1, 2, 2, |_, y, x| (y * 2 + x) as f64 / 4.0).unwrap();
        let (v, _, _) = ms_loss(&a, &a).unwrap();
        assert_eq!(v, 0.0);
        let ones = Grid::constant(1, 3, 3, 1.0).unwrap();
        let zeros = Grid::zeros(1, 2, 2);
        let (v, _, _) = ms_loss(&ones, &zeros).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn ms_gradients_match_finite_differences() {
        let main = Grid::from_fn(1, 6, 6, |_, y, x| (((y * 6 + x) as f64 * 0.53).sin() * 0.4 + 0.5).clamp(0.0, 1.0)).unwrap();
        let refp = Grid::from_fn(1, 4, 4, |_, y, x| (((y * 4 + x) as f64 * 0.91).cos() * 0.4 + 0.5).clamp(0.0, 1.0)).unwrap();
        let e_main = grad_check(
            |g| ms_loss(g, &refp).map(|(v, _, _)| v),
            |g| ms_loss(g, &refp).map(|(_, d, _)| d),
            &main,
            1e-6,
        )
        .unwrap();
        assert!(e_main < 1e-4, "{e_main}");
        let e_ref = grad_check(
            |g| ms_loss(&main, g).map(|(v, _, _)| v),
            |g| ms_loss(&main, g).map(|(_, _, d)| d),
            &refp,
            1e-6,
        )
        .unwrap();
        assert!(e_ref < 1e-4, "{e_ref}");
    }

    #[test]
    fn iou_examples() {
        let label = Grid::new(1, 2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let (v, _) = iou_loss(&label, &label).unwrap();
        assert_eq!(v, 0.0);
        let disjoint = Grid::new(1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (v, _) = iou_loss(&disjoint, &label).unwrap();
        assert_eq!(v, 1.0);
        // Two predicted, two labeled, one overlapping: 1 - 1/3.
        let pred = Grid::new(1, 2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let (v, _) = iou_loss(&pred, &label).unwrap();
        assert!((v - (1.0 - 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn iou_empty_union_and_validation() {
        let z = Grid::zeros(1, 2, 2);
        let (v, g) = iou_loss(&z, &z).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
        let bad = Grid::constant(1, 2, 2, 0.5).unwrap();
        assert!(iou_loss(&z, &bad).is_err());
    }

    #[test]
    fn iou_gradient_matches_finite_differences() {
        let pred = Grid::from_fn(1, 4, 4, |_, y, x| (((y * 4 + x) as f64 * 0.47).sin() * 0.4 + 0.5).clamp(0.01, 0.99)).unwrap();
        let label = Grid::from_fn(1, 4, 4, |_, y, x| if (y + x) % 3 == 0 { 1.0 } else { 0.0 }).unwrap();
        let err = grad_check(
            |g| iou_loss(g, &label).map(|(v, _)| v),
            |g| iou_loss(g, &label).map(|(_, d)| d),
            &pred,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn total_recomposes_from_components() {
        let pred_main = Grid::from_fn(1, 8, 8, |_, y, x| (((y * 8 + x) as f64 * 0.37).sin() * 0.45 + 0.5).clamp(0.0, 1.0)).unwrap();
        let pred_ref = Grid::from_fn(1, 6, 6, |_, y, x| (((y * 6 + x) as f64 * 0.59).cos() * 0.45 + 0.5).clamp(0.0, 1.0)).unwrap();
        let stack_main = stack_from(&pred_main, |y, x| ((y + x) as f64 / 14.0).clamp(0.0, 1.0));
        let stack_ref = stack_main.resized(6, 6).unwrap();
        let pair = ScalePair {
            pred_main: &pred_main,
            pred_ref: &pred_ref,
            stack_main: &stack_main,
            stack_ref: &stack_ref,
        };
        let weights = LossWeights::default();
        let (report, _, _) = total_loss(&pair, &weights, 0.4, 3, 200.0).unwrap();

        let (cm, _) = csd_loss(&pred_main, 0.4).unwrap();
        let (cr, _) = csd_loss(&pred_ref, 0.4).unwrap();
        let (bm, _) = btm_loss(&pred_main, &stack_main, 3, 200.0).unwrap();
        let (br, _) = btm_loss(&pred_ref, &stack_ref, 3, 200.0).unwrap();
        let (ms, _, _) = ms_loss(&pred_main, &pred_ref).unwrap();
        let want = 1.0 * (cm + cr) + 0.05 * (bm + br) + 1.0 * ms;
        assert!((report.total - want).abs() < 1e-12);
        assert_eq!(
            report.total,
            weights.lambda_c * (report.csd_main + report.csd_ref)
                + weights.lambda_b * (report.btm_main + report.btm_ref)
                + weights.lambda_m * report.ms
        );
    }

    #[test]
    fn total_with_zero_weights_is_zero() {
        let pred = Grid::constant(1, 4, 4, 0.7).unwrap();
        let refp = Grid::constant(1, 4, 4, 0.2).unwrap();
        let stack = uniform_stack(4, 4);
        let pair = ScalePair {
            pred_main: &pred,
            pred_ref: &refp,
            stack_main: &stack,
            stack_ref: &stack,
        };
        let weights = LossWeights {
            lambda_c: 0.0,
            lambda_b: 0.0,
            lambda_m: 0.0,
        };
        let (report, gm, gr) = total_loss(&pair, &weights, 0.0, 3, 200.0).unwrap();
        assert_eq!(report.total, 0.0);
        assert!(gm.data().iter().all(|&v| v == 0.0));
        assert!(gr.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn landscape_hand_values() {
        let rows = landscape_export(LandscapeLoss::Csd, &[1.0], &[0.25, 0.75]).unwrap();
        for r in &rows {
            assert!((r.grad.abs() - 1.0).abs() < 1e-12);
        }
        let rows = landscape_export(LandscapeLoss::Csd, &[0.0], &[0.75]).unwrap();
        assert!((rows[0].grad - (-0.5)).abs() < 1e-15);
        let rows = landscape_export(LandscapeLoss::L1, &[0.0], &[0.5]).unwrap();
        assert_eq!(rows[0].grad, 0.0);
        assert_eq!(rows[0].value, 0.0);
        let rows = landscape_export(LandscapeLoss::Bce, &[0.0], &[0.25, 0.5, 0.75]).unwrap();
        for r in &rows {
            assert!(r.value.is_finite() && r.grad.is_finite());
        }
        // p = 0.5 binarizes to label 0 under the strict threshold.
        assert!((rows[1].value - (-(0.5f64.ln()))).abs() < 1e-15);
        assert!((rows[1].grad - 2.0).abs() < 1e-15);
    }

    #[test]
    fn landscape_row_count_and_validation() {
        let ps: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let rows = landscape_export(LandscapeLoss::L1, &[0.0, 0.5, 1.0], &ps).unwrap();
        assert_eq!(rows.len(), 3 * 9);
        assert!(landscape_export(LandscapeLoss::Csd, &[0.0], &[0.0]).is_err());
        assert!(landscape_export(LandscapeLoss::Csd, &[0.0], &[1.0]).is_err());
        assert!(landscape_export(LandscapeLoss::Csd, &[1.5], &[0.5]).is_err());
    }

    #[test]
    fn landscape_csv_shape() {
        let rows = landscape_export(LandscapeLoss::Csd, &[0.5], &[0.25, 0.75]).unwrap();
        let mut buf = Vec::new();
        write_landscape_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "loss,rho,p,value,grad");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("csd,"));
        assert_eq!(lines[1].split(',').count(), 5);
    }
}
