//! Central finite differences, the oracle behind every gradient test.

use crate::error::{Error, Result};

/// Denominator floor for relative errors, so that gradients that are zero in
/// both routes compare as equal instead of dividing noise by noise.
pub const REL_FLOOR: f64 = 1e-8;

/// Components below this fraction of the largest numeric gradient are
/// compared on that scale; in 64-bit their central differences are noise.
pub const SCALE_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference gradient `(f(p + h·eₖ) − f(p − h·eₖ)) / 2h`.
pub fn numerical_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + h;
            let plus = f(&p);
            p[k] = orig - h;
            let minus = f(&p);
            p[k] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// The denominator is floored at `max(REL_FLOOR, SCALE_FLOOR·max|n|)`.
pub fn finite_diff_check(
    f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters vs {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let numeric = numerical_gradient(f, params, h);
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = REL_FLOOR.max(SCALE_FLOOR * scale);
    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error_floored(*a, *n, floor))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        checked: params.len(),
    })
}
