//! Central finite differences.
#![allow(dead_code)]

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-3;

/// Norm-wise relative error between analytic and numeric gradients over
/// the probed coordinates. `floor` keeps vanishing gradients from
/// dividing by zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

/// Numeric derivative of `f` at `x` along coordinate `i`.
pub fn central(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += STEP;
    let up = f(&xp);
    xp[i] = x[i] - STEP;
    let down = f(&xp);
    (up - down) / (2.0 * STEP)
}

/// Relative error of `analytic` against central differences of `f` on the
/// coordinates `probe`.
pub fn check(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    probe: &[usize],
    floor: f64,
) -> f64 {
    let numeric: Vec<f64> = probe.iter().map(|&i| central(&mut f, x, i)).collect();
    let picked: Vec<f64> = probe.iter().map(|&i| analytic[i]).collect();
    relative_error(&picked, &numeric, floor)
}
