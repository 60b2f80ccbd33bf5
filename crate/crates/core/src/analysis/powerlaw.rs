//! Least-squares fit of `y = C0 + a d^k`.
//!
//! For fixed `k` the model is linear in `(C0, a)`, so the residual is
//! profiled over `k` alone: a coarse grid over `[-3, -0.1]` picks a bracket
//! and golden-section search refines it. The fit is done on the raw values,
//! not in log space, because the offset `C0` breaks log-linearity.

use serde::{Deserialize, Serialize};

use super::MiCurve;
use crate::error::{Error, Result};

const K_MIN: f64 = -3.0;
const K_MAX: f64 = -0.1;
const GRID: usize = 291;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub c0: f64,
    pub a: f64,
    pub k: f64,
    /// Residual sum of squares.
    pub rss: f64,
    /// Smallest and largest distance used.
    pub domain: (f64, f64),
    pub n_points: usize,
    /// `a > 0` and `k < 0`: the curve falls towards `C0`.
    pub decaying: bool,
}

impl PowerLawFit {
    pub fn eval(&self, d: f64) -> f64 {
        self.c0 + self.a * d.powf(self.k)
    }
}

/// Best `(C0, a, rss)` for a fixed exponent.
fn profile(d: &[f64], y: &[f64], k: f64) -> (f64, f64, f64) {
    let n = d.len() as f64;
    let u: Vec<f64> = d.iter().map(|x| x.powf(k)).collect();
    let (su, sy) = (u.iter().sum::<f64>(), y.iter().sum::<f64>());
    let (mu, my) = (su / n, sy / n);
    let suu: f64 = u.iter().map(|x| (x - mu) * (x - mu)).sum();
    let suy: f64 = u.iter().zip(y).map(|(x, v)| (x - mu) * (v - my)).sum();
    let a = if suu > 0.0 { suy / suu } else { 0.0 };
    let c0 = my - a * mu;
    let rss = u
        .iter()
        .zip(y)
        .map(|(x, v)| (v - c0 - a * x).powi(2))
        .sum();
    (c0, a, rss)
}

/// Fit `(d, y)` pairs directly.
pub fn fit_power_law_points(d: &[f64], y: &[f64]) -> Result<PowerLawFit> {
    if d.len() != y.len() {
        return Err(Error::Input("distances and values differ in length".into()));
    }
    if d.len() < 4 {
        return Err(Error::Fit(format!("need at least 4 points, got {}", d.len())));
    }
    if d.iter().chain(y).any(|v| !v.is_finite()) || d.iter().any(|&x| x <= 0.0) {
        return Err(Error::Input("points must be finite with positive distances".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let spread = y.iter().fold(0f64, |m, v| m.max((v - mean).abs()));
    if spread <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::Fit(format!(
            "degenerate curve: values constant at {mean}, exponent unidentifiable"
        )));
    }

    let rss = |k: f64| profile(d, y, k).2;
    let step = (K_MAX - K_MIN) / (GRID - 1) as f64;
    let best = (0..GRID)
        .map(|i| K_MIN + i as f64 * step)
        .map(|k| (k, rss(k)))
        .fold((K_MIN, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
    let (mut lo, mut hi) = ((best.0 - step).max(K_MIN), (best.0 + step).min(K_MAX));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut x1, mut x2) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
    let (mut f1, mut f2) = (rss(x1), rss(x2));
    while hi - lo > 1e-12 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = rss(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = rss(x2);
        }
    }
    let k = 0.5 * (lo + hi);
    let (c0, a, rss_k) = profile(d, y, k);
    let (c0, a, k, rss_k) = if rss_k <= best.1 {
        (c0, a, k, rss_k)
    } else {
        let (c, a, r) = profile(d, y, best.0);
        (c, a, best.0, r)
    };
    if a.abs() <= 1e-12 * spread.max(1.0) {
        return Err(Error::Fit("degenerate curve: no power-law component".into()));
    }
    let (dmin, dmax) = d
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    Ok(PowerLawFit {
        c0,
        a,
        k,
        rss: rss_k,
        domain: (dmin, dmax),
        n_points: d.len(),
        decaying: a > 0.0 && k < 0.0,
    })
}

/// Fit the valid points of an MI curve.
pub fn fit_power_law(curve: &MiCurve) -> Result<PowerLawFit> {
    let (d, y) = curve.valid_points();
    fit_power_law_points(&d, &y)
}
