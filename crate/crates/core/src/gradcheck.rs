//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward closure, so it is independent
//! of every backward rule it verifies.

use crate::error::Result;
use crate::par;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input index, element index)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, rtol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < rtol
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare reverse-mode gradients of `f` against central differences.
///
/// `f` builds a scalar from leaves holding `inputs` (in order). Only inputs
/// with `requires_grad` are checked.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Sync,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradCheckReport::default();
    for (ti, (t, &v)) in inputs.iter().zip(&vars).enumerate() {
        if !t.requires_grad {
            continue;
        }
        let analytic = g
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let numeric = par::map_range(t.numel(), |e| -> Result<f64> {
            let mut plus = inputs.to_vec();
            plus[ti].data[e] += cfg.step;
            let mut minus = inputs.to_vec();
            minus[ti].data[e] -= cfg.step;
            Ok((eval(&plus)? - eval(&minus)?) / (2.0 * cfg.step))
        });
        for (e, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let n = n?;
            let r = rel_err(*a, n, cfg.floor);
            report.max_abs_err = report.max_abs_err.max((a - n).abs());
            if r > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = r.max(report.max_rel_err);
                report.worst = Some((ti, e));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
