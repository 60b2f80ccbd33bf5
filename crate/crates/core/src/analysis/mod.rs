//! Measurement and reporting: mutual information decay, power-law fits, the
//! FLOPs cost model, held-out evaluation and sweep tables.

mod eval;
mod flops;
mod mi;
mod powerlaw;
mod tables;

pub use eval::eval_ce;
pub use flops::{flops_per_step, FlopsBreakdown};
pub use mi::{estimate_mi, MiConfig, MiCurve};
pub use powerlaw::{fit_power_law, fit_power_law_points, PowerLawFit};
pub use tables::{summarize_sweep, SweepTable};
