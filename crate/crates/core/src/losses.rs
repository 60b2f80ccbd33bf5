//! Cross-entropy and the multi-hot cross-entropy family.
//!
//! Every loss returns its value together with the exact gradient with respect
//! to the logits, so the graph can attach it as a single node. Internally all
//! arithmetic runs in `f64`; the gradient is cast to the logits' precision.
//!
//! Batch aggregation follows the bag loop of the reference training code: for
//! each bag slot `i` the CE is averaged over the rows whose slot-`i` label is
//! valid, and the slot means are combined with normalised weights `g(i)`.
//! For a single row this is exactly `sum_i g(i) CE(z, y_i) / sum_i g(i)` over
//! the valid slots.

use serde::{Deserialize, Serialize};

use crate::data::{TokenTensor, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::tensor::{logsumexp_f64, Graph, Scalar, Tensor, Var};

/// Weight profile over bag positions `i = 1..=s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BagWeighting {
    #[default]
    Uniform,
    /// `1 / i`
    PowerLaw,
    /// `exp(-i)`
    Exponential,
    /// Only the first position.
    FirstToken,
    /// `C0 + a * i^k` from a mutual-information fit, floored at 1e-6.
    FittedPowerLaw { c0: f64, a: f64, k: f64 },
}

const FITTED_FLOOR: f64 = 1e-6;

impl BagWeighting {
    /// Unnormalised weights `g(1..=s)`.
    pub fn weights(&self, s: usize) -> Vec<f64> {
        (1..=s)
            .map(|i| {
                let x = i as f64;
                match *self {
                    BagWeighting::Uniform => 1.0,
                    BagWeighting::PowerLaw => 1.0 / x,
                    BagWeighting::Exponential => (-x).exp(),
                    BagWeighting::FirstToken => {
                        if i == 1 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    BagWeighting::FittedPowerLaw { c0, a, k } => (c0 + a * x.powf(k)).max(FITTED_FLOOR),
                }
            })
            .collect()
    }

    /// Weights must be finite, non-negative and non-increasing over `1..=s`.
    pub fn validate(&self, s: usize) -> Result<()> {
        let w = self.weights(s);
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("{self:?}: invalid weights {w:?}")));
        }
        if w.windows(2).any(|p| p[1] > p[0] * (1.0 + 1e-12)) {
            return Err(Error::Config(format!(
                "{self:?}: weights must not increase with position, got {w:?}"
            )));
        }
        Ok(())
    }
}

/// Which multi-hot objective the superposition phase trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MceVariant {
    /// Mean CE over the bag (target entropy dropped).
    #[default]
    UniformSimplified,
    /// Mean CE minus `log |y|`: the KL divergence to the uniform bag target.
    UniformCorrected,
    /// `-log` of the total probability mass on the bag.
    Alt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Superposition,
    Recovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub value: f64,
    /// Mean CE of each bag slot over the rows where that slot is valid.
    pub per_position_values: Vec<f64>,
    pub valid_target_count: usize,
    /// Constant subtracted from the weighted slot combination (the mean
    /// target entropy for the corrected form, zero otherwise).
    pub entropy_offset: f64,
    /// Set when no target contributed.
    pub warning: Option<String>,
}

/// A loss value and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub report: LossReport,
    pub grad: Vec<T>,
}

impl<T> LossOutput<T> {
    pub fn value(&self) -> f64 {
        self.report.value
    }
}

struct LogitRows<'a, T> {
    data: &'a [T],
    vocab: usize,
    rows: usize,
    lse: Vec<f64>,
}

impl<'a, T: Scalar> LogitRows<'a, T> {
    fn new(logits: &'a Tensor<T>) -> Result<Self> {
        if logits.ndim() == 0 {
            return Err(Error::shape("logits must have a vocabulary axis"));
        }
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let vocab = logits.last_dim();
        let rows = logits.numel() / vocab;
        let lse = logits.data.chunks(vocab).map(logsumexp_f64).collect();
        Ok(LogitRows {
            data: &logits.data,
            vocab,
            rows,
            lse,
        })
    }

    fn z(&self, r: usize, y: usize) -> f64 {
        self.data[r * self.vocab + y].as_f64()
    }

    fn ce(&self, r: usize, y: usize) -> f64 {
        self.lse[r] - self.z(r, y)
    }

    fn prob(&self, r: usize, j: usize) -> f64 {
        (self.z(r, j) - self.lse[r]).exp()
    }
}

/// Labels viewed as `rows x s`.
fn bag_view(labels: &[i64], rows: usize, vocab: usize) -> Result<usize> {
    if rows == 0 || labels.len() % rows != 0 {
        return Err(Error::shape(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels
        .iter()
        .find(|&&y| y != IGNORE_INDEX && (y < 0 || y as usize >= vocab))
    {
        return Err(Error::Index(format!("target {bad} outside [0, {vocab})")));
    }
    Ok(labels.len() / rows)
}

fn bag_labels<'a>(bag: &'a TokenTensor, rows: usize) -> Result<&'a [i64]> {
    let s = *bag.shape.last().unwrap_or(&0);
    if s == 0 || bag.data.len() != rows * s {
        return Err(Error::shape(format!(
            "bag labels {:?} do not match {rows} logit rows",
            bag.shape
        )));
    }
    Ok(&bag.data)
}

fn valid(y: i64) -> Option<usize> {
    (y != IGNORE_INDEX).then_some(y as usize)
}

/// Slot-major weighted CE; the shared core of every CE-family loss.
fn weighted_ce<T: Scalar>(lr: &LogitRows<T>, labels: &[i64], g: &[f64]) -> Result<LossOutput<T>> {
    let s = bag_view(labels, lr.rows, lr.vocab)?;
    debug_assert_eq!(g.len(), s);
    let mut count = vec![0usize; s];
    let mut sum = vec![0f64; s];
    for r in 0..lr.rows {
        for i in 0..s {
            if let Some(y) = valid(labels[r * s + i]) {
                count[i] += 1;
                sum[i] += lr.ce(r, y);
            }
        }
    }
    let per_position: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&t, &c)| if c > 0 { t / c as f64 } else { 0.0 })
        .collect();
    let active: Vec<bool> = (0..s).map(|i| count[i] > 0 && g[i] > 0.0).collect();
    let total_w: f64 = (0..s).filter(|&i| active[i]).map(|i| g[i]).sum();
    let valid_count = count.iter().sum();
    let mut grad = vec![T::zero(); lr.rows * lr.vocab];
    if total_w <= 0.0 {
        return Ok(LossOutput {
            report: LossReport {
                value: 0.0,
                per_position_values: per_position,
                valid_target_count: valid_count,
                entropy_offset: 0.0,
                warning: Some("no valid targets; loss defined as 0".into()),
            },
            grad,
        });
    }
    let w: Vec<f64> = (0..s)
        .map(|i| if active[i] { g[i] / total_w } else { 0.0 })
        .collect();
    let value = (0..s)
        .filter(|&i| active[i])
        .fold(0.0, |acc, i| acc + w[i] * per_position[i]);

    let coef: Vec<f64> = (0..s)
        .map(|i| if active[i] { w[i] / count[i] as f64 } else { 0.0 })
        .collect();
    for r in 0..lr.rows {
        let row_coef: f64 = (0..s)
            .filter(|&i| valid(labels[r * s + i]).is_some())
            .map(|i| coef[i])
            .sum();
        if row_coef == 0.0 {
            continue;
        }
        let mut row = vec![0f64; lr.vocab];
        for (j, x) in row.iter_mut().enumerate() {
            *x = row_coef * lr.prob(r, j);
        }
        for i in 0..s {
            if let Some(y) = valid(labels[r * s + i]) {
                row[y] -= coef[i];
            }
        }
        for (gz, x) in grad[r * lr.vocab..(r + 1) * lr.vocab].iter_mut().zip(row) {
            *gz = T::of_f64(x);
        }
    }
    Ok(LossOutput {
        report: LossReport {
            value,
            per_position_values: per_position,
            valid_target_count: valid_count,
            entropy_offset: 0.0,
            warning: None,
        },
        grad,
    })
}

/// Mean next-token cross-entropy over non-ignored targets.
///
/// `logits` is `[..., V]` and `targets` holds one label per logit row.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, targets: &[i64]) -> Result<LossOutput<T>> {
    let lr = LogitRows::new(logits)?;
    if targets.len() != lr.rows {
        return Err(Error::shape(format!(
            "{} targets for {} logit rows",
            targets.len(),
            lr.rows
        )));
    }
    weighted_ce(&lr, targets, &[1.0])
}

/// Uniform multi-hot CE: mean CE over the valid bag entries, optionally minus
/// `log |y_valid|` (averaged over rows) to give the KL form.
pub fn mce_uniform<T: Scalar>(
    logits: &Tensor<T>,
    bag: &TokenTensor,
    corrected: bool,
) -> Result<LossOutput<T>> {
    let lr = LogitRows::new(logits)?;
    let labels = bag_labels(bag, lr.rows)?;
    let s = labels.len() / lr.rows;
    let mut out = weighted_ce(&lr, labels, &vec![1.0; s])?;
    if corrected && out.report.warning.is_none() {
        let (mut ent, mut rows) = (0.0, 0usize);
        for r in 0..lr.rows {
            let n = labels[r * s..(r + 1) * s]
                .iter()
                .filter(|&&y| y != IGNORE_INDEX)
                .count();
            if n > 0 {
                ent += (n as f64).ln();
                rows += 1;
            }
        }
        let offset = ent / rows as f64;
        out.report.value -= offset;
        out.report.entropy_offset = offset;
    }
    Ok(out)
}

/// Position-weighted multi-hot CE.
pub fn mce_weighted<T: Scalar>(
    logits: &Tensor<T>,
    bag: &TokenTensor,
    weighting: BagWeighting,
) -> Result<LossOutput<T>> {
    let lr = LogitRows::new(logits)?;
    let labels = bag_labels(bag, lr.rows)?;
    let s = labels.len() / lr.rows;
    weighting.validate(s)?;
    weighted_ce(&lr, labels, &weighting.weights(s))
}

/// Composite-label loss `-log sum_{y in bag} P(y)`, averaged over rows with at
/// least one valid label. Duplicate tokens in a bag count once.
pub fn mce_alt<T: Scalar>(logits: &Tensor<T>, bag: &TokenTensor) -> Result<LossOutput<T>> {
    let lr = LogitRows::new(logits)?;
    let labels = bag_labels(bag, lr.rows)?;
    let s = bag_view(labels, lr.rows, lr.vocab)?;
    let diag = weighted_ce(&lr, labels, &vec![1.0; s])?;

    let mut members: Vec<Vec<usize>> = Vec::with_capacity(lr.rows);
    for r in 0..lr.rows {
        let mut ys: Vec<usize> = labels[r * s..(r + 1) * s]
            .iter()
            .filter_map(|&y| valid(y))
            .collect();
        ys.sort_unstable();
        ys.dedup();
        members.push(ys);
    }
    let n_rows = members.iter().filter(|m| !m.is_empty()).count();
    let mut grad = vec![T::zero(); lr.rows * lr.vocab];
    if n_rows == 0 {
        return Ok(LossOutput {
            report: LossReport {
                value: 0.0,
                warning: Some("no valid targets; loss defined as 0".into()),
                ..diag.report
            },
            grad,
        });
    }
    let inv = 1.0 / n_rows as f64;
    let mut total = 0.0;
    for (r, ys) in members.iter().enumerate() {
        if ys.is_empty() {
            continue;
        }
        let zb: Vec<f64> = ys.iter().map(|&y| lr.z(r, y)).collect();
        let bag_lse = logsumexp_f64(&zb);
        total += lr.lse[r] - bag_lse;
        let row = &mut grad[r * lr.vocab..(r + 1) * lr.vocab];
        for (j, gz) in row.iter_mut().enumerate() {
            *gz = T::of_f64(inv * lr.prob(r, j));
        }
        for (&y, &z) in ys.iter().zip(&zb) {
            let q = (z - bag_lse).exp();
            row[y] = T::of_f64(inv * lr.prob(r, y) - inv * q);
        }
    }
    Ok(LossOutput {
        report: LossReport {
            value: total / n_rows as f64,
            ..diag.report
        },
        grad,
    })
}

/// Dispatch to the objective of `phase`.
///
/// The recovery phase only ever sees `ce_loss`; bagged labels there are a
/// contract error. In the superposition phase flat labels (input-only
/// ablation) also use `ce_loss`, bagged labels use `variant`.
pub fn loss_for_phase<T: Scalar>(
    phase: Phase,
    logits: &Tensor<T>,
    labels: &TokenTensor,
    variant: MceVariant,
    weighting: BagWeighting,
) -> Result<LossOutput<T>> {
    let bagged = labels.ndim() == 3;
    match phase {
        Phase::Recovery if bagged => Err(Error::contract(
            "recovery phase received bagged labels",
        )),
        Phase::Recovery => ce_loss(logits, &labels.data),
        Phase::Superposition if !bagged => ce_loss(logits, &labels.data),
        Phase::Superposition => match variant {
            MceVariant::UniformSimplified => mce_weighted(logits, labels, weighting),
            MceVariant::UniformCorrected => {
                if weighting != BagWeighting::Uniform {
                    return Err(Error::Config(
                        "the corrected MCE form is defined for uniform weighting only".into(),
                    ));
                }
                mce_uniform(logits, labels, true)
            }
            MceVariant::Alt => mce_alt(logits, labels),
        },
    }
}

/// Evaluate `phase`'s loss on a logits node and attach it to the graph.
pub fn attach_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    phase: Phase,
    labels: &TokenTensor,
    variant: MceVariant,
    weighting: BagWeighting,
) -> Result<(Var, LossReport)> {
    let z = g.tensor(logits);
    let out = loss_for_phase(phase, &z, labels, variant, weighting)?;
    let root = g.loss(logits, T::of_f64(out.report.value), out.grad)?;
    Ok((root, out.report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: usize, v: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![rows, v], data).unwrap()
    }

    fn bag(rows: usize, s: usize, data: &[i64]) -> TokenTensor {
        TokenTensor::new(vec![rows, s], data.to_vec()).unwrap()
    }

    #[test]
    fn ce_uniform_logits_is_ln2() {
        let out = ce_loss(&logits(1, 2, &[0.0, 0.0]), &[0]).unwrap();
        assert!((out.value() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_saturates() {
        let out = ce_loss(&logits(1, 3, &[30.0, 0.0, 0.0]), &[0]).unwrap();
        assert!(out.value() < 1e-9);
    }

    #[test]
    fn ce_ignores_masked_rows() {
        let z = logits(2, 2, &[0.0, 0.0, 5.0, -5.0]);
        let out = ce_loss(&z, &[0, IGNORE_INDEX]).unwrap();
        assert!((out.value() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(out.report.valid_target_count, 1);
        assert!(out.grad[2..].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ce_all_ignored_is_zero_with_warning() {
        let out = ce_loss(&logits(1, 2, &[1.0, 2.0]), &[IGNORE_INDEX]).unwrap();
        assert_eq!(out.value(), 0.0);
        assert!(out.report.warning.is_some());
    }

    #[test]
    fn target_out_of_range() {
        assert!(matches!(
            ce_loss(&logits(1, 2, &[1.0, 2.0]), &[2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn uniform_bag_optimum() {
        let z = logits(1, 2, &[0.0, 0.0]);
        let b = bag(1, 2, &[0, 1]);
        let plain = mce_uniform(&z, &b, false).unwrap();
        let corr = mce_uniform(&z, &b, true).unwrap();
        assert!((plain.value() - 2f64.ln()).abs() < 1e-15);
        assert!(corr.value().abs() < 1e-15);
    }

    #[test]
    fn alt_full_vocab_bag_is_zero() {
        let z = logits(1, 3, &[0.3, -1.0, 2.0]);
        let out = mce_alt(&z, &bag(1, 3, &[2, 0, 1])).unwrap();
        assert!(out.value().abs() < 1e-15);
    }

    #[test]
    fn alt_dedups_bag_members() {
        let z = logits(1, 3, &[0.3, -1.0, 2.0]);
        let a = mce_alt(&z, &bag(1, 2, &[2, 2])).unwrap();
        let b = ce_loss(&z, &[2]).unwrap();
        assert!((a.value() - b.value()).abs() < 1e-15);
    }

    #[test]
    fn power_law_weights() {
        assert_eq!(BagWeighting::PowerLaw.weights(3), vec![1.0, 0.5, 1.0 / 3.0]);
        assert_eq!(BagWeighting::FirstToken.weights(3), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn fitted_weights_are_floored_and_checked() {
        let w = BagWeighting::FittedPowerLaw {
            c0: -5.0,
            a: 1.0,
            k: -1.0,
        };
        assert!(w.weights(4).iter().all(|&x| x >= 1e-6));
        let rising = BagWeighting::FittedPowerLaw {
            c0: 1.0,
            a: -1.0,
            k: -1.0,
        };
        assert!(rising.validate(3).is_err());
    }

    #[test]
    fn first_token_with_ignored_head_is_zero() {
        let z = logits(1, 3, &[0.3, -1.0, 2.0]);
        let out = mce_weighted(&z, &bag(1, 2, &[IGNORE_INDEX, 1]), BagWeighting::FirstToken).unwrap();
        assert_eq!(out.value(), 0.0);
        assert!(out.report.warning.is_some());
    }

    #[test]
    fn recovery_rejects_bagged_labels() {
        let z = logits(1, 3, &[0.3, -1.0, 2.0]);
        let r = loss_for_phase(
            Phase::Recovery,
            &z,
            &TokenTensor::new(vec![1, 1, 2], vec![0, 1]).unwrap(),
            MceVariant::Alt,
            BagWeighting::Uniform,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
