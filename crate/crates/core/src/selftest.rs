//! Quick numerical self-check: loss identities and model gradients, in
//! double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{TokenTensor, IGNORE_INDEX};
use crate::error::Result;
use crate::gradcheck::{self, GradCheckConfig};
use crate::losses::{attach_loss, mce_uniform, BagWeighting, MceVariant, Phase};
use crate::model::{Ablation, ModelConfig, ModelState};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SelfCheck {
    pub name: String,
    /// Worst error observed.
    pub error: f64,
    pub tolerance: f64,
}

impl SelfCheck {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

/// `corrected = simplified - mean ln|valid bag|` with identical gradients,
/// over random logits and bags (some entries ignored).
fn loss_identity(rng: &mut ChaCha8Rng, instances: usize) -> Result<Vec<SelfCheck>> {
    let (mut value_err, mut grad_err) = (0f64, 0f64);
    for _ in 0..instances {
        let v = rng.random_range(2..=32);
        let s = rng.random_range(1..=8);
        let rows = rng.random_range(1..=6);
        let z: Vec<f64> = (0..rows * v).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut bag: Vec<i64> = (0..rows * s).map(|_| rng.random_range(0..v as i64)).collect();
        for y in bag.iter_mut().skip(1) {
            if rng.random_bool(0.1) {
                *y = IGNORE_INDEX;
            }
        }
        let logits = Tensor::new(vec![rows, v], z)?;
        let bag = TokenTensor::new(vec![rows, s], bag)?;
        let simple = mce_uniform(&logits, &bag, false)?;
        let corrected = mce_uniform(&logits, &bag, true)?;
        let (mut ent, mut n) = (0.0, 0);
        for r in 0..rows {
            let k = bag.data[r * s..(r + 1) * s]
                .iter()
                .filter(|&&y| y != IGNORE_INDEX)
                .count();
            if k > 0 {
                ent += (k as f64).ln();
                n += 1;
            }
        }
        let want = simple.value() - ent / n as f64;
        value_err = value_err.max((corrected.value() - want).abs());
        for (a, b) in simple.grad.iter().zip(&corrected.grad) {
            grad_err = grad_err.max((a - b).abs());
        }
    }
    Ok(vec![
        SelfCheck {
            name: format!("corrected = simplified - ln|y| ({instances} instances)"),
            error: value_err,
            tolerance: 1e-9,
        },
        SelfCheck {
            name: "corrected and simplified gradients agree".into(),
            error: grad_err,
            tolerance: 1e-12,
        },
    ])
}

fn model_gradients(rng: &mut ChaCha8Rng) -> Result<Vec<SelfCheck>> {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab: 17,
        max_len: 8,
        init_seed: rng.random(),
        ..ModelConfig::default()
    };
    let model = ModelState::<f64>::init(&cfg)?;
    let (b, l, s) = (2, 8, 2);
    let mut tokens = |shape: Vec<usize>| {
        let n = shape.iter().product();
        TokenTensor::new(shape, (0..n).map(|_| rng.random_range(0..17)).collect())
    };
    let flat_x = tokens(vec![b, l])?;
    let flat_y = tokens(vec![b, l])?;
    let bag_x = tokens(vec![b, l, s])?;
    let bag_y = tokens(vec![b, l, s])?;
    let cases = [
        ("ce", Phase::Recovery, MceVariant::UniformSimplified, BagWeighting::Uniform),
        ("mce", Phase::Superposition, MceVariant::UniformSimplified, BagWeighting::Uniform),
        ("mce_corrected", Phase::Superposition, MceVariant::UniformCorrected, BagWeighting::Uniform),
        ("mce_alt", Phase::Superposition, MceVariant::Alt, BagWeighting::Uniform),
        ("mce_power_law", Phase::Superposition, MceVariant::UniformSimplified, BagWeighting::PowerLaw),
    ];
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|p| p.clone().with_grad()).collect();
    let mut out = Vec::new();
    for (name, phase, variant, weighting) in cases {
        let (x, y, ablation) = match phase {
            Phase::Recovery => (&flat_x, &flat_y, Ablation::None),
            Phase::Superposition => (&bag_x, &bag_y, Ablation::Full),
        };
        let report = gradcheck::check(
            &inputs,
            |g, vars| {
                let z = model.forward_with(g, vars, x, ablation)?;
                Ok(attach_loss(g, z, phase, y, variant, weighting)?.0)
            },
            GradCheckConfig::default(),
        )?;
        out.push(SelfCheck {
            name: format!("{name} gradients vs central differences ({} params)", report.checked),
            error: report.max_rel_err,
            tolerance: 1e-3,
        });
    }
    Ok(out)
}

/// Run all checks. `quick` skips the model gradient checks.
pub fn run(seed: u64, quick: bool) -> Result<Vec<SelfCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = loss_identity(&mut rng, 1000)?;
    if !quick {
        checks.extend(model_gradients(&mut rng)?);
    }
    Ok(checks)
}
