use proptest::prelude::*;
use tstlab::data::{TokenTensor, IGNORE_INDEX};
use tstlab::losses::{ce_loss, loss_for_phase, mce_alt, mce_uniform, mce_weighted, BagWeighting, MceVariant, Phase};
use tstlab::tensor::Tensor;

/// Softmax of one row, computed in the textbook way with a max shift.
fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn instance(rows: usize, v: usize, s: usize, seed: u64, distinct: bool) -> (Tensor<f64>, TokenTensor) {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 33) as f64 / (1u64 << 31) as f64
    };
    let z: Vec<f64> = (0..rows * v).map(|_| 8.0 * next() - 4.0).collect();
    let mut bag = Vec::with_capacity(rows * s);
    for _ in 0..rows {
        let mut row: Vec<i64> = Vec::new();
        while row.len() < s {
            let y = (next() * v as f64) as i64 % v as i64;
            if !distinct || !row.contains(&y) {
                row.push(y);
            }
        }
        bag.extend(row);
    }
    (Tensor::new(vec![rows, v], z).unwrap(), TokenTensor::new(vec![rows, s], bag).unwrap())
}

/// KL(uniform over the bag || softmax(z)), averaged over rows.
fn kl_oracle(z: &Tensor<f64>, bag: &TokenTensor) -> f64 {
    let (rows, v, s) = (bag.shape[0], z.shape[1], bag.shape[1]);
    let mut total = 0.0;
    for r in 0..rows {
        let p = softmax(&z.data[r * v..(r + 1) * v]);
        let q = 1.0 / s as f64;
        total += bag.data[r * s..(r + 1) * s]
            .iter()
            .map(|&y| q * (q / p[y as usize]).ln())
            .sum::<f64>();
    }
    total / rows as f64
}

fn alt_oracle(z: &Tensor<f64>, bag: &TokenTensor) -> f64 {
    let (rows, v, s) = (bag.shape[0], z.shape[1], bag.shape[1]);
    let mut total = 0.0;
    for r in 0..rows {
        let p = softmax(&z.data[r * v..(r + 1) * v]);
        let mut seen = vec![false; v];
        let mut mass = 0.0;
        for &y in &bag.data[r * s..(r + 1) * s] {
            if !std::mem::replace(&mut seen[y as usize], true) {
                mass += p[y as usize];
            }
        }
        total -= mass.ln();
    }
    total / rows as f64
}

/// Slot-major weighted CE: mean CE per slot over its valid rows, combined
/// with weights normalised over the slots that have any valid row.
fn weighted_oracle(z: &Tensor<f64>, bag: &TokenTensor, w: &[f64]) -> f64 {
    let (rows, v, s) = (bag.shape[0], z.shape[1], bag.shape[1]);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s {
        let (mut ce, mut n) = (0.0, 0);
        for r in 0..rows {
            let y = bag.data[r * s + i];
            if y != IGNORE_INDEX {
                ce -= softmax(&z.data[r * v..(r + 1) * v])[y as usize].ln();
                n += 1;
            }
        }
        if n > 0 {
            num += w[i] * ce / n as f64;
            den += w[i];
        }
    }
    num / den
}

#[test]
fn corrected_form_is_kl_for_distinct_bags() {
    for seed in 0..300 {
        let v = 2 + (seed as usize % 31);
        let s = 1 + (seed as usize % 8).min(v - 1);
        let (z, bag) = instance(3, v, s, seed, true);
        let got = mce_uniform(&z, &bag, true).unwrap().value();
        let want = kl_oracle(&z, &bag);
        assert!(got >= -1e-12);
        assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn corrected_form_vanishes_at_the_bag_optimum() {
    // logits equal on the bag and far below elsewhere put mass 1/s on each
    // bag token, which is exactly the uniform target
    let (v, s) = (12, 4);
    let bag = TokenTensor::new(vec![1, s], vec![1, 5, 7, 10]).unwrap();
    let mut z = vec![-200.0f64; v];
    for &y in &bag.data {
        z[y as usize] = 3.0;
    }
    let z = Tensor::new(vec![1, v], z).unwrap();
    let out = mce_uniform(&z, &bag, true).unwrap();
    assert!(out.value().abs() < 1e-12, "{}", out.value());
    assert!(out.grad.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn duplicates_count_as_separate_terms() {
    let z = Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap();
    let bag = TokenTensor::new(vec![1, 2], vec![2, 2]).unwrap();
    let p = softmax(&z.data);
    let simple = mce_uniform(&z, &bag, false).unwrap().value();
    assert!((simple + p[2].ln()).abs() < 1e-12);
    // the composite mass counts the token once
    let alt = mce_alt(&z, &bag).unwrap().value();
    assert!((alt + p[2].ln()).abs() < 1e-12);
}

#[test]
fn alt_is_zero_when_the_bag_covers_the_vocabulary() {
    let (z, _) = instance(2, 5, 1, 3, false);
    let bag = TokenTensor::new(vec![2, 5], vec![0, 1, 2, 3, 4, 4, 3, 2, 1, 0]).unwrap();
    let out = mce_alt(&z, &bag).unwrap();
    assert!(out.value().abs() < 1e-12);
    assert!(out.grad.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn ignored_entries_leave_numerator_and_denominator() {
    let z = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 1.0, -1.0, 0.0]).unwrap();
    let full = TokenTensor::new(vec![2, 2], vec![0, 1, 2, IGNORE_INDEX]).unwrap();
    let got = mce_uniform(&z, &full, false).unwrap().value();
    let want = weighted_oracle(&z, &full, &[1.0, 1.0]);
    assert!((got - want).abs() < 1e-12);
    let none = TokenTensor::new(vec![1, 2], vec![IGNORE_INDEX; 2]).unwrap();
    let z1 = Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap();
    let out = mce_uniform(&z1, &none, false).unwrap();
    assert_eq!(out.value(), 0.0);
    assert!(out.report.warning.is_some());
}

#[test]
fn recovery_rejects_bagged_labels() {
    let (z, bag) = instance(2, 4, 2, 1, false);
    let bag = TokenTensor::new(vec![1, 2, 2], bag.data).unwrap();
    let e = loss_for_phase(Phase::Recovery, &z, &bag, MceVariant::UniformSimplified, BagWeighting::Uniform);
    assert!(matches!(e, Err(tstlab::Error::Contract(_))));
}

#[test]
fn fitted_weighting_floors_and_validates() {
    let w = BagWeighting::FittedPowerLaw { c0: -1.0, a: 1.0, k: -1.0 }.weights(4);
    assert_eq!(w[0], 1e-6);
    assert!(w.iter().all(|&x| x >= 1e-6));
    let rising = BagWeighting::FittedPowerLaw { c0: 1.0, a: -1.0, k: -1.0 };
    assert!(rising.validate(4).is_err());
    assert!(BagWeighting::Exponential.validate(8).is_ok());
}

fn arb_case() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (2usize..=32, 1usize..=8, 1usize..=4, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn weighted_losses_match_slot_major_oracle((v, s, rows, seed) in arb_case()) {
        let (z, bag) = instance(rows, v, s, seed, false);
        for w in [BagWeighting::Uniform, BagWeighting::PowerLaw, BagWeighting::Exponential, BagWeighting::FirstToken] {
            let got = mce_weighted(&z, &bag, w).unwrap().value();
            let want = weighted_oracle(&z, &bag, &w.weights(s));
            prop_assert!((got - want).abs() < 1e-10, "{:?}: {} vs {}", w, got, want);
        }
        let alt = mce_alt(&z, &bag).unwrap().value();
        prop_assert!((alt - alt_oracle(&z, &bag)).abs() < 1e-10);
        prop_assert!(alt >= -1e-12);
    }

    #[test]
    fn logit_gradients_match_finite_differences((v, s, rows, seed) in arb_case()) {
        let (z, bag) = instance(rows, v, s, seed, false);
        let losses: [&dyn Fn(&Tensor<f64>) -> (f64, Vec<f64>); 3] = [
            &|z| { let o = mce_uniform(z, &bag, true).unwrap(); (o.value(), o.grad) },
            &|z| { let o = mce_alt(z, &bag).unwrap(); (o.value(), o.grad) },
            &|z| { let o = mce_weighted(z, &bag, BagWeighting::PowerLaw).unwrap(); (o.value(), o.grad) },
        ];
        for f in losses {
            let (_, g) = f(&z);
            for e in 0..z.numel() {
                let h = 1e-6;
                let mut zp = z.clone();
                zp.data[e] += h;
                let mut zm = z.clone();
                zm.data[e] -= h;
                let num = (f(&zp).0 - f(&zm).0) / (2.0 * h);
                prop_assert!((num - g[e]).abs() < 1e-6 * (1.0 + num.abs()), "{} vs {}", num, g[e]);
            }
            // softmax gradients sum to zero across the vocabulary
            for r in 0..rows {
                let sum: f64 = g[r * v..(r + 1) * v].iter().sum();
                prop_assert!(sum.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_slot_bags_reduce_to_ce((v, _s, rows, seed) in arb_case()) {
        let (z, bag) = instance(rows, v, 1, seed, false);
        let ce = ce_loss(&z, &bag.data).unwrap();
        for out in [
            mce_uniform(&z, &bag, false).unwrap(),
            mce_uniform(&z, &bag, true).unwrap(),
            mce_alt(&z, &bag).unwrap(),
            mce_weighted(&z, &bag, BagWeighting::Exponential).unwrap(),
        ] {
            prop_assert_eq!(out.value().to_bits(), ce.value().to_bits());
            prop_assert_eq!(&out.grad, &ce.grad);
        }
    }
}
