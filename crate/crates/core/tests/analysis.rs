use proptest::prelude::*;
use tstlab::analysis::{estimate_mi, eval_ce, fit_power_law, fit_power_law_points, flops_per_step, MiConfig};
use tstlab::data::{synth_markov_corpus, Corpus, TokenTensor};
use tstlab::losses::Phase;
use tstlab::model::{Ablation, ModelConfig, ModelState};

fn model_cfg(d: usize) -> ModelConfig {
    ModelConfig {
        d_model: d,
        n_layers: 3,
        n_heads: 4,
        d_ff: 4 * d,
        vocab: 512,
        max_len: 256,
        ..ModelConfig::default()
    }
}

#[test]
fn flops_follow_parameter_count() {
    // Every non-embedding weight matrix costs 2 FLOPs per token forward; the
    // attention products add 2 * 2 * l^2 * d per layer. Training triples it.
    let c = model_cfg(64);
    let l = 128.0;
    let (d, v, layers) = (64.0, 512.0, 3.0);
    let norms = (2.0 * layers + 1.0) * d;
    let matmul_params = c.param_count() as f64 - v * d - norms;
    let want = 3.0 * (2.0 * l * matmul_params + layers * 4.0 * l * l * d + l * d);
    let got = flops_per_step(&c, 128, 1, Phase::Recovery);
    assert!((got.total - want).abs() / want < 1e-12, "{} vs {want}", got.total);
}

#[test]
fn stretched_superposition_step_costs_the_same_as_baseline() {
    for d in [64, 128] {
        let c = model_cfg(d);
        let base = flops_per_step(&c, 128, 1, Phase::Recovery).total;
        for s in [2, 4, 8, 16] {
            let sup = flops_per_step(&c, 128, s, Phase::Superposition).total;
            let ratio = sup / base;
            assert!((0.99..=1.01).contains(&ratio), "d={d} s={s}: {ratio}");
            assert!(ratio > 1.0, "the bag sum is not free");
        }
    }
}

#[test]
fn eval_ce_matches_direct_window_average() {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        vocab: 8,
        max_len: 8,
        ..ModelConfig::default()
    };
    let m = ModelState::<f64>::init(&cfg).unwrap();
    let corpus = synth_markov_corpus(1, 8, 123, 4).unwrap();
    let l = 8;
    let (mut sum, mut n) = (0.0, 0);
    // windows of l + 1 tokens stepping by l; a trailing partial one is dropped
    let mut start = 0;
    while start + l < corpus.len() {
        let w = &corpus.tokens[start..=start + l];
        let x = TokenTensor::new(vec![1, l], w[..l].iter().map(|&t| t as i64).collect()).unwrap();
        let z = m.logits(&x, Ablation::None).unwrap();
        for t in 0..l {
            let row = &z.data[t * 8..(t + 1) * 8];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            sum += lse - row[w[t + 1] as usize];
            n += 1;
        }
        start += l;
    }
    for rows in [1, 3, 100] {
        let got = eval_ce(&m, &corpus, l, rows).unwrap();
        assert!((got - sum / n as f64).abs() < 1e-12, "rows={rows}");
    }
}

#[test]
fn mi_is_invariant_to_relabelling() {
    let c = synth_markov_corpus(1, 6, 50_000, 2).unwrap();
    let relabel: Vec<u32> = c.tokens.iter().map(|&t| (t * 5 + 3) % 6 + 100).collect();
    let cfg = MiConfig {
        max_distance: 5,
        bootstrap: 0,
        ..MiConfig::default()
    };
    let a = estimate_mi(&c.tokens, &cfg).unwrap();
    let b = estimate_mi(&relabel, &cfg).unwrap();
    for (x, y) in a.mi.iter().zip(&b.mi) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn mi_bootstrap_is_seeded_and_positive() {
    let c = synth_markov_corpus(1, 4, 40_000, 8).unwrap();
    let cfg = MiConfig {
        max_distance: 4,
        bootstrap: 20,
        seed: 3,
        ..MiConfig::default()
    };
    let a = estimate_mi(&c.tokens, &cfg).unwrap();
    let b = estimate_mi(&c.tokens, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.stderr.iter().all(|s| s.is_finite() && *s > 0.0));
    assert!(a.bias.iter().all(|&b| b >= 0.0));
    assert_eq!(a.pairs, vec![39_999, 39_998, 39_997, 39_996]);
}

#[test]
fn capped_vocabulary_never_adds_information() {
    let c = synth_markov_corpus(1, 32, 100_000, 5).unwrap();
    let full = estimate_mi(
        &c.tokens,
        &MiConfig {
            max_distance: 3,
            bootstrap: 0,
            ..MiConfig::default()
        },
    )
    .unwrap();
    let capped = estimate_mi(
        &c.tokens,
        &MiConfig {
            max_distance: 3,
            bootstrap: 0,
            vocab_cap: Some(4),
            ..MiConfig::default()
        },
    )
    .unwrap();
    // merging symbols is a deterministic function of the data
    for (f, k) in full.mi.iter().zip(&capped.mi) {
        assert!(k <= f, "{k} > {f}");
    }
}

#[test]
fn empty_and_tiny_inputs_are_errors() {
    let cfg = MiConfig::default();
    assert!(estimate_mi(&[], &cfg).is_err());
    assert!(estimate_mi(&[1, 2, 3], &cfg).is_err());
    let corpus = Corpus::new(vec![0, 1], 2, "two").unwrap();
    let m = ModelState::<f64>::init(&ModelConfig {
        vocab: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    assert!(eval_ce(&m, &corpus, 4, 1).is_err());
}

#[test]
fn fit_on_curve_with_insufficient_points_is_an_error() {
    let x: Vec<u32> = (0..40).map(|i| (i * 7 % 13) as u32).collect();
    let curve = estimate_mi(
        &x,
        &MiConfig {
            max_distance: 6,
            bootstrap: 0,
            ..MiConfig::default()
        },
    )
    .unwrap();
    assert!(fit_power_law(&curve).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn power_law_fit_recovers_exact_curves(
        c0 in 0.0f64..5.0,
        a in 0.1f64..3.0,
        k in -2.8f64..-0.2,
    ) {
        let d: Vec<f64> = (1..=24).map(f64::from).collect();
        let y: Vec<f64> = d.iter().map(|x| c0 + a * x.powf(k)).collect();
        let f = fit_power_law_points(&d, &y).unwrap();
        prop_assert!((f.k - k).abs() < 1e-5 * k.abs().max(1.0), "{:?}", f);
        prop_assert!((f.a - a).abs() < 1e-4 * a, "{:?}", f);
        prop_assert!((f.c0 - c0).abs() < 1e-4 * (1.0 + c0), "{:?}", f);
        prop_assert!(f.rss < 1e-12);
        prop_assert!(f.decaying);
    }
}
