//! Parallel against sequential execution of the hot paths. Build with
//! `--no-default-features` to measure the crate without rayon at all.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tstlab::analysis::{estimate_mi, MiConfig};
use tstlab::data::{make_batches, synth_markov_corpus, BatchLayout};
use tstlab::model::{ModelConfig, ModelState};
use tstlab::par;
use tstlab::tensor::{Graph, Tensor};
use tstlab::trainer::{Objective, SuperpositionSpec, TrainPlan, Trainer};

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("parallel", true)]
}

fn bmm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::<f32>::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let (a, b) = (t(vec![32, 64, 24]), t(vec![32, 64, 24]));
    let mut group = c.benchmark_group("bmm_softmax_backward");
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::set_enabled(on);
            bench.iter(|| {
                let mut g = Graph::new();
                let (va, vb) = (g.param(&a), g.param(&b));
                let s = g.bmm(va, vb, true).unwrap();
                let p = g.causal_softmax(s).unwrap();
                let out = g.sum(p);
                g.backward(out).unwrap();
                black_box(g.grad(va).unwrap()[0])
            });
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let corpus = Arc::new(synth_markov_corpus(2, 32, 200_000, 1).unwrap());
    let cfg = ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        vocab: 32,
        max_len: 64,
        ..ModelConfig::default()
    };
    let plan = TrainPlan {
        total_steps: 1_000_000,
        batch_rows: 8,
        l_base: 64,
        ..TrainPlan::default()
    };
    let spec = SuperpositionSpec {
        s: 2,
        r: 0.5,
        ..SuperpositionSpec::default()
    };
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (label, layout, objective) in [
        ("next_token", BatchLayout::Standard, Objective::next_token()),
        ("superposed_s2", spec.layout(), Objective::superposition(&spec)),
    ] {
        for (name, on) in modes() {
            group.bench_function(BenchmarkId::new(label, name), |bench| {
                par::set_enabled(on);
                let model = ModelState::<f32>::init(&cfg).unwrap();
                let stream = make_batches(corpus.clone(), plan.batch_rows, plan.l_base, layout).unwrap();
                let mut trainer = Trainer::new(model, plan.clone(), objective, stream);
                bench.iter(|| black_box(trainer.train_step().unwrap().loss));
            });
        }
    }
    group.finish();
}

fn mutual_information(c: &mut Criterion) {
    let corpus = synth_markov_corpus(1, 16, 200_000, 2).unwrap();
    let cfg = MiConfig {
        max_distance: 16,
        bootstrap: 10,
        ..MiConfig::default()
    };
    let mut group = c.benchmark_group("estimate_mi");
    group.sample_size(10);
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::set_enabled(on);
            bench.iter(|| black_box(estimate_mi(&corpus.tokens, &cfg).unwrap().mi[0]));
        });
    }
    group.finish();
}

criterion_group!(benches, bmm, train_step, mutual_information);
criterion_main!(benches);
