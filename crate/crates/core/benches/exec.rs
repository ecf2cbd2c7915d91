use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fairser_core::corpus::{
    build_all_enrolment_sets, generate_synthetic, Split, SynthConfig, Variant,
};
use fairser_core::fairness::{bootstrap_ci, BootstrapConfig, PredictionRecord};
use fairser_core::model::{predict, ModelConfig, ModelState, PredictOptions};
use fairser_core::Exec;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn records(n: usize, classes: usize) -> Vec<PredictionRecord> {
    (0..n)
        .map(|i| PredictionRecord {
            id: format!("u{i:05}"),
            speaker: format!("s{:02}", i % 20),
            true_label: i % classes,
            pred_label: if i % 3 == 0 {
                (i + 1) % classes
            } else {
                i % classes
            },
        })
        .collect()
}

fn bench_bootstrap(c: &mut Criterion) {
    let recs = records(2000, 4);
    let cfg = BootstrapConfig::default();
    let mut g = c.benchmark_group("bootstrap_b1000");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| bootstrap_ci(&recs, 4, &cfg, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_predict(c: &mut Criterion) {
    let corpus = generate_synthetic(&SynthConfig {
        speakers: [2, 2, 32],
        per_speaker: 60,
        ..SynthConfig::default()
    })
    .unwrap();
    let enrolment = build_all_enrolment_sets(&corpus);
    let mut cfg = ModelConfig::new(Variant::PersA, corpus.dim, corpus.classes);
    cfg.use_projections = true;
    let state = ModelState::new(cfg).unwrap();
    let mut g = c.benchmark_group("predict_persa");
    for (name, exec) in MODES {
        let opts = PredictOptions {
            exec,
            include_enrolled: false,
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict(&state, &corpus, Split::Test, &enrolment, opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_bootstrap, bench_predict);
criterion_main!(benches);
