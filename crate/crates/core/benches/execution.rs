use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mcse_core::model::ModelParams;
use mcse_core::suite::{self, DataSource};
use mcse_core::synth::{self, SynthConfig};
use mcse_core::train::TrainConfig;
use mcse_core::{eval, Execution};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn small_corpus() -> synth::GroundedCorpus {
    synth::generate_grounded_corpus(&SynthConfig {
        words_per_topic: 60,
        num_images: 200,
        num_text_only_sentences: 600,
        sts_test_pairs: 200,
        sts_dev_pairs: 100,
        ..SynthConfig::default()
    })
    .expect("corpus")
}

fn bench_evaluation(c: &mut Criterion) {
    let corpus = small_corpus();
    let tasks = corpus.test_tasks();
    let params = ModelParams::init(TrainConfig::default().dims(), 0).expect("params");
    let mut group = c.benchmark_group("sts_evaluation");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| eval::evaluate_params(&params, &tasks, exec).expect("eval"))
        });
    }
    group.finish();
}

fn bench_suite(c: &mut Criterion) {
    let corpus = small_corpus();
    let tasks = corpus.test_tasks();
    let base = TrainConfig {
        steps: Some(20),
        eval_every_steps: 10,
        ..TrainConfig::default()
    };
    let variants = suite::standard_variants(&base);
    let mut group = c.benchmark_group("experiment_suite");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                suite::run_experiment_suite(
                    &variants,
                    &[0, 1],
                    suite::SIMCSE,
                    DataSource::Corpus(&corpus),
                    &tasks,
                    exec,
                )
                .expect("suite")
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluation, bench_suite);
criterion_main!(benches);
