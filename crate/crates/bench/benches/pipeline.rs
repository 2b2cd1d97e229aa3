use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use suprim_core::evaluator::{label_vocabulary, score_trajectory};
use suprim_core::harness::{combine_rows, InferenceCoefficients, SCORE_COLUMNS};
use suprim_core::planner::{train_item, trajectory_inputs, Planner, Selector};
use suprim_core::scenario::{generate_scenario, observe_with, rotate_scenario};
use suprim_core::diffcore::Array2;
use suprim_core::{EvaluatorConfig, GenConfig, GridSpec, PlannerConfig, TrajectoryVocabulary};

fn benches(c: &mut Criterion) {
    let cfg = PlannerConfig::desk();
    let eval = EvaluatorConfig::default();
    let vocab = TrajectoryVocabulary::build(&cfg.vocab).unwrap();
    let scene = generate_scenario(3, &GenConfig::default(), &vocab, &eval).unwrap();
    let labels = label_vocabulary(&scene, &vocab, &eval);

    c.bench_function("vocab_build_default", |b| b.iter(|| TrajectoryVocabulary::build(black_box(&GridSpec::default()))));
    c.bench_function("generate_scenario", |b| b.iter(|| generate_scenario(black_box(7), &GenConfig::default(), &vocab, &eval)));
    c.bench_function("score_trajectory", |b| b.iter(|| score_trajectory(&scene, black_box(vocab.entry(100)), &eval)));
    c.bench_function("label_vocabulary_compact", |b| b.iter(|| label_vocabulary(black_box(&scene), &vocab, &eval)));
    c.bench_function("observe", |b| b.iter(|| observe_with(black_box(&scene), cfg.fov_halfangle, &cfg.token_caps)));
    c.bench_function("rotate_scenario", |b| b.iter(|| rotate_scenario(black_box(&scene), 0.3)));

    let rows: Vec<Vec<f64>> = (0..vocab.len()).map(|i| vec![0.5 + 0.4 * (i as f64 / vocab.len() as f64); SCORE_COLUMNS]).collect();
    let table = Array2::from_rows(&rows).unwrap();
    c.bench_function("combine_rows_compact", |b| b.iter(|| combine_rows(black_box(&table), &InferenceCoefficients::v2())));

    let (planner, params) = Planner::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let inputs = trajectory_inputs(&vocab);
    let mut group = c.benchmark_group("planner");
    group.sample_size(20);
    group.bench_function("train_item_full", |b| {
        b.iter(|| train_item(&planner, &params, Some(&params), &inputs, &scene, &labels, Some(0.2), &vocab, &eval).unwrap())
    });
    let selector = Selector::new(planner, params).unwrap();
    group.bench_function("select", |b| b.iter(|| selector.select(black_box(&scene)).unwrap()));
    group.finish();
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
