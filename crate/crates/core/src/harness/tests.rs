use super::*;
use crate::diffcore::Array2;
use crate::evaluator::{aggregate, label_vocabulary, EvaluatorConfig, LabelSet, Metric, MetricVersion, SubscoreVector};
use crate::planner::{train, Planner, PlannerConfig, Selector, TrainOptions};
use crate::scenario::{generate_scenario, mirror_scenario, observe_with, GenConfig, Scenario, SplitTag, TokenCaps};
use crate::vocab::{GridSpec, TrajectoryVocabulary};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_grid() -> GridSpec {
    GridSpec { curvature_levels: 16, speed_levels: 8, profile_levels: 2, size: 256, ..GridSpec::compact() }
}

fn dataset(grid: &GridSpec, seeds: std::ops::Range<u64>) -> (TrajectoryVocabulary, Vec<Scenario>, Vec<LabelSet>) {
    let vocab = TrajectoryVocabulary::build(grid).unwrap();
    let eval = EvaluatorConfig::default();
    let records = generate_dataset(seeds, SplitTag::Test, &GenConfig::default(), &vocab, &eval).unwrap();
    let scenes: Vec<Scenario> = records.into_iter().map(|r| r.scenario).collect();
    let labels = label_dataset(&scenes, &vocab, &eval);
    (vocab, scenes, labels)
}

fn oracle_selection(labels: &[LabelSet], version: MetricVersion) -> Vec<usize> {
    labels.iter().map(|l| crate::evaluator::rank_descending(l.aggregates(version))[0]).collect()
}

fn tiny_planner() -> PlannerConfig {
    PlannerConfig {
        hidden_dim: 8,
        attention_heads: 2,
        trans_dec_layers: 1,
        refine_dec_layers: 1,
        top_k: 32,
        lr: 3e-3,
        token_caps: TokenCaps { agents: 2, lane_points: 4, lights: 1, boundary_points: 4, range: 60.0 },
        vocab: small_grid(),
        ..PlannerConfig::desk()
    }
}

fn row(imi: f64, rest: f64) -> Vec<f64> {
    let mut r = vec![rest; SCORE_COLUMNS];
    r[0] = imi;
    r
}

#[test]
fn combine_all_ones_v1() {
    let s = combine_score(&row(1.0, 1.0), &InferenceCoefficients::v1()).unwrap();
    assert!((s - 8.0 * 12f64.ln()).abs() < 1e-12);
    assert!((s - 19.8793).abs() < 1e-4);
}

#[test]
fn combine_v2_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    use rand::Rng;
    for _ in 0..50 {
        let r: Vec<f64> = (0..SCORE_COLUMNS).map(|_| rng.random_range(0.01..1.0)).collect();
        // columns: imi, nc, dac, ddc, tlc, ep, ttc, lk, hc, c
        let expected = 0.02 * r[0].ln()
            + 0.5 * r[1].ln()
            + 0.5 * r[2].ln()
            + 0.3 * r[3].ln()
            + 0.1 * r[4].ln()
            + 6.0 * (5.0 * r[5] + 5.0 * r[6] + 2.0 * r[7] + 1.0 * r[8]).ln();
        let got = combine_score(&r, &InferenceCoefficients::v2()).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }
}

#[test]
fn combine_rejects_bad_rows() {
    let c = InferenceCoefficients::v2();
    assert!(matches!(combine_score(&[0.5; 3], &c), Err(HarnessError::Domain(_))));
    let mut r = row(0.5, 0.5);
    r[4] = f64::NAN;
    assert!(matches!(combine_score(&r, &c), Err(HarnessError::Domain(_))));
    // zero scores are clamped, so the result stays finite
    assert!(combine_score(&row(0.0, 0.0), &c).unwrap().is_finite());
    let bad = InferenceCoefficients { imi: -1.0, ..InferenceCoefficients::v1() };
    assert!(bad.validate().is_err());
    assert!(InferenceCoefficients::v1().validate().is_ok() && InferenceCoefficients::v2().validate().is_ok());
}

#[test]
fn combine_rows_matches_rowwise() {
    let t = Array2::from_rows(&[row(0.3, 0.9), row(0.9, 0.2)]).unwrap();
    let c = InferenceCoefficients::v1();
    let v = combine_rows(&t, &c).unwrap();
    assert_eq!(v, vec![combine_score(t.row(0), &c).unwrap(), combine_score(t.row(1), &c).unwrap()]);
}

proptest! {
    #[test]
    fn combine_monotone_in_each_score(
        base in prop::collection::vec(0.01f64..0.9, SCORE_COLUMNS),
        col in 0usize..SCORE_COLUMNS,
        bump in 0.01f64..0.09,
        v2 in prop::bool::ANY,
    ) {
        let c = if v2 { InferenceCoefficients::v2() } else { InferenceCoefficients::v1() };
        let used = col == 0
            || c.penalties.iter().chain(&c.averages).any(|&(m, _)| score_column(m) == Some(col));
        let mut up = base.clone();
        up[col] += bump;
        let (a, b) = (combine_score(&base, &c).unwrap(), combine_score(&up, &c).unwrap());
        if used {
            prop_assert!(b > a);
        } else {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn argmax_ignores_constant_shift(scores in prop::collection::vec(-50.0f64..50.0, 1..30), shift in -100.0f64..100.0) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let a = crate::planner::topk_filter(&scores, 1).unwrap();
        let b = crate::planner::topk_filter(&shifted, 1).unwrap();
        // a shift can only collapse near-ties through rounding
        prop_assert!(a == b || (scores[a[0]] - scores[b[0]]).abs() < 1e-9);
    }
}

#[test]
fn config_round_trips_and_layers_over_defaults() {
    let cfg = SuprimConfig::default();
    let text = cfg.to_toml_string().unwrap();
    assert_eq!(SuprimConfig::from_toml_str(&text).unwrap(), cfg);
    assert_eq!(SuprimConfig::from_toml_str("").unwrap(), cfg);

    let custom = SuprimConfig::from_toml_str("[planner]\nepochs = 3\n\n[planner.vocab]\nsize = 1024\n").unwrap();
    assert_eq!(custom.planner.epochs, 3);
    assert_eq!(custom.planner.hidden_dim, PlannerConfig::desk().hidden_dim);
    assert_ne!(custom.hash(), cfg.hash());
    assert_eq!(cfg.hash(), SuprimConfig::default().hash());
    assert_eq!(cfg.hash().len(), 64);

    assert!(SuprimConfig::from_toml_str("[planner]\nbogus = 1\n").is_err());
    assert!(SuprimConfig::from_toml_str("[nonsense]\n").is_err());
    assert!(SuprimConfig::from_toml_str("[planner]\ntop_k = 0\n").is_err());
    assert!(SuprimConfig::from_toml_str("[inference]\noracle_ks = []\n").is_err());
    assert!(SuprimConfig::from_toml_str("not toml [").is_err());
}

#[test]
fn perfect_selection_reaches_the_ceiling() {
    let (_, scenes, labels) = dataset(&small_grid(), 0..12);
    let v = MetricVersion::V2;
    let report = evaluate_selections(&scenes, &labels, &oracle_selection(&labels, v), v, "cfg", "ck").unwrap();
    let ceiling = 100.0 * labels.iter().map(|l| l.best(v)).sum::<f64>() / labels.len() as f64;
    assert!((report.aggregate - ceiling).abs() < 1e-9);
    let weights = EvaluatorConfig::default();
    for r in &report.rows {
        assert!((r.aggregate - aggregate(&r.subscores, weights.weights(v))).abs() < 1e-12);
    }
    let mean_nc = 100.0 * report.rows.iter().map(|r| r.subscores.nc).sum::<f64>() / report.rows.len() as f64;
    assert_eq!(report.subscore_mean(Metric::Nc), mean_nc);

    assert!(matches!(evaluate_selections(&[], &[], &[], v, "", ""), Err(HarnessError::EmptyDataset)));
    assert!(evaluate_selections(&scenes, &labels, &[0], v, "", "").is_err());
    assert!(evaluate_selections(&scenes[..1], &labels[..1], &[100_000], v, "", "").is_err());
}

#[test]
fn random_selection_is_far_below_the_ceiling() {
    let (_, _, labels) = dataset(&small_grid(), 0..1000);
    let v = MetricVersion::V2;
    let random = random_baseline(&labels, 16, 0, v).unwrap();
    let ceiling = 100.0 * labels.iter().map(|l| l.best(v)).sum::<f64>() / labels.len() as f64;
    assert!(ceiling - random > 20.0, "random {random:.2} vs ceiling {ceiling:.2}");
    // the Monte-Carlo estimate converges to the exact mean over entries
    let exact = 100.0 * labels.iter().map(|l| l.epdms.iter().sum::<f64>() / l.len() as f64).sum::<f64>() / labels.len() as f64;
    assert!((random - exact).abs() < 1.0, "{random} vs {exact}");
    assert_eq!(random, random_baseline(&labels, 16, 0, v).unwrap());
}

#[test]
fn oracle_study_identities_and_repeatable_evaluation() {
    let (vocab, scenes, labels) = dataset(&small_grid(), 0..10);
    let cfg = tiny_planner();
    let (planner, params) = Planner::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let selector = Selector::new(planner, params).unwrap();
    let v = MetricVersion::V2;
    let (report, inferences) = evaluate(&selector, &scenes, &labels, v, "cfg", "ck").unwrap();
    let (again, _) = evaluate(&selector, &scenes, &labels, v, "cfg", "ck").unwrap();
    assert_eq!(report, again);

    let table = oracle_study(&inferences, &labels, &[1, 4, 16, 64, vocab.len()], v).unwrap();
    assert!((table.values[0] - report.aggregate).abs() < 1e-9);
    assert!(table.values.windows(2).all(|w| w[1] >= w[0]));
    assert!((table.values[4] - table.ceiling).abs() < 1e-9);
    assert!(oracle_study(&inferences, &labels, &[vocab.len() + 1], v).is_err());
    assert!(oracle_study(&inferences, &labels[..2], &[1], v).is_err());
}

#[test]
fn splits_partition_and_mirror() {
    let grid = small_grid();
    let (vocab, scenes, labels) = dataset(&grid, 0..150);
    let v = MetricVersion::V2;
    let report = evaluate_selections(&scenes, &labels, &oracle_selection(&labels, v), v, "", "").unwrap();
    let splits = split_eval(&report);
    let count = |s: Option<&EvalReport>| s.map_or(0, EvalReport::scenarios);
    let total: usize = TurnSplit::ALL.iter().map(|&s| count(splits.get(s))).sum();
    assert_eq!(total, scenes.len());
    assert!(count(splits.get(TurnSplit::Left)) > 0 && count(splits.get(TurnSplit::Right)) > 0);

    let eval = EvaluatorConfig::default();
    let mirrored: Vec<Scenario> = scenes.iter().map(mirror_scenario).collect();
    let mirrored_labels: Vec<LabelSet> = mirrored.iter().map(|s| label_vocabulary(s, &vocab, &eval)).collect();
    let m_report =
        evaluate_selections(&mirrored, &mirrored_labels, &oracle_selection(&mirrored_labels, v), v, "", "").unwrap();
    let m_splits = split_eval(&m_report);
    for (a, b) in [(TurnSplit::Left, TurnSplit::Right), (TurnSplit::Forward, TurnSplit::Forward), (TurnSplit::Right, TurnSplit::Left)] {
        let (x, y) = (splits.get(a).unwrap(), m_splits.get(b).unwrap());
        assert_eq!(x.scenarios(), y.scenarios());
        assert!((x.aggregate - y.aggregate).abs() < 1e-9);
    }
}

fn synthetic_labels(vocab: &TrajectoryVocabulary, good: impl Fn(usize) -> bool) -> LabelSet {
    let eval = EvaluatorConfig::default();
    let subs = (0..vocab.len())
        .map(|i| {
            let mut s = SubscoreVector { nc: 1.0, dac: 1.0, ddc: 1.0, tlc: 1.0, ep: 1.0, ttc: 1.0, lk: 1.0, hc: 1.0, ec: 1.0, c: 1.0 };
            if !good(i) {
                s.nc = 0.0;
            }
            s
        })
        .collect();
    LabelSet::from_parts(subs, vec![1.0; vocab.len()], &eval)
}

#[test]
fn heading_histogram_examples() {
    let vocab = TrajectoryVocabulary::build(&small_grid()).unwrap();
    let straight = |i: usize| vocab.params(i).curvature == 0.0 || vocab.entry(i).last().heading.abs() < 1e-12;
    let labels = vec![synthetic_labels(&vocab, straight)];
    let h = heading_histogram(&labels, &vocab, 36, MetricVersion::V2).unwrap();
    let nonzero: Vec<usize> = (0..36).filter(|&b| h.counts[b] > 0).collect();
    assert_eq!(nonzero.len(), 1);
    assert_eq!(h.normalized[nonzero[0]], 1.0);
    assert!((h.bin_centers()[nonzero[0]]).abs() < std::f64::consts::PI / 36.0 + 1e-12);
    assert!(h.kl_to_uniform() > 3.5);

    let (_, _, real) = dataset(&small_grid(), 0..20);
    let h = heading_histogram(&real, &vocab, 24, MetricVersion::V2).unwrap();
    assert_eq!(h.normalized.iter().cloned().fold(0.0, f64::max), 1.0);
    assert_eq!(h.edges.len(), 25);
    assert!(h.counts.iter().sum::<usize>() >= 3 * real.len());
    assert!(heading_histogram(&[], &vocab, 24, MetricVersion::V2).is_err());
    assert!(heading_histogram(&real, &vocab, 0, MetricVersion::V2).is_err());
}

#[test]
fn fov_sweep_emits_three_reproducible_rows() {
    let (vocab, scenes, labels) = dataset(&small_grid(), 0..8);
    let cfg = SuprimConfig { planner: PlannerConfig { max_steps: Some(2), ..tiny_planner() }, ..SuprimConfig::default() };
    let rows = fov_sweep(&scenes[..4], &labels[..4], &scenes[4..], &labels[4..], &vocab, &cfg, 1).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[1].fov_halfangle > w[0].fov_halfangle));
    assert!(rows.windows(2).all(|w| w[1].mean_tokens >= w[0].mean_tokens));
    for s in &scenes {
        let narrow = observe_with(s, FOV_PRESETS[0].1, &cfg.planner.token_caps).tokens.len();
        let wide = observe_with(s, FOV_PRESETS[2].1, &cfg.planner.token_caps).tokens.len();
        assert!(wide >= narrow);
    }
    let again = fov_sweep(&scenes[..4], &labels[..4], &scenes[4..], &labels[4..], &vocab, &cfg, 1).unwrap();
    assert_eq!(rows, again);
}

#[test]
fn reports_render() {
    let (_, scenes, labels) = dataset(&small_grid(), 0..30);
    let v = MetricVersion::V2;
    let report = evaluate_selections(&scenes, &labels, &oracle_selection(&labels, v), v, "abcdef0123456789", "ck").unwrap();
    let text = report.to_text();
    assert!(text.contains("EPDMS") && text.contains("abcdef012345") && !text.contains("abcdef0123456"));
    let csv = report.to_csv().unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 12);
    assert_eq!(lines.count(), 1);

    let per_scene = ScenarioRows(&report).to_csv().unwrap();
    assert_eq!(per_scene.lines().count(), scenes.len() + 1);

    let splits = split_eval(&report);
    assert_eq!(splits.to_csv().unwrap().lines().count(), 4);
    assert!(splits.to_svg().starts_with("<svg"));

    let table = OracleTable { version: v, ks: vec![1, 4], values: vec![80.0, 90.0], ceiling: 95.0 };
    assert!(table.to_text().contains("all"));
    let svg = table.to_svg();
    assert_eq!(svg.matches("<rect").count(), 3);
    assert!(svg.trim_end().ends_with("</svg>"));

    let rows = vec![FovRow { name: "a<b".into(), fov_halfangle: 1.0, mean_tokens: 3.0, aggregate: 50.0 }];
    assert!(FovTable(&rows).to_svg().contains("a&lt;b"));
    assert_eq!(FovTable(&rows).to_csv().unwrap().lines().count(), 2);
}

#[test]
fn dataset_generation_is_ordered_and_deterministic() {
    let vocab = TrajectoryVocabulary::build(&small_grid()).unwrap();
    let eval = EvaluatorConfig::default();
    let a = generate_dataset(5..11, SplitTag::Train, &GenConfig::default(), &vocab, &eval).unwrap();
    let b = generate_dataset(5..11, SplitTag::Train, &GenConfig::default(), &vocab, &eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|r| r.scenario.seed).collect::<Vec<_>>(), (5..11).collect::<Vec<_>>());
    let scenes: Vec<Scenario> = a.into_iter().map(|r| r.scenario).collect();
    let direct = generate_scenario(7, &GenConfig::default(), &vocab, &eval).unwrap();
    assert_eq!(scenes[2], direct);

    let rot_a = rotated_labels(&scenes, std::f64::consts::FRAC_PI_6, 3, &vocab, &eval);
    let rot_b = rotated_labels(&scenes, std::f64::consts::FRAC_PI_6, 3, &vocab, &eval);
    assert_eq!(rot_a, rot_b);
    assert_ne!(rot_a, label_dataset(&scenes, &vocab, &eval));

    let k1 = label_cache_key(b"data", &eval, &small_grid());
    assert_eq!(k1, label_cache_key(b"data", &eval, &small_grid()));
    assert_ne!(k1, label_cache_key(b"data", &eval, &GridSpec::compact()));
    assert_ne!(k1, label_cache_key(b"other", &eval, &small_grid()));
}

#[test]
fn trained_selector_beats_untrained_on_its_training_scenes() {
    let (vocab, scenes, labels) = dataset(&small_grid(), 0..8);
    let cfg = PlannerConfig { epochs: 30, augmentation: false, ..tiny_planner() };
    let ck = train(&scenes, Some(&labels), &vocab, &cfg, &TrainOptions::new(0)).unwrap().checkpoint;
    let v = MetricVersion::V2;
    let trained = Selector::from_checkpoint(&ck, false).unwrap();
    let (report, _) = evaluate(&trained, &scenes, &labels, v, "", &ck.id().unwrap()).unwrap();
    let random = random_baseline(&labels, 64, 0, v).unwrap();
    assert!(report.aggregate > random, "{} vs {random}", report.aggregate);
    assert_eq!(report.checkpoint_id.len(), 16);
}
