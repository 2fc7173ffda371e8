mod common;

use common::tiny_pretrained;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabimg_core::data::{MissingScenario, ScenarioKind, SplitDataset};
use tabimg_harness::eval::*;
use tabimg_harness::pipeline::{finetune_checkpoint, importance_ranking};
use tabimg_harness::Checkpoint;

/// All-pairs Mann-Whitney count: wins score 2, ties 1, over twice the
/// number of pairs.
fn brute_force_auc(scores: &[f32], labels: &[usize]) -> Option<f64> {
    let (mut doubled, mut pairs) = (0u64, 0u64);
    for (i, &y) in labels.iter().enumerate() {
        if y != 1 {
            continue;
        }
        for (j, &z) in labels.iter().enumerate() {
            if z != 0 {
                continue;
            }
            pairs += 1;
            doubled += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    (pairs > 0).then(|| doubled as f64 / (2 * pairs) as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_equals_all_pairs_comparison(
        // few distinct levels so ties are common
        cells in prop::collection::vec((0u8..12, 0usize..2), 1..80)
    ) {
        let scores: Vec<f32> = cells.iter().map(|&(s, _)| f32::from(s) / 11.0).collect();
        let labels: Vec<usize> = cells.iter().map(|&(_, y)| y).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_force_auc(&scores, &labels));
    }
}

#[test]
fn randomly_permuted_labels_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scores: Vec<f32> = (0..1000).map(|_| rng.random()).collect();
    let mut labels: Vec<usize> = (0..1000).map(|i| usize::from(i % 2 == 0)).collect();
    labels.shuffle(&mut rng);
    let a = auc(&scores, &labels).unwrap().unwrap();
    assert!((a - 0.5).abs() <= 0.05, "{a}");
}

fn finetuned(seed: u64) -> (SplitDataset, Checkpoint) {
    let (cfg, split, pre) = tiny_pretrained(seed);
    let (ft, _) = finetune_checkpoint(&cfg, &pre, &split).unwrap();
    (split, ft)
}

#[test]
fn zero_rate_scenario_equals_plain_evaluation() {
    let (split, ft) = finetuned(0);
    let d = ft.digest();
    let plain = evaluate_classification(&ft.model, &split.test, None, Metric::Accuracy, 3, 32, &d).unwrap();
    let ranking: Vec<usize> = (0..split.test.schema.len()).collect();
    for kind in ScenarioKind::ALL {
        let s = MissingScenario::new(kind, 0.0).with_importance(ranking.clone());
        let r = evaluate_classification(&ft.model, &split.test, Some(&s), Metric::Accuracy, 3, 32, &d).unwrap();
        assert_eq!(r.value.unwrap().to_bits(), plain.value.unwrap().to_bits());
        assert_eq!(r.scenario, Some(kind));
    }
    assert_eq!(plain.config_digest, d);
    assert_eq!(plain.cells, split.test.len());
}

#[test]
fn auc_needs_two_classes() {
    let (split, ft) = finetuned(1);
    let err = evaluate_classification(&ft.model, &split.test, None, Metric::Auc, 0, 32, "").unwrap_err();
    assert!(err.is_config());
}

#[test]
fn classification_needs_classifiers() {
    let (_, split, pre) = tiny_pretrained(2);
    let err = evaluate_classification(&pre.model, &split.test, None, Metric::Accuracy, 0, 32, "").unwrap_err();
    assert!(err.is_config());
}

#[test]
fn sweep_covers_the_cross_product() {
    let (split, ft) = finetuned(3);
    let ranking = importance_ranking(&split, 0).unwrap();
    let kinds = ScenarioKind::ALL;
    let sigmas = [0.0, 0.5];
    let seeds = [0, 1, 2];
    let plan = SweepPlan {
        kinds: &kinds,
        sigmas: &sigmas,
        seeds: &seeds,
        ranking: &ranking,
        metric: Metric::Accuracy,
        batch_size: 32,
    };
    let reports = run_missingness_sweep(&ft.model, &split.test, &plan, &ft.digest()).unwrap();
    assert_eq!(reports.len(), kinds.len() * sigmas.len() * seeds.len());
    let at_zero: Vec<f64> = reports
        .iter()
        .filter(|r| r.sigma == 0.0)
        .map(|r| r.value.unwrap())
        .collect();
    assert_eq!(at_zero.len(), 12);
    assert!(at_zero.iter().all(|&v| v == at_zero[0]));
    assert!(reports.iter().all(|r| r.value.is_some_and(f64::is_finite)));
    let table = render_table(&reports);
    assert_eq!(table.lines().count(), reports.len() + 1);
}

#[test]
fn mean_baseline_rmse_is_the_spread_of_held_out_z_scores() {
    let cfg = tabimg_harness::RunConfig::default();
    let split = tabimg_harness::pipeline::load_data(&cfg).unwrap();
    let test = &split.test;
    let r = mean_impute_baseline(test, 0.5, false, 7, "").unwrap();
    // independent oracle: the masked cells are exactly the ones the frozen
    // mask hides among observed continuous cells
    let n_cat = test.schema.n_categorical();
    let masked = imputation_mask(&test.table, n_cat, 0.5, false, 7);
    let mut sq = 0.0;
    let mut count = 0;
    for row in 0..test.len() {
        for c in n_cat..test.schema.len() {
            if masked.is_missing(row, c) && !test.table.is_missing(row, c) {
                sq += f64::from(test.table.value(row, c)).powi(2);
                count += 1;
            }
        }
    }
    assert_eq!(r.cells, count);
    let rmse = r.value.unwrap();
    assert!((rmse - (sq / count as f64).sqrt()).abs() < 1e-12);
    assert!((rmse - 1.0).abs() <= 0.05, "{rmse}");
}

#[test]
fn zero_rate_imputation_reports_an_empty_marker() {
    let (_, split, pre) = tiny_pretrained(4);
    let base = mean_impute_baseline(&split.test, 0.0, false, 0, "").unwrap();
    assert_eq!((base.value, base.cells), (None, 0));
    let model = evaluate_imputation(&pre.model, &split.test, &[0.0, 0.5], false, 0, 32, "d").unwrap();
    assert_eq!((model[0].value, model[0].cells), (None, 0));
    assert!(model[1].value.is_some_and(f64::is_finite));
    assert!(model[1].cells > 0);
    // model and baseline score the same frozen cells
    let base = mean_impute_baseline(&split.test, 0.5, false, 0, "").unwrap();
    assert_eq!(base.cells, model[1].cells);
}

#[test]
fn masking_categoricals_keeps_the_continuous_cells() {
    let (_, split, _) = tiny_pretrained(5);
    let n_cat = split.test.schema.n_categorical();
    let plain = imputation_mask(&split.test.table, n_cat, 0.3, false, 1);
    let all_cat = imputation_mask(&split.test.table, n_cat, 0.3, true, 1);
    for r in 0..plain.rows {
        for c in 0..plain.cols {
            if c < n_cat {
                assert!(all_cat.is_missing(r, c));
            } else {
                assert_eq!(all_cat.is_missing(r, c), plain.is_missing(r, c));
            }
        }
    }
}

#[test]
fn reports_serialize_with_lowercase_metric_names() {
    let r = EvalReport {
        task: TASK_CLASSIFY.into(),
        metric: Metric::Auc,
        value: Some(0.75),
        scenario: Some(ScenarioKind::Lifm),
        sigma: 0.25,
        seed: 1,
        config_digest: "ab".into(),
        cells: 10,
    };
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"metric\":\"auc\""), "{json}");
    assert!(json.contains("\"scenario\":\"LIFM\""), "{json}");
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}
