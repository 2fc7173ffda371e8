use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tabimg_core::data::*;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

fn continuous_schema(n: usize) -> TabularSchema {
    TabularSchema::new((0..n).map(|i| Column::continuous(format!("x{i}"), 0.0, 1.0)).collect()).unwrap()
}

#[test]
fn zscore_gaussian_sample_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let train: Vec<f64> = (0..5000)
        .map(|_| 4.0 + 2.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let (out, _, _) = zscore_fit_transform("g", &train, &[]).unwrap();
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-6);
}

#[test]
fn independent_column_has_negligible_importance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = 1000;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..rows {
        let signal: f64 = rng.sample(StandardNormal);
        let noise: f64 = rng.sample(StandardNormal);
        values.push(signal as f32);
        values.push(noise as f32);
        labels.push(usize::from(signal > 0.0));
    }
    let batch = TabularBatch::new(rows, 2, values, Some(labels)).unwrap();
    let imp = feature_importance(&batch, &continuous_schema(2), 3).unwrap();
    assert!(imp.scores[1].abs() < 0.02, "{:?}", imp.scores);
    assert_eq!(imp.ranking, vec![0, 1]);
}

#[test]
fn label_copy_ranks_first_and_ties_keep_index_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows = 600;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..rows {
        let y = rng.random_range(0..3usize);
        let weak: f64 = rng.sample::<f64, _>(StandardNormal) + 0.3 * y as f64;
        let twin: f64 = rng.sample(StandardNormal);
        // columns: weak signal, twin, twin, exact label copy
        values.extend([weak as f32, twin as f32, twin as f32, y as f32]);
        labels.push(y);
    }
    let batch = TabularBatch::new(rows, 4, values, Some(labels)).unwrap();
    let imp = feature_importance(&batch, &continuous_schema(4), 0).unwrap();
    assert_eq!(imp.ranking[0], 3, "{:?}", imp.scores);
    let p1 = imp.ranking.iter().position(|&c| c == 1).unwrap();
    let p2 = imp.ranking.iter().position(|&c| c == 2).unwrap();
    assert_eq!(imp.scores[1], imp.scores[2]);
    assert_eq!(p2, p1 + 1);
}

#[test]
fn importance_requires_labels() {
    let batch = TabularBatch::new(2, 1, vec![0.0, 1.0], None).unwrap();
    assert!(feature_importance(&batch, &continuous_schema(1), 0).is_err());
}

#[test]
fn synth_noise_free_affine_column() {
    let cfg = SynthConfig {
        samples: 300,
        noise: 0.0,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg).unwrap();
    let d = &data.train;
    let n_cat = d.schema.n_categorical();
    let col: Vec<f64> = (0..d.len()).map(|r| d.table.value(r, n_cat) as f64).collect();
    let z0: Vec<f64> = (0..d.len()).map(|r| d.latents[r * d.latent_dim] as f64).collect();
    assert!((pearson(&col, &z0) - 1.0).abs() < 1e-6);
}

#[test]
fn synth_red_channel_tracks_its_latent() {
    let data = synth_generate(&SynthConfig::default()).unwrap();
    let d = &data.train;
    let p = d.pixels_per_image();
    let red: Vec<f64> = (0..d.len())
        .map(|r| {
            d.images[r * p..(r + 1) * p]
                .iter()
                .step_by(3)
                .map(|&v| v as f64)
                .sum::<f64>()
                / (p / 3) as f64
        })
        .collect();
    let z0: Vec<f64> = (0..d.len()).map(|r| d.latents[r * d.latent_dim] as f64).collect();
    assert!(pearson(&red, &z0) > 0.9);
    assert!(d.images.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn synth_label_balance_and_split_sizes() {
    let data = synth_generate(&SynthConfig::default()).unwrap();
    assert_eq!((data.train.len(), data.val.len(), data.test.len()), (1200, 400, 400));
    let mut counts = [0usize; 4];
    for d in [&data.train, &data.val, &data.test] {
        for &l in d.labels() {
            counts[l] += 1;
        }
        d.table.check_schema(&d.schema).unwrap();
    }
    for c in counts {
        assert!((c as f64 / 2000.0 - 0.25).abs() < 0.05, "{counts:?}");
    }
}

#[test]
fn synth_determinism_and_seed_disjointness() {
    let cfg = SynthConfig {
        samples: 200,
        ..SynthConfig::default()
    };
    assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
    let a = synth_generate(&cfg).unwrap();
    let b = synth_generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
    let key = |d: &Dataset, r: usize| d.latents[r * d.latent_dim..(r + 1) * d.latent_dim].to_vec();
    for r in 0..a.train.len() {
        for s in 0..b.test.len() {
            assert_ne!(key(&a.train, r), key(&b.test, s));
        }
    }
}

#[test]
fn train_columns_are_standardized() {
    let data = synth_generate(&SynthConfig::default()).unwrap();
    let d = &data.train;
    for c in d.schema.n_categorical()..d.schema.len() {
        let col: Vec<f64> = (0..d.len()).map(|r| d.table.value(r, c) as f64).collect();
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-4 && (std - 1.0).abs() < 1e-4, "{c}: {mean} {std}");
    }
}

fn arb_batch() -> impl Strategy<Value = TabularBatch> {
    (2usize..12, 2usize..10).prop_flat_map(|(rows, cols)| {
        prop::collection::vec(-3.0f32..3.0, rows * cols)
            .prop_map(move |v| TabularBatch::new(rows, cols, v, None).unwrap())
    })
}

fn arb_kind() -> impl Strategy<Value = ScenarioKind> {
    prop::sample::select(ScenarioKind::ALL.to_vec())
}

proptest! {
    #[test]
    fn scenario_mask_counts_are_exact(batch in arb_batch(), kind in arb_kind(), sigma in 0.0f64..=1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = MissingScenario::new(kind, sigma).with_importance((0..batch.cols).rev().collect());
        let out = apply_missing_scenario(&batch, &s, &mut rng).unwrap();
        let expected = match kind {
            ScenarioKind::Rvm => (sigma * (batch.rows * batch.cols) as f64).round() as usize,
            _ => (sigma * batch.cols as f64).round() as usize * batch.rows,
        };
        prop_assert_eq!(out.masked_count(), expected);
        for i in 0..batch.values.len() {
            if !out.mask[i] {
                prop_assert_eq!(out.values[i], batch.values[i]);
            }
        }
    }

    #[test]
    fn importance_prefixes_are_nested(batch in arb_batch(), a in 0.0f64..=1.0, b in 0.0f64..=1.0, seed: u64) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let ranking: Vec<usize> = (0..batch.cols).collect();
        for kind in [ScenarioKind::Mifm, ScenarioKind::Lifm] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let small = apply_missing_scenario(&batch, &MissingScenario::new(kind, lo).with_importance(ranking.clone()), &mut rng).unwrap();
            let large = apply_missing_scenario(&batch, &MissingScenario::new(kind, hi).with_importance(ranking.clone()), &mut rng).unwrap();
            for i in 0..batch.mask.len() {
                prop_assert!(!small.mask[i] || large.mask[i]);
            }
        }
    }

    #[test]
    fn corruption_draws_from_column_support(batch in arb_batch(), rate in 0.0f64..=1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = corrupt_tabular(&batch, &batch, rate, &mut rng).unwrap();
        for r in 0..batch.rows {
            for c in 0..batch.cols {
                let v = out.value(r, c);
                prop_assert!((0..batch.rows).any(|s| batch.value(s, c) == v));
            }
        }
    }

    #[test]
    fn random_msk_count_per_row(batch in arb_batch(), rho in 0.0f64..=1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = random_msk(&batch, rho, &mut rng);
        let k = (rho * batch.cols as f64).round() as usize;
        for r in 0..batch.rows {
            prop_assert_eq!((0..batch.cols).filter(|&c| out.is_missing(r, c)).count(), k);
        }
    }
}
