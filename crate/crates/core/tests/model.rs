mod common;

use common::{random_batch, random_images, rng, schema, small_config, small_model};
use proptest::prelude::*;
use rand::Rng;
use tabimg_core::data::TabularBatch;
use tabimg_core::model::{build_attention_mask, Model, ModelConfig, ParamGroup};
use tabimg_core::numeric::{Tape, Tensor, BLOCKED};
use tabimg_core::Error;

fn slot<'a>(model: &'a Model<f32>, name: &str) -> &'a [f32] {
    model.params.by_name(name).unwrap().value.data()
}

fn row(t: &Tensor<f32>, b: usize, pos: usize, seq: usize) -> Vec<f32> {
    let d = t.last_dim();
    t.data()[(b * seq + pos) * d..][..d].to_vec()
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn embedding_rows_follow_their_construction() {
    let model = small_model(1);
    let s = schema();
    let n = s.len();
    let d = model.cfg.d_model;
    // row 0 fully observed, row 1 fully missing
    let mut batch = TabularBatch::new(2, n, vec![2., 1., 0.5, -1.25, 3.0, 0., 0., 0., 0., 0.], None).unwrap();
    batch.mask[n..].iter_mut().for_each(|m| *m = true);
    let mut tape = Tape::new();
    let e = model.embed_tabular(&mut tape, &batch).unwrap();
    assert_eq!(tape.shape(e), &[2, n + 1, d]);
    let e = tape.value(e).clone();

    let u = slot(&model, "tab.embed.U");
    let u_row = |k: usize| &u[k * d..(k + 1) * d];
    let plus = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();

    let cls = slot(&model, "tab.embed.cls");
    assert!(close(&row(&e, 0, 0, n + 1), &plus(cls, u_row(0)), 1e-6));
    assert!(close(&row(&e, 1, 0, n + 1), &plus(cls, u_row(0)), 1e-6));

    let msk = slot(&model, "tab.embed.msk");
    for k in 1..=n {
        assert!(
            close(&row(&e, 1, k, n + 1), &plus(msk, u_row(k)), 1e-6),
            "missing position {k}"
        );
    }

    let a = slot(&model, "tab.embed.A");
    let offsets = s.category_offsets();
    for (c, code) in [(0usize, 2usize), (1, 1)] {
        let r = offsets[c] + code;
        assert!(close(
            &row(&e, 0, c + 1, n + 1),
            &plus(&a[r * d..(r + 1) * d], u_row(c + 1)),
            1e-6
        ));
    }

    let w = slot(&model, "tab.embed.cont.W");
    let b = slot(&model, "tab.embed.cont.b");
    for (j, x) in [(2usize, 0.5f32), (3, -1.25), (4, 3.0)] {
        let want: Vec<f32> = (0..d).map(|i| x * w[i] + b[i] + u_row(j + 1)[i]).collect();
        assert!(close(&row(&e, 0, j + 1, n + 1), &want, 1e-5), "continuous column {j}");
    }
}

#[test]
fn out_of_range_code_is_an_index_error() {
    let model = small_model(0);
    let batch = TabularBatch::new(1, 5, vec![3., 0., 0., 0., 0.], None).unwrap();
    let mut tape = Tape::new();
    assert!(matches!(
        model.embed_tabular(&mut tape, &batch),
        Err(Error::Index { .. })
    ));
}

#[test]
fn attention_mask_blocks_missing_keys_only() {
    let mut batch = TabularBatch::new(1, 3, vec![0.; 3], None).unwrap();
    let m: Tensor<f32> = build_attention_mask(&batch);
    assert!(m.data().iter().all(|&v| v == 0.0));

    batch.mask[1] = true; // token 2
    let m: Tensor<f32> = build_attention_mask(&batch);
    let at = |q: usize, k: usize| m.data()[q * 4 + k];
    for q in 0..4 {
        assert_eq!(at(q, 0), 0.0, "[CLS] key never blocked");
        let want = if q == 2 { 0.0 } else { BLOCKED as f32 };
        assert_eq!(at(q, 2), want);
        for k in [1, 3] {
            assert_eq!(at(q, k), 0.0);
        }
    }
}

#[test]
fn single_image_token_makes_cross_attention_query_independent() {
    let model = small_model(3);
    let mut r = rng(4);
    let d = model.cfg.d_model;
    let mut tape = Tape::new();
    let seq_t = Tensor::from_fn(&[2, 1, d], |_| r.random_range(-1.0f32..1.0));
    let seq = tape.constant(seq_t.clone()).unwrap();
    let f1 = tape
        .constant(Tensor::from_fn(&[2, 6, d], |_| r.random_range(-1.0f32..1.0)))
        .unwrap();
    let f2 = tape
        .constant(Tensor::from_fn(&[2, 6, d], |_| r.random_range(-3.0f32..3.0)))
        .unwrap();
    let o1 = model.cross_attention(&mut tape, 0, f1, seq).unwrap();
    let o2 = model.cross_attention(&mut tape, 0, f2, seq).unwrap();
    assert_eq!(tape.value(o1).data(), tape.value(o2).data());

    // every row equals the token's value projection mixed by the output map
    let p = |name: &str| slot(&model, name).to_vec();
    let (wv, bv, wo, bo) = (
        p("interact.0.cross.Wv"),
        p("interact.0.cross.bv"),
        p("interact.0.cross.Wo"),
        p("interact.0.cross.bo"),
    );
    let out = tape.value(o1).clone();
    for b in 0..2 {
        let x = &seq_t.data()[b * d..(b + 1) * d];
        let v: Vec<f32> = (0..d)
            .map(|j| bv[j] + (0..d).map(|i| x[i] * wv[i * d + j]).sum::<f32>())
            .collect();
        let o: Vec<f32> = (0..d)
            .map(|j| bo[j] + (0..d).map(|i| v[i] * wo[i * d + j]).sum::<f32>())
            .collect();
        for pos in 0..6 {
            assert!(close(&row(&out, b, pos, 6), &o, 1e-5));
        }
    }
}

#[test]
fn head_dim_scale_follows_heads() {
    let cfg = ModelConfig::default();
    assert_eq!((cfg.d_model, cfg.heads, cfg.head_dim()), (64, 8, 8));
    let bad = ModelConfig {
        heads: 5,
        ..ModelConfig::default()
    };
    assert!(bad.validate().is_err());
    let reference = ModelConfig::reference_scale();
    assert_eq!(
        (
            reference.d_model,
            reference.heads,
            reference.tab_layers,
            reference.interact_layers,
            reference.proj_dim
        ),
        (512, 8, 4, 4, 128)
    );
    assert_eq!((reference.image_head_hidden, reference.tab_head_hidden), (2048, 512));
}

#[test]
fn interaction_and_heads_have_the_documented_shapes() {
    let model = small_model(5);
    let s = schema();
    let mut r = rng(6);
    let batch = random_batch(&mut r, &s, 3, 0.3);
    let images = random_images(&mut r, 3, 8);
    let mut tape = Tape::new();
    let img = model.encode_image(&mut tape, &images).unwrap();
    assert_eq!(tape.shape(img.seq), &[3, 4, 16]);
    let t = model.encode_tabular(&mut tape, &batch).unwrap();
    assert_eq!(tape.shape(t), &[3, 6, 16]);
    let f = model.interaction(&mut tape, t, img.seq).unwrap();
    assert_eq!(tape.shape(f), tape.shape(t));

    let logits = model.itm_logits(&mut tape, f).unwrap();
    assert_eq!(tape.shape(logits), &[3, 2]);

    let pred = model.mtr_predict(&mut tape, f).unwrap();
    let cat = pred.cat_logits.unwrap();
    assert_eq!(tape.shape(cat), &[6, s.total_categories()]);
    let lens: Vec<usize> = pred.segments.iter().map(|&(_, len)| len).collect();
    assert_eq!(lens, [3, 4, 3, 4, 3, 4]);
    assert_eq!(tape.shape(pred.cont.unwrap()), &[3, 3]);

    for z in [
        model.project_image(&mut tape, img.spatial).unwrap(),
        model.project_tabular(&mut tape, t).unwrap(),
    ] {
        let v = tape.value(z);
        assert_eq!(v.shape(), &[3, 8]);
        for row in v.data().chunks(8) {
            let norm = row.iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_weight_reconstruction_head_predicts_its_bias() {
    let mut model = small_model(7);
    for (name, value) in [("head.mtr.cont.W", 0.0f32), ("head.mtr.cont.b", 1.75)] {
        let id = model.params.id(name).unwrap();
        model.params.get_mut(id).value.data_mut().fill(value);
    }
    let mut r = rng(8);
    let batch = random_batch(&mut r, &schema(), 4, 0.2);
    let mut tape = Tape::new();
    let t = model.encode_tabular(&mut tape, &batch).unwrap();
    let pred = model.mtr_predict(&mut tape, t).unwrap();
    assert!(tape.value(pred.cont.unwrap()).data().iter().all(|&v| v == 1.75));
}

#[test]
fn unmasked_path_reproduces_the_positive_pairing() {
    // Identical tabular inputs through the interaction give identical F.
    let model = small_model(9);
    let mut r = rng(10);
    let batch = random_batch(&mut r, &schema(), 2, 0.0);
    let images = random_images(&mut r, 2, 8);
    let run = |batch: &TabularBatch| {
        let mut tape = Tape::new();
        let img = model.encode_image(&mut tape, &images).unwrap();
        let t = model.encode_tabular(&mut tape, batch).unwrap();
        let f = model.interaction(&mut tape, t, img.seq).unwrap();
        tape.value(f).clone()
    };
    let plain = run(&batch);
    assert_eq!(plain, run(&batch));
    let mut masked = batch.clone();
    masked.mask[3] = true;
    let differs = run(&masked);
    assert_ne!(plain, differs, "masking a token must reach the multimodal output");
}

fn with_classifier_biases(model: &mut Model<f32>, biases: [[f32; 3]; 3]) {
    for (head, b) in ["image", "tab", "multi"].iter().zip(biases) {
        let w = model.params.id(&format!("clf.{head}.W")).unwrap();
        model.params.get_mut(w).value.data_mut().fill(0.0);
        let bi = model.params.id(&format!("clf.{head}.b")).unwrap();
        model.params.get_mut(bi).value.data_mut().copy_from_slice(&b);
    }
}

#[test]
fn ensemble_averages_probabilities() {
    let mut model = small_model(11);
    let mut r = rng(12);
    model.attach_classifiers(3, &mut r).unwrap();
    assert_eq!(model.classes(), Some(3));
    let batch = random_batch(&mut r, &schema(), 2, 0.2);
    let images = random_images(&mut r, 2, 8);

    let probs = model.ensemble_classify(&images, &batch).unwrap();
    for row in probs.data().chunks(3) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    let p = [0.7f32, 0.2, 0.1];
    let logp = p.map(f32::ln);
    with_classifier_biases(&mut model, [logp; 3]);
    let probs = model.ensemble_classify(&images, &batch).unwrap();
    for row in probs.data().chunks(3) {
        assert!(close(row, &p, 1e-6));
    }

    // argmax votes {0, 0, 1} at confidence 0.9 each
    let a = [0.9f32, 0.05, 0.05].map(f32::ln);
    let b = [0.05f32, 0.9, 0.05].map(f32::ln);
    with_classifier_biases(&mut model, [a, a, b]);
    let probs = model.ensemble_classify(&images, &batch).unwrap();
    for row in probs.data().chunks(3) {
        let best = (0..3).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap();
        assert_eq!(best, 0);
        assert!((row[0] - (0.9 + 0.9 + 0.05) / 3.0).abs() < 1e-6);
    }
}

#[test]
fn classifying_without_classifiers_is_a_config_error() {
    let model = small_model(13);
    let mut r = rng(14);
    let batch = random_batch(&mut r, &schema(), 1, 0.0);
    let images = random_images(&mut r, 1, 8);
    assert!(matches!(
        model.ensemble_classify(&images, &batch),
        Err(Error::Config(_))
    ));
}

#[test]
fn every_slot_belongs_to_exactly_one_group() {
    let mut model = small_model(15);
    model.attach_classifiers(4, &mut rng(16)).unwrap();
    for (_, p) in model.params.iter() {
        let groups: Vec<_> = ParamGroup::PRETRAIN
            .into_iter()
            .chain([ParamGroup::Classifiers])
            .filter(|g| p.name.starts_with(g.prefix()))
            .collect();
        assert_eq!(groups.len(), 1, "{}", p.name);
    }
    assert!(model.params.by_name("interact.0.cross.Wq").is_some());
    assert!(model.params.by_name("tab.embed.A").is_some());
}

#[test]
fn rebuilding_from_params_gives_identical_forwards() {
    let model = small_model(17);
    let rebuilt = Model::from_params(small_config(), schema(), model.params.clone()).unwrap();
    let mut r = rng(18);
    let batch = random_batch(&mut r, &schema(), 3, 0.3);
    let enc = |m: &Model<f32>| {
        let mut tape = Tape::new();
        let t = m.encode_tabular(&mut tape, &batch).unwrap();
        tape.value(t).clone()
    };
    assert_eq!(enc(&model), enc(&rebuilt));
}

fn scramble_masked(batch: &TabularBatch, r: &mut impl Rng) -> TabularBatch {
    let mut other = batch.clone();
    for (v, &m) in other.values.iter_mut().zip(&batch.mask) {
        if m {
            *v = r.random_range(-50.0f32..50.0);
        }
    }
    other
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_values_are_never_read(seed in any::<u64>(), rows in 1usize..4, missing in 0.0f64..0.9) {
        let model = small_model(seed % 3);
        let mut r = rng(seed);
        let batch = random_batch(&mut r, &schema(), rows, missing);
        let other = scramble_masked(&batch, &mut r);
        let images = random_images(&mut r, rows, 8);
        let run = |b: &TabularBatch| {
            let mut tape = Tape::new();
            let img = model.encode_image(&mut tape, &images).unwrap();
            let t = model.encode_tabular(&mut tape, b).unwrap();
            let f = model.interaction(&mut tape, t, img.seq).unwrap();
            let pred = model.mtr_predict(&mut tape, f).unwrap();
            (
                tape.value(t).clone(),
                tape.value(f).clone(),
                tape.value(pred.cat_logits.unwrap()).clone(),
                tape.value(pred.cont.unwrap()).clone(),
            )
        };
        prop_assert_eq!(run(&batch), run(&other));
    }

    #[test]
    fn mask_token_only_reaches_missing_positions(seed in any::<u64>(), delta in 0.01f32..2.0) {
        let model = small_model(seed % 3);
        let mut r = rng(seed);
        let batch = random_batch(&mut r, &schema(), 3, 0.4);
        let mut bumped = model.clone();
        let id = bumped.params.id("tab.embed.msk").unwrap();
        bumped.params.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v += delta);
        let enc = |m: &Model<f32>| {
            let mut tape = Tape::new();
            let t = m.encode_tabular(&mut tape, &batch).unwrap();
            tape.value(t).clone()
        };
        let (a, b) = (enc(&model), enc(&bumped));
        let s = batch.cols + 1;
        for bi in 0..batch.rows {
            for pos in 0..s {
                let same = row(&a, bi, pos, s) == row(&b, bi, pos, s);
                let missing = pos > 0 && batch.is_missing(bi, pos - 1);
                prop_assert_eq!(same, !missing, "row {} position {}", bi, pos);
            }
        }
    }
}
