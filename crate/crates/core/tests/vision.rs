mod common;

use common::{random_images, rng};
use proptest::prelude::*;
use rand::Rng;
use tabimg_core::numeric::gradcheck::{check_probe, Probe, FD_STEP, FD_TOLERANCE};
use tabimg_core::numeric::{ParamStore, Scalar, Tape, Tensor, Var};
use tabimg_core::vision::{augment_image, encode_image, pool_image, project_to_sequence, VisionConfig, VisionParams};
use tabimg_core::Error;

fn setup(seed: u64) -> (VisionConfig, ParamStore<f32>, VisionParams) {
    let cfg = VisionConfig::default();
    let mut store = ParamStore::new();
    let params = VisionParams::init(&mut store, &cfg, &mut rng(seed)).unwrap();
    (cfg, store, params)
}

#[test]
fn sixteen_pixel_input_maps_to_a_four_by_four_grid() {
    let (cfg, store, params) = setup(0);
    let images = random_images(&mut rng(1), 2, 16);
    let mut tape = Tape::new();
    let x = tape.constant(images).unwrap();
    let spatial = encode_image(&mut tape, &store, &params, &cfg, x).unwrap();
    assert_eq!(tape.shape(spatial), &[2, 4, 4, 64]);
    let seq = project_to_sequence(&mut tape, &store, &params, spatial).unwrap();
    assert_eq!(tape.shape(seq), &[2, 16, cfg.d_model]);
    let pooled = pool_image(&mut tape, spatial).unwrap();
    assert_eq!(tape.shape(pooled), &[2, 64]);
}

#[test]
fn zero_input_gives_finite_output_and_encoding_is_deterministic() {
    let (cfg, store, params) = setup(2);
    let run = |images: Tensor<f32>| {
        let mut tape = Tape::new();
        let x = tape.constant(images).unwrap();
        let s = encode_image(&mut tape, &store, &params, &cfg, x).unwrap();
        tape.value(s).clone()
    };
    assert!(run(Tensor::zeros(&[1, 16, 16, 3])).is_finite());
    let images = random_images(&mut rng(3), 2, 16);
    assert_eq!(run(images.clone()), run(images));
}

#[test]
fn indivisible_image_is_a_config_error() {
    let (cfg, store, params) = setup(4);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 10, 10, 3])).unwrap();
    assert!(matches!(
        encode_image(&mut tape, &store, &params, &cfg, x),
        Err(Error::Config(_))
    ));
}

fn identity_projection(store: &mut ParamStore<f32>, d: usize, zero_pos: bool) {
    let w = store.id("img.proj.W").unwrap();
    let eye = Tensor::from_fn(&[d, d], |i| f32::from(u8::from(i / d == i % d)));
    store.get_mut(w).value = eye;
    if zero_pos {
        let p = store.id("img.pos").unwrap();
        store.get_mut(p).value.data_mut().fill(0.0);
    }
}

#[test]
fn identity_projection_is_flatten_plus_position() {
    let (cfg, mut store, params) = setup(5);
    identity_projection(&mut store, 64, false);
    let mut r = rng(6);
    let grid = Tensor::from_fn(&[1, 4, 4, 64], |_| r.random_range(-1.0f32..1.0));
    let mut tape = Tape::new();
    let g = tape.constant(grid.clone()).unwrap();
    let seq = project_to_sequence(&mut tape, &store, &params, g).unwrap();
    let pos = store.by_name("img.pos").unwrap().value.data();
    let want: Vec<f32> = grid.data().iter().zip(pos).map(|(a, b)| a + b).collect();
    assert_eq!(tape.value(seq).data(), &want[..]);
    assert_eq!(cfg.seq_len(), 16);
}

#[test]
fn spatial_permutation_permutes_sequence_rows() {
    let (_, mut store, params) = setup(7);
    identity_projection(&mut store, 64, true);
    let w = store.id("img.proj.W").unwrap();
    let mut r = rng(8);
    store.get_mut(w).value = Tensor::from_fn(&[64, 64], |_| r.random_range(-0.2f32..0.2));
    let grid = Tensor::from_fn(&[1, 4, 4, 64], |_| r.random_range(-1.0f32..1.0));
    // transpose the 4x4 grid
    let perm: Vec<usize> = (0..16).map(|i| (i % 4) * 4 + i / 4).collect();
    let mut swapped = grid.clone();
    for (dst, &src) in perm.iter().enumerate() {
        swapped.data_mut()[dst * 64..(dst + 1) * 64].copy_from_slice(&grid.data()[src * 64..(src + 1) * 64]);
    }
    let mut tape = Tape::new();
    let a = tape.constant(grid).unwrap();
    let b = tape.constant(swapped).unwrap();
    let sa = project_to_sequence(&mut tape, &store, &params, a).unwrap();
    let sb = project_to_sequence(&mut tape, &store, &params, b).unwrap();
    let (sa, sb) = (tape.value(sa), tape.value(sb));
    for (dst, &src) in perm.iter().enumerate() {
        assert_eq!(
            &sb.data()[dst * 64..(dst + 1) * 64],
            &sa.data()[src * 64..(src + 1) * 64]
        );
    }
}

/// Encoder output read out against fixed weights; only one conv kernel is
/// trainable, and three of its entries are probed.
struct EncoderSlice {
    cfg: VisionConfig,
    images: Tensor<f32>,
    readout: Vec<f64>,
}

impl Probe for EncoderSlice {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> tabimg_core::Result<Var> {
        let params = VisionParams::lookup(store, &self.cfg)?;
        let x = tape.constant(self.images.cast())?;
        let s = encode_image(tape, store, &params, &self.cfg, x)?;
        let seq = project_to_sequence(tape, store, &params, s)?;
        let shape = tape.shape(seq).to_vec();
        let r = tape.constant(Tensor::from_fn(&shape, |i| {
            T::lit(self.readout[i % self.readout.len()])
        }))?;
        let prod = tape.mul(seq, r)?;
        tape.sum(prod)
    }
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let cfg = VisionConfig {
        image_size: 8,
        widths: vec![4, 8, 8, 8],
        d_model: 8,
        ..VisionConfig::default()
    };
    let mut r = rng(9);
    let mut store = ParamStore::<f64>::new();
    VisionParams::init(&mut store, &cfg, &mut r).unwrap();
    store.set_trainable(|name| name == "img.conv.1.w");
    let probe = EncoderSlice {
        images: random_images(&mut r, 2, 8),
        readout: (0..64).map(|_| r.random_range(-1.0..1.0)).collect(),
        cfg,
    };
    let errs = check_probe::<f32, _>(&probe, &store, FD_STEP, 3).unwrap();
    assert_eq!(errs.len(), 1);
    assert_eq!(errs[0].checked, 3);
    assert!(errs[0].rel_err < FD_TOLERANCE, "{}", errs[0].rel_err);
}

#[test]
fn two_augmentations_usually_differ_in_many_pixels() {
    let image = random_images(&mut rng(10), 1, 16);
    let trials = 1000;
    let mut differ = 0;
    for seed in 0..trials {
        let mut r = rng(seed);
        let a = augment_image(&image, &mut r).unwrap();
        let b = augment_image(&image, &mut r).unwrap();
        let changed = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
        if changed * 100 >= a.numel() {
            differ += 1;
        }
    }
    assert!(differ as f64 / trials as f64 > 0.99, "{differ} of {trials}");
}

proptest! {
    #[test]
    fn augmentation_stays_in_unit_range(seed in any::<u64>(), rows in 1usize..4) {
        let mut r = rng(seed);
        let images = random_images(&mut r, rows, 8);
        let out = augment_image(&images, &mut r).unwrap();
        prop_assert_eq!(out.shape(), images.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
