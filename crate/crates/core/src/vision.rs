//! Compact convolutional image encoder, its projection to a token sequence,
//! and light image augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{ones, trunc_normal, zeros, INIT_STD};
use crate::numeric::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub const FLIP_PROB: f64 = 0.5;
pub const NOISE_PROB: f64 = 0.8;
pub const NOISE_STD: f64 = 0.05;
pub const BRIGHTNESS_PROB: f64 = 0.8;
pub const BRIGHTNESS_RANGE: (f32, f32) = (0.8, 1.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    /// Output channels of each 3x3 conv stage.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Width of the projected token sequence.
    pub d_model: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: 16,
            widths: vec![16, 32, 64, 64],
            strides: vec![1, 1, 2, 2],
            d_model: 64,
        }
    }
}

impl VisionConfig {
    pub fn channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(3)
    }

    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    /// Side of the output feature grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.downsample().max(1)
    }

    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::config(
                "vision widths and strides must be non-empty and equal length",
            ));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) || self.d_model == 0 {
            return Err(Error::config("vision widths, strides and d_model must be positive"));
        }
        let f = self.downsample();
        if self.image_size == 0 || !self.image_size.is_multiple_of(f) {
            return Err(Error::config(format!(
                "image size {} not divisible by total downsample {f}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stage {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

/// Slot ids of the image encoder and projection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisionParams {
    stages: Vec<Stage>,
    proj_w: ParamId,
    proj_b: ParamId,
    pos: ParamId,
}

impl VisionParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &VisionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut cin = 3;
        for (i, &cout) in cfg.widths.iter().enumerate() {
            let fan_in = 9 * cin;
            let std = (2.0 / fan_in as f64).sqrt();
            store.insert(format!("img.conv.{i}.w"), trunc_normal(rng, &[fan_in, cout], std))?;
            store.insert(format!("img.conv.{i}.b"), zeros(&[cout]))?;
            store.insert(format!("img.norm.{i}.gamma"), ones(&[cout]))?;
            store.insert(format!("img.norm.{i}.beta"), zeros(&[cout]))?;
            cin = cout;
        }
        let (c, d) = (cfg.channels(), cfg.d_model);
        store.insert("img.proj.W", trunc_normal(rng, &[c, d], INIT_STD))?;
        store.insert("img.proj.b", zeros(&[d]))?;
        store.insert("img.pos", trunc_normal(rng, &[cfg.seq_len(), d], INIT_STD))?;
        Self::lookup(store, cfg)
    }

    pub fn lookup<T: Scalar>(store: &ParamStore<T>, cfg: &VisionConfig) -> Result<Self> {
        cfg.validate()?;
        let stages = (0..cfg.widths.len())
            .map(|i| {
                Ok(Stage {
                    w: store.require(&format!("img.conv.{i}.w"))?,
                    b: store.require(&format!("img.conv.{i}.b"))?,
                    gamma: store.require(&format!("img.norm.{i}.gamma"))?,
                    beta: store.require(&format!("img.norm.{i}.beta"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VisionParams {
            stages,
            proj_w: store.require("img.proj.W")?,
            proj_b: store.require("img.proj.b")?,
            pos: store.require("img.pos")?,
        })
    }
}

/// `[B, H, W, 3]` images to the spatial map `[B, H', W', C]`.
///
/// Each stage is a padded 3x3 convolution, a per-pixel layer norm over
/// channels, then GELU.
pub fn encode_image<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &VisionParams,
    cfg: &VisionConfig,
    images: Var,
) -> Result<Var> {
    let shape = tape.shape(images).to_vec();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::shape(
            "encode_image",
            format!("expected [B,H,W,3], got {shape:?}"),
        ));
    }
    let f = cfg.downsample();
    if !shape[1].is_multiple_of(f) || !shape[2].is_multiple_of(f) {
        return Err(Error::config(format!(
            "image {}x{} not divisible by downsample {f}",
            shape[1], shape[2]
        )));
    }
    let mut x = images;
    for (stage, &stride) in params.stages.iter().zip(&cfg.strides) {
        let w = tape.param(store, stage.w)?;
        let b = tape.param(store, stage.b)?;
        x = tape.conv2d(x, w, b, stride, 1)?;
        let g = tape.param(store, stage.gamma)?;
        let be = tape.param(store, stage.beta)?;
        x = tape.layer_norm(x, g, be)?;
        x = tape.gelu(x)?;
    }
    Ok(x)
}

/// Flattens the grid row-major to `[B, H'W', C]`, maps each position to `D`
/// and adds the positional table.
pub fn project_to_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &VisionParams,
    spatial: Var,
) -> Result<Var> {
    let s = tape.shape(spatial).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("project_to_sequence", format!("{s:?}")));
    }
    let seq = tape.reshape(spatial, &[s[0], s[1] * s[2], s[3]])?;
    let w = tape.param(store, params.proj_w)?;
    let b = tape.param(store, params.proj_b)?;
    let proj = tape.linear(seq, w, Some(b))?;
    let pos = tape.param(store, params.pos)?;
    tape.add_broadcast(proj, pos)
}

/// Global average pool of `[B, H', W', C]` to `[B, C]`.
pub fn pool_image<T: Scalar>(tape: &mut Tape<T>, spatial: Var) -> Result<Var> {
    let s = tape.shape(spatial).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("pool_image", format!("{s:?}")));
    }
    let seq = tape.reshape(spatial, &[s[0], s[1] * s[2], s[3]])?;
    tape.mean_axis1(seq)
}

/// Which transforms fire for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPlan {
    pub flip: bool,
    pub noise: bool,
    pub brightness: Option<f32>,
}

impl AugmentPlan {
    pub const IDENTITY: AugmentPlan = AugmentPlan {
        flip: false,
        noise: false,
        brightness: None,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = rng.random_bool(FLIP_PROB);
        let noise = rng.random_bool(NOISE_PROB);
        let brightness = rng
            .random_bool(BRIGHTNESS_PROB)
            .then(|| rng.random_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1));
        AugmentPlan {
            flip,
            noise,
            brightness,
        }
    }

    /// Applies the plan to one `H × W × 3` image in place.
    pub fn apply<R: Rng + ?Sized>(&self, img: &mut [f32], size: usize, rng: &mut R) {
        if self.flip {
            for y in 0..size {
                for x in 0..size / 2 {
                    for c in 0..3 {
                        img.swap((y * size + x) * 3 + c, (y * size + size - 1 - x) * 3 + c);
                    }
                }
            }
        }
        if let Some(s) = self.brightness {
            img.iter_mut().for_each(|v| *v *= s);
        }
        if self.noise {
            let normal = Normal::new(0.0, NOISE_STD).expect("positive std");
            img.iter_mut().for_each(|v| *v += normal.sample(rng) as f32);
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// Random flip, brightness scaling and Gaussian noise, drawn per image.
pub fn augment_image<R: Rng + ?Sized>(batch: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != s[2] || s[3] != 3 {
        return Err(Error::shape("augment_image", format!("expected [B,S,S,3], got {s:?}")));
    }
    let size = s[1];
    let per = size * size * 3;
    let mut out = batch.clone();
    for img in out.data_mut().chunks_mut(per) {
        AugmentPlan::sample(rng).apply(img, size, rng);
    }
    Ok(out)
}
