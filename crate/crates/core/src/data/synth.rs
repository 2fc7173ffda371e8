use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Column, OrdinalCodec, TabularBatch, TabularSchema, ZScore};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub samples: usize,
    /// Total tabular columns; the first `cardinalities.len()` are categorical.
    pub n_cols: usize,
    pub cardinalities: Vec<usize>,
    pub image_size: usize,
    pub latent_dim: usize,
    pub noise: f64,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 2000,
            n_cols: 12,
            cardinalities: vec![3, 3, 4, 2],
            image_size: 16,
            latent_dim: 6,
            noise: 0.1,
            classes: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 5 {
            return Err(Error::config("synthetic data needs at least 5 samples"));
        }
        if self.cardinalities.len() >= self.n_cols {
            return Err(Error::config("need at least one continuous column"));
        }
        if self.cardinalities.iter().any(|&c| c < 2) {
            return Err(Error::config("categorical cardinalities must be at least 2"));
        }
        if self.latent_dim < 5 {
            return Err(Error::config("latent dimension must be at least 5"));
        }
        if !matches!(self.classes, 2 | 4) {
            return Err(Error::config("synthetic labels support 2 or 4 classes"));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::config("image size must be a multiple of 4, at least 8"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise level must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Paired images, encoded table and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: TabularSchema,
    pub image_size: usize,
    /// `len × H × W × 3`, values in [0, 1].
    pub images: Vec<f32>,
    pub table: TabularBatch,
    pub classes: usize,
    /// Generating latents (`len × latent_dim`); empty for loaded data.
    pub latents: Vec<f32>,
    pub latent_dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.table.rows
    }

    pub fn is_empty(&self) -> bool {
        self.table.rows == 0
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    pub fn labels(&self) -> &[usize] {
        self.table.labels.as_deref().unwrap_or(&[])
    }

    pub fn image_tensor(&self, rows: &[usize]) -> Tensor<f32> {
        let p = self.pixels_per_image();
        let mut data = Vec::with_capacity(rows.len() * p);
        for &r in rows {
            data.extend_from_slice(&self.images[r * p..(r + 1) * p]);
        }
        Tensor::new(&[rows.len(), self.image_size, self.image_size, 3], data).expect("image buffer matches its shape")
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let p = self.pixels_per_image();
        let mut images = Vec::with_capacity(rows.len() * p);
        let mut latents = Vec::new();
        for &r in rows {
            images.extend_from_slice(&self.images[r * p..(r + 1) * p]);
            if !self.latents.is_empty() {
                latents.extend_from_slice(&self.latents[r * self.latent_dim..(r + 1) * self.latent_dim]);
            }
        }
        Dataset {
            schema: self.schema.clone(),
            image_size: self.image_size,
            images,
            table: self.table.select(rows),
            classes: self.classes,
            latents,
            latent_dim: self.latent_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

// Logistic approximation of the standard normal CDF, enough for near-equal bins.
fn approx_normal_cdf(u: f64) -> f64 {
    1.0 / (1.0 + (-1.702 * u).exp())
}

fn level_name(level: usize) -> String {
    format!("level_{level}")
}

/// Generates latents, images and raw tabular values, splits 60/20/20 and
/// encodes the table with training-split statistics.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SplitDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.samples;
    let ld = cfg.latent_dim;
    let n_cat = cfg.cardinalities.len();
    let n_cont = cfg.n_cols - n_cat;
    let size = cfg.image_size;

    let latents: Vec<f64> = (0..n * ld).map(|_| rng.sample(StandardNormal)).collect();
    let z = |i: usize, l: usize| latents[i * ld + l % ld];

    let mut raw_cat: Vec<Vec<String>> = vec![Vec::with_capacity(n); n_cat];
    let mut raw_cont: Vec<Vec<f64>> = vec![Vec::with_capacity(n); n_cont];
    let mut labels = Vec::with_capacity(n);
    let mut images = vec![0f32; n * size * size * 3];
    let half = size as f64 / 2.0;
    let radius = size as f64 / 5.0;

    for i in 0..n {
        for (c, &card) in cfg.cardinalities.iter().enumerate() {
            let eps: f64 = rng.sample(StandardNormal);
            let u = 0.8 * z(i, c) + 0.6 * z(i, c + 2) + cfg.noise * eps;
            let level = ((approx_normal_cdf(u) * card as f64) as usize).min(card - 1);
            raw_cat[c].push(level_name(level));
        }
        for (j, col) in raw_cont.iter_mut().enumerate() {
            let eps: f64 = rng.sample(StandardNormal);
            let v = if j == 0 {
                3.0 * z(i, 0) + 10.0 + cfg.noise * eps
            } else {
                let scale = 1.0 + 0.5 * j as f64;
                scale * (z(i, j) + 0.5 * z(i, j + 1) + cfg.noise * eps) + 2.0 * j as f64 - 3.0
            };
            col.push(v);
        }
        let label = match cfg.classes {
            2 => usize::from(z(i, 0) > 0.0),
            _ => 2 * usize::from(z(i, 0) > 0.0) + usize::from(z(i, 1) > 0.0),
        };
        labels.push(label);

        let cx = half + (size as f64 / 4.0) * z(i, 3).tanh();
        let cy = half + (size as f64 / 4.0) * z(i, 4).tanh();
        let img = &mut images[i * size * size * 3..(i + 1) * size * size * 3];
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let disk = if dx * dx + dy * dy <= radius * radius {
                    0.15
                } else {
                    0.0
                };
                for ch in 0..3 {
                    let eps: f64 = rng.sample(StandardNormal);
                    let v = 0.5 + 0.3 * (0.7 * z(i, ch)).tanh() + disk + 0.5 * cfg.noise * eps;
                    img[(y * size + x) * 3 + ch] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (n as f64 * 0.6).round() as usize;
    let n_val = (n as f64 * 0.2).round() as usize;
    let train_rows = &order[..n_train];

    let mut columns = Vec::with_capacity(cfg.n_cols);
    let mut codecs = Vec::with_capacity(n_cat);
    for (c, &card) in cfg.cardinalities.iter().enumerate() {
        let vocab: Vec<String> = (0..card).map(level_name).collect();
        let codec = OrdinalCodec::fit(&format!("cat_{c}"), &vocab)?;
        columns.push(Column::categorical(format!("cat_{c}"), codec.categories().to_vec()));
        codecs.push(codec);
    }
    let mut stats = Vec::with_capacity(n_cont);
    for (j, col) in raw_cont.iter().enumerate() {
        let train: Vec<f64> = train_rows.iter().map(|&r| col[r]).collect();
        let zs = ZScore::fit(&format!("num_{j}"), &train)?;
        columns.push(Column::continuous(format!("num_{j}"), zs.mean, zs.std));
        stats.push(zs);
    }
    let schema = TabularSchema::new(columns)?;

    let mut values = Vec::with_capacity(n * cfg.n_cols);
    for i in 0..n {
        for (c, codec) in codecs.iter().enumerate() {
            values.push(codec.encode(&raw_cat[c][i])? as f32);
        }
        for (j, zs) in stats.iter().enumerate() {
            values.push(zs.apply(raw_cont[j][i]) as f32);
        }
    }
    let full = Dataset {
        schema,
        image_size: size,
        images,
        table: TabularBatch::new(n, cfg.n_cols, values, Some(labels))?,
        classes: cfg.classes,
        latents: latents.iter().map(|&v| v as f32).collect(),
        latent_dim: ld,
    };
    Ok(SplitDataset {
        train: full.subset(train_rows),
        val: full.subset(&order[n_train..n_train + n_val]),
        test: full.subset(&order[n_train + n_val..]),
    })
}
