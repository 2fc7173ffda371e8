//! Small models and random batches shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabimg_core::data::{Column, TabularBatch, TabularSchema};
use tabimg_core::model::{Model, ModelConfig};
use tabimg_core::numeric::Tensor;
use tabimg_core::vision::VisionConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two categorical columns (3 and 4 levels) and three continuous ones.
pub fn schema() -> TabularSchema {
    let cats = |n: usize| (0..n).map(|i| format!("v{i}")).collect();
    TabularSchema::new(vec![
        Column::categorical("colour", cats(3)),
        Column::categorical("shape", cats(4)),
        Column::continuous("height", 0.0, 1.0),
        Column::continuous("weight", 0.0, 1.0),
        Column::continuous("age", 0.0, 1.0),
    ])
    .unwrap()
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 4,
        tab_layers: 2,
        interact_layers: 2,
        proj_dim: 8,
        image_head_hidden: 16,
        tab_head_hidden: 16,
        ff_mult: 2,
        vision: VisionConfig {
            image_size: 8,
            widths: vec![4, 8, 8, 8],
            strides: vec![1, 1, 2, 2],
            d_model: 16,
        },
        ..ModelConfig::default()
    }
}

pub fn small_model(seed: u64) -> Model<f32> {
    Model::init(small_config(), schema(), &mut rng(seed)).unwrap()
}

/// Random codes and values with each cell missing with probability `missing`.
pub fn random_batch<R: Rng>(rng: &mut R, schema: &TabularSchema, rows: usize, missing: f64) -> TabularBatch {
    let n = schema.len();
    let mut values = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        for (c, col) in schema.columns.iter().enumerate() {
            values.push(if schema.is_categorical(c) {
                rng.random_range(0..col.cardinality) as f32
            } else {
                rng.random_range(-2.0f32..2.0)
            });
        }
    }
    let mut batch = TabularBatch::new(rows, n, values, None).unwrap();
    batch.mask = (0..rows * n).map(|_| rng.random_bool(missing)).collect();
    batch
}

pub fn random_images<R: Rng>(rng: &mut R, rows: usize, size: usize) -> Tensor<f32> {
    Tensor::from_fn(&[rows, size, size, 3], |_| rng.random_range(0.0f32..1.0))
}
