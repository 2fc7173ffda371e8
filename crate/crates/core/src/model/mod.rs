//! The joint network: missing-aware tabular transformer, image encoder,
//! cross-modal interaction layers and every head used in pre-training and
//! fine-tuning.

mod forward;
mod slots;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use forward::{build_attention_mask, Features, ImageFeatures, MtrPrediction};
pub use slots::ParamGroup;

use crate::data::TabularSchema;
use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Scalar};
use crate::vision::VisionConfig;
use slots::Ids;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub tab_layers: usize,
    pub interact_layers: usize,
    /// Width of the shared contrastive space.
    pub proj_dim: usize,
    pub image_head_hidden: usize,
    pub tab_head_hidden: usize,
    pub ff_mult: usize,
    pub temperature: f64,
    pub mask_ratio: f64,
    pub vision: VisionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 8,
            tab_layers: 4,
            interact_layers: 4,
            proj_dim: 32,
            image_head_hidden: 256,
            tab_head_hidden: 256,
            ff_mult: 4,
            temperature: 0.1,
            mask_ratio: 0.5,
            vision: VisionConfig::default(),
        }
    }
}

impl ModelConfig {
    /// The full-size setting: width 512, 8 heads, 4 + 4 layers, 128-wide
    /// projections with 2048/512 hidden units.
    pub fn reference_scale() -> Self {
        ModelConfig {
            d_model: 512,
            proj_dim: 128,
            image_head_hidden: 2048,
            tab_head_hidden: 512,
            vision: VisionConfig {
                d_model: 512,
                ..VisionConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.tab_layers == 0 || self.interact_layers == 0 {
            return Err(Error::config("layer counts must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask ratio must lie in [0, 1]"));
        }
        if self.proj_dim == 0 || self.image_head_hidden == 0 || self.tab_head_hidden == 0 || self.ff_mult == 0 {
            return Err(Error::config("head widths must be positive"));
        }
        if self.vision.d_model != self.d_model {
            return Err(Error::config("image sequence width must equal d_model"));
        }
        self.vision.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Parameters plus the structure needed to run them.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub schema: TabularSchema,
    pub params: ParamStore<T>,
    ids: Ids,
}

impl<T: Scalar> Model<T> {
    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, schema: TabularSchema, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        schema.validate()?;
        let mut params = ParamStore::new();
        slots::init_slots(&mut params, &cfg, &schema, rng)?;
        Self::from_params(cfg, schema, params)
    }

    /// Rebuilds a model around an existing store, e.g. one read from disk.
    pub fn from_params(cfg: ModelConfig, schema: TabularSchema, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        schema.validate()?;
        let ids = Ids::lookup(&params, &cfg, &schema)?;
        Ok(Model {
            cfg,
            schema,
            params,
            ids,
        })
    }

    /// Adds the three fine-tuning classifiers with `classes` outputs.
    pub fn attach_classifiers<R: Rng + ?Sized>(&mut self, classes: usize, rng: &mut R) -> Result<()> {
        if classes < 2 {
            return Err(Error::config("classification needs at least 2 classes"));
        }
        if self.ids.classifiers.is_some() {
            return Err(Error::config("classifiers already attached"));
        }
        slots::init_classifiers(&mut self.params, &self.cfg, classes, rng)?;
        self.ids = Ids::lookup(&self.params, &self.cfg, &self.schema)?;
        Ok(())
    }

    pub fn classes(&self) -> Option<usize> {
        self.ids.classifiers.as_ref().map(|c| c.classes)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            schema: self.schema.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Marks only the given groups trainable.
    pub fn train_only(&mut self, groups: &[ParamGroup]) {
        self.params
            .set_trainable(|name| ParamGroup::of(name).is_some_and(|g| groups.contains(&g)));
    }

    pub fn train_all(&mut self) {
        self.params.set_trainable(|_| true);
    }
}
