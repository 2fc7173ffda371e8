//! End-to-end steps shared by the command line and the tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tabimg_core::data::{feature_importance, synth_generate, SplitDataset};
use tabimg_core::model::Model;
use tabimg_core::numeric::OptimizerState;
use tabimg_core::ssl::{pretrain_loop, PretrainReport, TraceRecord};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::finetune::{finetune, FinetuneOutcome};
use crate::io::read_dataset;

/// The dataset named by `cfg.data`, or the synthetic one for `cfg.synth`.
pub fn load_data(cfg: &RunConfig) -> Result<SplitDataset> {
    let split = match &cfg.data {
        Some(dir) => read_dataset(dir)?,
        None => synth_generate(&cfg.synth)?,
    };
    if split.train.image_size != cfg.model.vision.image_size {
        return Err(HarnessError::config(format!(
            "dataset images are {0}x{0}, config expects image_size = {1}",
            split.train.image_size, cfg.model.vision.image_size
        )));
    }
    Ok(split)
}

/// Initialises a model from `cfg.seed` and pre-trains it on the training split.
pub fn pretrain(
    cfg: &RunConfig,
    split: &SplitDataset,
    on_step: impl FnMut(&TraceRecord),
) -> Result<(Checkpoint, PretrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<f32>::init(cfg.model.clone(), split.train.schema.clone(), &mut rng)?;
    let mut opt = OptimizerState::new(&model.params, cfg.pretrain.lr, cfg.pretrain.weight_decay);
    let report = pretrain_loop(&mut model, &mut opt, &split.train, &cfg.pretrain, on_step)?;
    model.train_all();
    let ckpt = Checkpoint {
        config: cfg.clone(),
        model,
        optimizer: Some(opt),
    };
    Ok((ckpt, report))
}

/// Fine-tunes a pre-trained checkpoint under the settings of `cfg`, whose
/// model section must match the checkpoint's.
pub fn finetune_checkpoint(
    cfg: &RunConfig,
    pretrained: &Checkpoint,
    split: &SplitDataset,
) -> Result<(Checkpoint, FinetuneOutcome)> {
    if cfg.model != pretrained.config.model {
        return Err(HarnessError::config(
            "model settings differ from those stored in the checkpoint",
        ));
    }
    let outcome = finetune(&pretrained.model, &split.train, &split.val, &cfg.finetune)?;
    let ckpt = Checkpoint {
        config: cfg.clone(),
        model: outcome.model.clone(),
        optimizer: None,
    };
    Ok((ckpt, outcome))
}

/// Columns of the training table from most to least important.
pub fn importance_ranking(split: &SplitDataset, seed: u64) -> Result<Vec<usize>> {
    Ok(feature_importance(&split.train.table, &split.train.schema, seed)?.ranking)
}
