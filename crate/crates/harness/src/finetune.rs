//! Supervised fine-tuning of the three ensemble classifiers, either on a
//! frozen backbone (linear probe) or end to end.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tabimg_core::data::{batch_indices, BatchMode, Dataset};
use tabimg_core::model::{Features, Model, ParamGroup};
use tabimg_core::numeric::{adam_step, OptimizerState, ParamStore, Tape, Tensor};

use crate::error::{HarnessError, Result};
use crate::eval::{accuracy, auc, class_scores, Metric};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    /// Only the attached classifiers learn.
    LinearProbe,
    /// Every parameter reachable from the classifiers learns.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    /// Upper bound; early stopping usually ends sooner.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    /// Smallest validation gain that counts as improvement.
    pub min_delta: f64,
    /// Classifier initialisation and batch order.
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: FinetuneMode::LinearProbe,
            epochs: 100,
            batch_size: 64,
            lr: 3e-3,
            weight_decay: 0.0,
            patience: 10,
            min_delta: 2e-4,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(HarnessError::config("finetune_batch_size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(HarnessError::config(
                "finetune_lr and finetune_weight_decay must be non-negative",
            ));
        }
        if !(self.min_delta >= 0.0) {
            return Err(HarnessError::config("min_delta must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// The model at its best validation epoch.
    pub model: Model<f32>,
    pub metric: Metric,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

/// Validation metric used for early stopping: AUC for two classes,
/// accuracy otherwise.
pub fn selection_metric(classes: usize) -> Metric {
    if classes == 2 {
        Metric::Auc
    } else {
        Metric::Accuracy
    }
}

fn frozen_features(model: &Model<f32>, data: &Dataset, batch_size: usize) -> Result<[Tensor<f32>; 3]> {
    let mut parts: [Vec<f32>; 3] = Default::default();
    let mut widths = [0; 3];
    for rows in batch_indices::<ChaCha8Rng>(data.len(), batch_size, BatchMode::Eval, None)? {
        let mut tape = Tape::new();
        let f = model.features(&mut tape, &data.image_tensor(&rows), &data.table.select(&rows))?;
        for (k, v) in [f.image, f.tab, f.multi].into_iter().enumerate() {
            widths[k] = tape.shape(v)[1];
            parts[k].extend_from_slice(tape.value(v).data());
        }
    }
    let n = data.len();
    let [a, b, c] = parts;
    Ok([
        Tensor::new(&[n, widths[0]], a)?,
        Tensor::new(&[n, widths[1]], b)?,
        Tensor::new(&[n, widths[2]], c)?,
    ])
}

fn select_rows(t: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let w = t.last_dim();
    let mut out = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
    }
    Ok(Tensor::new(&[rows.len(), w], out)?)
}

/// Where the classifier inputs come from: cached for a frozen backbone,
/// recomputed on every step otherwise.
#[allow(clippy::large_enum_variant)]
enum FeatureSource<'a> {
    Cached {
        train: [Tensor<f32>; 3],
        val: [Tensor<f32>; 3],
    },
    Live {
        train: &'a Dataset,
        val: &'a Dataset,
    },
}

impl FeatureSource<'_> {
    fn features(&self, model: &Model<f32>, tape: &mut Tape<f32>, rows: &[usize], train: bool) -> Result<Features> {
        match self {
            FeatureSource::Cached { train: t, val: v } => {
                let set = if train { t } else { v };
                Ok(Features {
                    image: tape.constant(select_rows(&set[0], rows)?)?,
                    tab: tape.constant(select_rows(&set[1], rows)?)?,
                    multi: tape.constant(select_rows(&set[2], rows)?)?,
                })
            }
            FeatureSource::Live { train: t, val: v } => {
                let data = if train { t } else { v };
                Ok(model.features(tape, &data.image_tensor(rows), &data.table.select(rows))?)
            }
        }
    }
}

fn validation_metric(
    model: &Model<f32>,
    source: &FeatureSource<'_>,
    labels: &[usize],
    batch_size: usize,
    metric: Metric,
) -> Result<f64> {
    let classes = model.classes().expect("classifiers attached");
    let mut probs = Vec::with_capacity(labels.len() * classes);
    for rows in batch_indices::<ChaCha8Rng>(labels.len(), batch_size, BatchMode::Eval, None)? {
        let mut tape = Tape::new();
        let f = source.features(model, &mut tape, &rows, false)?;
        let p = model.classifier_probs(&mut tape, &f)?;
        probs.extend_from_slice(tape.value(p).data());
    }
    let value = match metric {
        Metric::Auc => auc(&class_scores(&probs, classes, 1), labels)?,
        _ => Some(accuracy(&probs, classes, labels)?),
    };
    // a validation split holding one class gives no AUC; fall back to accuracy
    Ok(match value {
        Some(v) => v,
        None => accuracy(&probs, classes, labels)?,
    })
}

/// Attaches fresh classifiers to `pretrained` and trains them on `train`
/// with early stopping on `val`.
pub fn finetune(
    pretrained: &Model<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let (Some(train_labels), Some(val_labels)) = (train.table.labels.as_deref(), val.table.labels.as_deref()) else {
        return Err(HarnessError::config(
            "fine-tuning needs labelled train and validation splits",
        ));
    };
    if train.classes < 2 {
        return Err(HarnessError::config("fine-tuning needs at least 2 classes"));
    }
    if train.is_empty() || val.is_empty() {
        return Err(HarnessError::config(
            "fine-tuning needs non-empty train and validation splits",
        ));
    }
    if pretrained.classes().is_some() {
        return Err(HarnessError::config("model already carries classifiers"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = pretrained.clone();
    model.attach_classifiers(train.classes, &mut rng)?;
    let source = match cfg.mode {
        FinetuneMode::LinearProbe => {
            model.train_only(&[ParamGroup::Classifiers]);
            FeatureSource::Cached {
                train: frozen_features(&model, train, cfg.batch_size)?,
                val: frozen_features(&model, val, cfg.batch_size)?,
            }
        }
        FinetuneMode::Full => {
            model.train_all();
            FeatureSource::Live { train, val }
        }
    };
    let metric = selection_metric(train.classes);
    let mut opt = OptimizerState::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut best_params: ParamStore<f32> = model.params.clone();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            model.params.zero_grad();
            let mut tape = Tape::new();
            let f = source.features(&model, &mut tape, chunk, true)?;
            let p = model.classifier_probs(&mut tape, &f)?;
            let targets: Vec<usize> = chunk.iter().map(|&r| train_labels[r]).collect();
            let loss = tape.nll(p, &targets)?;
            loss_sum += f64::from(tape.value(loss).item());
            batches += 1;
            tape.backward_into(loss, &mut model.params)?;
            adam_step(&mut model.params, &mut opt, cfg.lr)?;
        }
        let val_metric = validation_metric(&model, &source, val_labels, cfg.batch_size, metric)?;
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            val_metric,
        });
        if val_metric > best_metric + cfg.min_delta || epoch == 0 {
            best_metric = val_metric;
            best_epoch = epoch;
            best_params = model.params.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    model.params = best_params;
    model.params.zero_grad();
    model.train_all();
    Ok(FinetuneOutcome {
        model,
        metric,
        history,
        best_epoch,
        best_metric,
    })
}
