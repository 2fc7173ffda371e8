//! Pre-training objectives and the training loop: image-tabular contrast,
//! matching with sampled hard negatives, and masked tabular reconstruction.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, corrupt_tabular, random_msk, BatchMode, Dataset, TabularBatch, TabularSchema};
use crate::error::{Error, Result};
use crate::model::{Model, MtrPrediction};
use crate::numeric::{adam_step, lr_at, OptimizerState, Scalar, Tape, Tensor, Var};
use crate::vision::augment_image;

/// Tolerance on `‖z‖ = 1` for contrastive inputs.
const UNIT_NORM_TOL: f64 = 1e-3;

/// Training-loop settings. Temperature and masking ratio live on the model
/// config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub corruption_rate: f64,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 64,
            corruption_rate: 0.3,
            lr: 3e-4,
            warmup_epochs: 3,
            weight_decay: 1.5e-6,
            clip_norm: 1.0,
            augment: true,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("pre-training batch size must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(Error::config("corruption rate must lie in [0, 1]"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::config(
                "lr and weight decay must be non-negative, clip norm positive",
            ));
        }
        Ok(())
    }
}

/// Bidirectional contrastive loss over `sim = zi · ztᵀ / τ`.
///
/// Returns the loss node and the similarity matrix.
pub fn itc_loss<T: Scalar>(tape: &mut Tape<T>, zi: Var, zt: Var, tau: f64) -> Result<(Var, Tensor<T>)> {
    for z in [zi, zt] {
        let v = tape.value(z);
        let d = v.last_dim();
        for (r, row) in v.data().chunks(d.max(1)).enumerate() {
            let norm = row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!(
                    "contrastive input row {r} has norm {norm}, expected 1"
                )));
            }
        }
    }
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let b = tape.shape(zi)[0];
    let raw = tape.matmul_ext(zi, zt, true)?;
    let sim = tape.scale(raw, T::lit(1.0 / tau))?;
    let targets: Vec<usize> = (0..b).collect();
    let i2t = tape.cross_entropy(sim, &targets)?;
    let sim_t = tape.transpose(sim)?;
    let t2i = tape.cross_entropy(sim_t, &targets)?;
    let sum = tape.add(i2t, t2i)?;
    let loss = tape.scale(sum, T::lit(0.5))?;
    Ok((loss, tape.value(sim).clone()))
}

fn draw_excluding<R: Rng + ?Sized>(scores: &[f64], skip: usize, rng: &mut R) -> Result<usize> {
    let max = scores
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != skip)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(k, &s)| if k == skip { 0.0 } else { (s - max).exp() })
        .collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Contract(format!("hard-negative weights: {e}")))?;
    Ok(dist.sample(rng))
}

/// Samples one negative per row and per column of `sim`, with probability
/// proportional to `exp(sim)` and the diagonal excluded.
///
/// `p[j]` indexes the tabular partner for image `j`, `q[j]` the image partner
/// for tabular row `j`.
pub fn hard_neg_sample<T: Scalar, R: Rng + ?Sized>(sim: &Tensor<T>, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    let s = sim.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("hard_neg_sample", format!("{s:?}: need square")));
    }
    let b = s[0];
    if b < 2 {
        return Err(Error::config("hard-negative sampling needs a batch of at least 2"));
    }
    let d = sim.data();
    let mut p = Vec::with_capacity(b);
    let mut q = Vec::with_capacity(b);
    for j in 0..b {
        let row: Vec<f64> = (0..b).map(|k| d[j * b + k].as_f64()).collect();
        p.push(draw_excluding(&row, j, rng)?);
    }
    for j in 0..b {
        let col: Vec<f64> = (0..b).map(|k| d[k * b + j].as_f64()).collect();
        q.push(draw_excluding(&col, j, rng)?);
    }
    Ok((p, q))
}

/// Two-class cross-entropy where the first `positives` rows of `logits`
/// are matched pairs (class 1) and the rest unmatched (class 0).
pub fn itm_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, positives: usize) -> Result<Var> {
    let n = tape.shape(logits)[0];
    if positives > n {
        return Err(Error::shape("itm_loss", format!("{positives} positives of {n} rows")));
    }
    let targets: Vec<usize> = (0..n).map(|i| usize::from(i < positives)).collect();
    tape.cross_entropy(logits, &targets)
}

/// Cross-entropy over masked categorical cells plus squared error over
/// masked continuous cells, each averaged over its own cells and zero when
/// it has none.
pub fn mtr_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: &MtrPrediction,
    mask: &[bool],
    targets: &TabularBatch,
    schema: &TabularSchema,
) -> Result<Var> {
    let n = schema.len();
    let n_cat = schema.n_categorical();
    let n_cont = n - n_cat;
    if targets.cols != n || mask.len() != targets.rows * n {
        return Err(Error::shape("mtr_loss", "mask/targets do not match the schema"));
    }
    let mut terms = Vec::new();
    if let Some(logits) = pred.cat_logits {
        let mut rows = Vec::new();
        let mut segs = Vec::new();
        let mut codes = Vec::new();
        for b in 0..targets.rows {
            for c in 0..n_cat {
                if mask[b * n + c] {
                    let r = b * n_cat + c;
                    rows.push(r);
                    segs.push(pred.segments[r]);
                    codes.push(targets.value(b, c) as usize);
                }
            }
        }
        if !rows.is_empty() {
            let picked = tape.gather_rows(logits, &rows)?;
            terms.push(tape.segment_cross_entropy(picked, &segs, &codes)?);
        }
    }
    if let Some(cont) = pred.cont {
        let mut target = Vec::with_capacity(targets.rows * n_cont);
        let mut weight = Vec::with_capacity(targets.rows * n_cont);
        for b in 0..targets.rows {
            for j in n_cat..n {
                target.push(T::of_f32(targets.value(b, j)));
                weight.push(if mask[b * n + j] { T::one() } else { T::zero() });
            }
        }
        if weight.iter().any(|w| *w > T::zero()) {
            terms.push(tape.mse(cont, &target, Some(&weight))?);
        }
    }
    match terms.as_slice() {
        [] => tape.constant(Tensor::scalar(T::zero())),
        [one] => Ok(*one),
        [a, b] => tape.add(*a, *b),
        _ => unreachable!("at most two reconstruction terms"),
    }
}

/// Per-step views of one mini-batch.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub images: Tensor<f32>,
    /// Uncorrupted original values, the reconstruction targets.
    pub targets: TabularBatch,
    /// Corrupted copy for the contrastive and matching path.
    pub corrupted: TabularBatch,
    /// Randomly masked copy for the reconstruction path.
    pub masked: TabularBatch,
}

impl StepInputs {
    pub fn prepare<R: Rng + ?Sized>(
        images: &Tensor<f32>,
        batch: &TabularBatch,
        pool: &TabularBatch,
        mask_ratio: f64,
        cfg: &PretrainConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let masked = random_msk(batch, mask_ratio, rng);
        let corrupted = corrupt_tabular(batch, pool, cfg.corruption_rate, rng)?;
        let images = if cfg.augment {
            augment_image(images, rng)?
        } else {
            images.clone()
        };
        Ok(StepInputs {
            images,
            targets: batch.clone(),
            corrupted,
            masked,
        })
    }
}

/// How matching negatives are chosen.
pub enum Negatives<'a, R: Rng + ?Sized> {
    Sample(&'a mut R),
    Fixed(Vec<usize>, Vec<usize>),
}

/// Loss nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct StepGraph<T> {
    pub itc: Var,
    pub itm: Var,
    pub mtr: Var,
    pub total: Var,
    /// Matching logits, `[3B, 2]`, positives first.
    pub itm_logits: Var,
    pub sim: Tensor<T>,
    pub negatives: (Vec<usize>, Vec<usize>),
}

fn concat_batches(a: &TabularBatch, b: &TabularBatch) -> TabularBatch {
    let mut values = a.values.clone();
    values.extend_from_slice(&b.values);
    let mut mask = a.mask.clone();
    mask.extend_from_slice(&b.mask);
    TabularBatch {
        rows: a.rows + b.rows,
        cols: a.cols,
        values,
        mask,
        labels: None,
    }
}

/// Records the full pre-training objective on `tape`.
///
/// The tabular encoder runs once over the corrupted and masked copies, and
/// the interaction stack once over the stacked positive, masked and two
/// negative pairings.
pub fn pretrain_forward<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    inputs: &StepInputs,
    negatives: Negatives<'_, R>,
) -> Result<StepGraph<T>> {
    let b = inputs.targets.rows;
    if b < 2 {
        return Err(Error::config("pre-training batch must hold at least 2 samples"));
    }
    let img = model.encode_image(tape, &inputs.images)?;
    let both = concat_batches(&inputs.corrupted, &inputs.masked);
    let t_all = model.encode_tabular(tape, &both)?;
    let first: Vec<usize> = (0..b).collect();
    let t = tape.gather_rows(t_all, &first)?;

    let zi = model.project_image(tape, img.spatial)?;
    let zt = model.project_tabular(tape, t)?;
    let (itc, sim) = itc_loss(tape, zi, zt, model.cfg.temperature)?;

    let (p, q) = match negatives {
        Negatives::Sample(rng) => hard_neg_sample(&sim, rng)?,
        Negatives::Fixed(p, q) => (p, q),
    };
    if p.len() != b || q.len() != b || p.iter().chain(&q).any(|&i| i >= b) {
        return Err(Error::config("negative indices do not fit the batch"));
    }
    // pairs: (I, T), (I, T~), (I, T_p), (I_q, T)
    let mut tab_rows: Vec<usize> = (0..2 * b).collect();
    tab_rows.extend(&p);
    tab_rows.extend(0..b);
    let mut img_rows: Vec<usize> = (0..b).cycle().take(3 * b).collect();
    img_rows.extend(&q);
    let tabs = tape.gather_rows(t_all, &tab_rows)?;
    let seqs = tape.gather_rows(img.seq, &img_rows)?;
    let f_all = model.interaction(tape, tabs, seqs)?;

    let mut itm_rows: Vec<usize> = (0..b).collect();
    itm_rows.extend(2 * b..4 * b);
    let f_itm = tape.gather_rows(f_all, &itm_rows)?;
    let logits = model.itm_logits(tape, f_itm)?;
    let itm = itm_loss(tape, logits, b)?;

    let masked_rows: Vec<usize> = (b..2 * b).collect();
    let f_masked = tape.gather_rows(f_all, &masked_rows)?;
    let pred = model.mtr_predict(tape, f_masked)?;
    let mtr = mtr_loss(tape, &pred, &inputs.masked.mask, &inputs.targets, &model.schema)?;

    let s = tape.add(itc, itm)?;
    let s = tape.add(s, mtr)?;
    let total = tape.scale(s, T::lit(1.0 / 3.0))?;
    Ok(StepGraph {
        itc,
        itm,
        mtr,
        total,
        itm_logits: logits,
        sim,
        negatives: (p, q),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutputs<T> {
    pub l_itc: f64,
    pub l_itm: f64,
    pub l_mtr: f64,
    pub l_total: f64,
    pub sim: Tensor<T>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One forward, backward, clip and Adam update.
pub fn pretrain_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    inputs: &StepInputs,
    cfg: &PretrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<StepOutputs<T>> {
    model.params.zero_grad();
    let mut tape = Tape::new();
    let g = pretrain_forward(model, &mut tape, inputs, Negatives::Sample(rng))?;
    let read = |v: Var| tape.value(v).item().as_f64();
    let (l_itc, l_itm, l_mtr, l_total) = (read(g.itc), read(g.itm), read(g.mtr), read(g.total));
    tape.backward_into(g.total, &mut model.params)?;
    let grad_norm = model.params.clip_grad_norm(cfg.clip_norm);
    adam_step(&mut model.params, opt, lr)?;
    Ok(StepOutputs {
        l_itc,
        l_itm,
        l_mtr,
        l_total,
        sim: g.sim,
        grad_norm,
    })
}

/// One line of the loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_itc: f64,
    pub l_itm: f64,
    pub l_mtr: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    pub trace: Vec<TraceRecord>,
    /// Mean total loss per epoch.
    pub epoch_means: Vec<f64>,
}

/// Runs `cfg.epochs` passes over `train` with the warm-up/cosine schedule.
/// `on_step` sees every trace record as it is produced.
pub fn pretrain_loop<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut OptimizerState<T>,
    train: &Dataset,
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(&TraceRecord),
) -> Result<PretrainReport> {
    cfg.validate()?;
    model.train_only(&crate::model::ParamGroup::PRETRAIN);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = train.len() / cfg.batch_size;
    if cfg.epochs > 0 && per_epoch == 0 {
        return Err(Error::config(format!(
            "{} training samples cannot fill one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let total = cfg.epochs * per_epoch;
    let warmup = (cfg.warmup_epochs * per_epoch).min(total.saturating_sub(1));
    let mut report = PretrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let batches = batch_indices(train.len(), cfg.batch_size, BatchMode::Pretrain, Some(&mut rng))?;
        let mut sum = 0.0;
        for rows in &batches {
            let images = train.image_tensor(rows);
            let batch = train.table.select(rows);
            let inputs = StepInputs::prepare(&images, &batch, &train.table, model.cfg.mask_ratio, cfg, &mut rng)?;
            let lr = lr_at(step, total, warmup, cfg.lr);
            let out = pretrain_step(model, opt, &inputs, cfg, lr, &mut rng)?;
            let rec = TraceRecord {
                epoch,
                step,
                l_itc: out.l_itc,
                l_itm: out.l_itm,
                l_mtr: out.l_mtr,
                l_total: out.l_total,
                lr,
            };
            on_step(&rec);
            sum += out.l_total;
            report.trace.push(rec);
            step += 1;
        }
        report.epoch_means.push(sum / batches.len() as f64);
    }
    Ok(report)
}
