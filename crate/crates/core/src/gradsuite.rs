//! The full finite-difference suite: every elementary engine op plus each
//! differentiable stage of the network, on small random instances.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Column, TabularBatch, TabularSchema};
use crate::error::Result;
use crate::model::{build_attention_mask, Model, ModelConfig};
use crate::numeric::gradcheck::{check_probe, OpCase, OpKind, Probe, SlotError, FD_STEP, FD_TOLERANCE};
use crate::numeric::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::ssl::{itc_loss, itm_loss, mtr_loss, pretrain_forward, Negatives, StepInputs};
use crate::vision::VisionConfig;

/// Network stages checked end to end through the model API.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Embedding,
    TabularEncoder,
    ImageEncoder,
    CrossAttention,
    Interaction,
    Contrastive,
    Matching,
    Reconstruction,
    Classifiers,
    FullObjective,
}

impl StageKind {
    pub const ALL: [StageKind; 10] = [
        StageKind::Embedding,
        StageKind::TabularEncoder,
        StageKind::ImageEncoder,
        StageKind::CrossAttention,
        StageKind::Interaction,
        StageKind::Contrastive,
        StageKind::Matching,
        StageKind::Reconstruction,
        StageKind::Classifiers,
        StageKind::FullObjective,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Embedding => "embed_tabular",
            StageKind::TabularEncoder => "tabular_encode",
            StageKind::ImageEncoder => "encode_image+project",
            StageKind::CrossAttention => "cross_attention",
            StageKind::Interaction => "interaction",
            StageKind::Contrastive => "projections+itc",
            StageKind::Matching => "itm_head+loss",
            StageKind::Reconstruction => "mtr_head+loss",
            StageKind::Classifiers => "ensemble_classifiers",
            StageKind::FullObjective => "pretrain_objective",
        }
    }

    /// Slot prefixes whose gradients are checked.
    fn trainable(self) -> &'static [&'static str] {
        match self {
            StageKind::Embedding => &["tab.embed."],
            StageKind::TabularEncoder => &["tab.layer.", "tab.norm."],
            StageKind::ImageEncoder => &["img."],
            StageKind::CrossAttention => &["interact.0.cross."],
            StageKind::Interaction => &["interact."],
            StageKind::Contrastive => &["head.gi.", "head.gt."],
            StageKind::Matching => &["head.itm.", "interact.norm."],
            StageKind::Reconstruction => &["head.mtr."],
            StageKind::Classifiers => &["clf."],
            StageKind::FullObjective => &[""],
        }
    }
}

/// A tiny network instance with fixed random inputs.
#[derive(Debug, Clone)]
pub struct StageCase {
    pub kind: StageKind,
    cfg: ModelConfig,
    schema: TabularSchema,
    inputs: StepInputs,
    labels: Vec<usize>,
    /// Fixed random readout applied to tensor-valued outputs.
    readout: Vec<f64>,
    tokens: Tensor<f64>,
    spatial: Tensor<f64>,
    sequence: Tensor<f64>,
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        tab_layers: 1,
        interact_layers: 1,
        proj_dim: 4,
        image_head_hidden: 6,
        tab_head_hidden: 6,
        ff_mult: 2,
        temperature: 0.5,
        mask_ratio: 0.5,
        vision: VisionConfig {
            image_size: 4,
            widths: vec![3, 4],
            strides: vec![1, 2],
            d_model: 8,
        },
    }
}

fn tiny_schema() -> TabularSchema {
    let cats = |n: usize| (0..n).map(|i| format!("c{i}")).collect();
    TabularSchema::new(vec![
        Column::categorical("a", cats(3)),
        Column::categorical("b", cats(2)),
        Column::continuous("x", 0.0, 1.0),
        Column::continuous("y", 0.0, 1.0),
    ])
    .expect("valid schema")
}

fn random_batch(rng: &mut ChaCha8Rng, schema: &TabularSchema, rows: usize, missing: f64) -> TabularBatch {
    let n = schema.len();
    let mut values = Vec::with_capacity(rows * n);
    let mut mask = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        for (c, col) in schema.columns.iter().enumerate() {
            let v = if schema.is_categorical(c) {
                rng.random_range(0..col.cardinality) as f32
            } else {
                rng.random_range(-1.5f32..1.5)
            };
            values.push(v);
            mask.push(rng.random_bool(missing));
        }
    }
    let mut batch = TabularBatch::new(rows, n, values, None).expect("consistent batch");
    batch.mask = mask;
    batch.zero_masked();
    batch
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

impl StageCase {
    /// Builds the case and its parameter store. Initial values are jittered
    /// well beyond the usual small init so every nonlinearity is exercised.
    pub fn random(kind: StageKind, seed: u64) -> Result<(StageCase, ParamStore<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(104_729) ^ (kind as u64 + 1) << 32);
        let cfg = tiny_config();
        let schema = tiny_schema();
        let mut model = Model::<f64>::init(cfg.clone(), schema.clone(), &mut rng)?;
        model.attach_classifiers(3, &mut rng)?;
        for p in model.params.iter_mut() {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.4..0.4));
        }
        let rows = 3;
        let size = cfg.vision.image_size;
        let images = Tensor::from_fn(&[rows, size, size, 3], |_| rng.random_range(0.0f32..1.0));
        let targets = random_batch(&mut rng, &schema, rows, 0.0);
        let mut masked = targets.clone();
        masked.mask = (0..masked.values.len())
            .map(|i| i % 3 == 0 || rng.random_bool(0.3))
            .collect();
        masked.zero_masked();
        let mut corrupted = random_batch(&mut rng, &schema, rows, 0.25);
        corrupted.mask.iter_mut().step_by(5).for_each(|m| *m = false);
        corrupted.zero_masked();
        let labels = (0..rows).map(|_| rng.random_range(0..3)).collect();

        let d = cfg.d_model;
        let tokens = uniform(&mut rng, &[rows, schema.len() + 1, d], 1.0);
        let g = cfg.vision.grid();
        let spatial = uniform(&mut rng, &[rows, g, g, cfg.vision.channels()], 1.0);
        let sequence = uniform(&mut rng, &[rows, g * g, d], 1.0);
        let readout = (0..rows * (schema.len() + 1).max(g * g) * d)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();

        let prefixes = kind.trainable();
        model
            .params
            .set_trainable(|name| prefixes.iter().any(|p| name.starts_with(p)));
        let case = StageCase {
            kind,
            cfg,
            schema,
            inputs: StepInputs {
                images,
                targets,
                corrupted,
                masked,
            },
            labels,
            readout,
            tokens,
            spatial,
            sequence,
        };
        Ok((case, model.params))
    }

    fn read_out<T: Scalar>(&self, tape: &mut Tape<T>, out: Var) -> Result<Var> {
        let shape = tape.shape(out).to_vec();
        let r = Tensor::from_fn(&shape, |i| T::lit(self.readout[i % self.readout.len()]));
        let r = tape.constant(r)?;
        let prod = tape.mul(out, r)?;
        tape.sum(prod)
    }
}

impl Probe for StageCase {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let model = Model::from_params(self.cfg.clone(), self.schema.clone(), store.clone())?;
        let inputs = &self.inputs;
        match self.kind {
            StageKind::Embedding => {
                let e = model.embed_tabular(tape, &inputs.corrupted)?;
                self.read_out(tape, e)
            }
            StageKind::TabularEncoder => {
                let tokens = tape.constant(self.tokens.cast())?;
                let mask = build_attention_mask(&inputs.corrupted);
                let t = model.tabular_encode(tape, tokens, &mask)?;
                self.read_out(tape, t)
            }
            StageKind::ImageEncoder => {
                let img = model.encode_image(tape, &inputs.images)?;
                self.read_out(tape, img.seq)
            }
            StageKind::CrossAttention | StageKind::Interaction => {
                let tokens = tape.constant(self.tokens.cast())?;
                let seq = tape.constant(self.sequence.cast())?;
                let out = if self.kind == StageKind::CrossAttention {
                    model.cross_attention(tape, 0, tokens, seq)?
                } else {
                    model.interaction(tape, tokens, seq)?
                };
                self.read_out(tape, out)
            }
            StageKind::Contrastive => {
                let spatial = tape.constant(self.spatial.cast())?;
                let tokens = tape.constant(self.tokens.cast())?;
                let zi = model.project_image(tape, spatial)?;
                let zt = model.project_tabular(tape, tokens)?;
                Ok(itc_loss(tape, zi, zt, self.cfg.temperature)?.0)
            }
            StageKind::Matching => {
                let tokens = tape.constant(self.tokens.cast())?;
                let seq = tape.constant(self.sequence.cast())?;
                let f = model.interaction(tape, tokens, seq)?;
                let logits = model.itm_logits(tape, f)?;
                itm_loss(tape, logits, 1)
            }
            StageKind::Reconstruction => {
                let tokens = tape.constant(self.tokens.cast())?;
                let pred = model.mtr_predict(tape, tokens)?;
                mtr_loss(tape, &pred, &inputs.masked.mask, &inputs.targets, &self.schema)
            }
            StageKind::Classifiers => {
                let feats = model.features(tape, &inputs.images, &inputs.corrupted)?;
                let p = model.classifier_probs(tape, &feats)?;
                tape.nll(p, &self.labels)
            }
            StageKind::FullObjective => {
                let rows = inputs.targets.rows;
                let p = (0..rows).map(|j| (j + 1) % rows).collect();
                let q = (0..rows).map(|j| (j + rows - 1) % rows).collect();
                let g = pretrain_forward(&model, tape, inputs, Negatives::<ChaCha8Rng>::Fixed(p, q))?;
                Ok(g.total)
            }
        }
    }
}

/// Result of one case at one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    /// Worst slot under `f32` analytic gradients.
    pub worst: SlotError,
    pub passed: bool,
}

/// Summary of a full suite run.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases
            .iter()
            .max_by(|a, b| a.worst.rel_err.total_cmp(&b.worst.rel_err))
    }
}

fn worst_of(errors: Vec<SlotError>) -> SlotError {
    errors
        .into_iter()
        .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
        .unwrap_or(SlotError {
            slot: String::new(),
            rel_err: 0.0,
            checked: 0,
        })
}

/// Difference step for whole network stages. Stacked layers have enough
/// curvature that the `O(h^2)` truncation error of a central difference at
/// [`FD_STEP`] alone can reach the tolerance; the differences run in `f64`,
/// so the smaller step costs no precision.
pub const STAGE_FD_STEP: f64 = 1e-4;

fn judge<P: Probe>(
    name: &'static str,
    seed: u64,
    probe: &P,
    store: &ParamStore<f64>,
    step: f64,
    elems: usize,
) -> Result<CaseResult> {
    let worst = worst_of(check_probe::<f32, _>(probe, store, step, elems)?);
    let passed = worst.rel_err.is_finite() && worst.rel_err < FD_TOLERANCE;
    Ok(CaseResult {
        name,
        seed,
        worst,
        passed,
    })
}

/// Runs every op and network stage for seeds `0..seeds`, checking `f32`
/// analytic gradients against `f64` central differences.
pub fn run_gradient_suite(seeds: u64, mut on_case: impl FnMut(&CaseResult)) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut cases = Vec::new();
    for seed in 0..seeds {
        for kind in OpKind::ALL {
            let (case, store) = OpCase::random(kind, seed);
            let r = judge(kind.name(), seed, &case, &store, FD_STEP, 48)?;
            on_case(&r);
            cases.push(r);
        }
        for kind in StageKind::ALL {
            let (case, store) = StageCase::random(kind, seed)?;
            let elems = if kind == StageKind::FullObjective { 3 } else { 6 };
            let r = judge(kind.name(), seed, &case, &store, STAGE_FD_STEP, elems)?;
            on_case(&r);
            cases.push(r);
        }
    }
    Ok(SuiteReport {
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_pass_in_double_precision() {
        for kind in StageKind::ALL {
            let (case, store) = StageCase::random(kind, 0).unwrap();
            let errs = check_probe::<f64, _>(&case, &store, 1e-4, 4).unwrap();
            assert!(!errs.is_empty(), "{} checked no slots", kind.name());
            for e in errs {
                assert!(e.rel_err < 1e-5, "{} {}: {}", kind.name(), e.slot, e.rel_err);
            }
        }
    }
}
