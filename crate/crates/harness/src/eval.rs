//! Classification and imputation metrics, the mean-imputation baseline and
//! missingness sweeps.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tabimg_core::data::{
    apply_missing_scenario, batch_indices, random_msk, BatchMode, Dataset, MissingScenario, ScenarioKind, TabularBatch,
};
use tabimg_core::model::Model;
use tabimg_core::numeric::Tape;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Auc,
    Rmse,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
            Metric::Rmse => "rmse",
        }
    }
}

/// One evaluated cell. `value` is `None` when nothing was left to score,
/// e.g. an imputation rate that masks no continuous cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metric: Metric,
    pub value: Option<f64>,
    pub scenario: Option<ScenarioKind>,
    pub sigma: f64,
    pub seed: u64,
    /// Digest of the configuration of the checkpoint that produced it.
    pub config_digest: String,
    /// Samples (classification) or masked cells (imputation) scored.
    pub cells: usize,
}

pub const TASK_CLASSIFY: &str = "classification";
pub const TASK_IMPUTE: &str = "imputation";
pub const TASK_MEAN_BASELINE: &str = "imputation_mean_baseline";

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Fraction of rows whose highest probability (first on ties) is the label.
pub fn accuracy(probs: &[f32], classes: usize, labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() * classes || labels.is_empty() {
        return Err(HarnessError::config(format!(
            "{} probabilities for {} labels of {classes} classes",
            probs.len(),
            labels.len()
        )));
    }
    let hits = probs
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Column `class` of a row-major probability matrix.
pub fn class_scores(probs: &[f32], classes: usize, class: usize) -> Vec<f32> {
    probs.chunks(classes).map(|r| r[class]).collect()
}

fn check_binary(scores: &[f32], labels: &[usize]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(HarnessError::config("AUC needs one score per label"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(HarnessError::config("AUC is defined for binary labels only"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(HarnessError::config("AUC scores must be finite"));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    Ok((pos, labels.len() as u64 - pos))
}

/// Rank-based ROC AUC with midranks for ties; `None` when one class is
/// absent. Label 1 is the positive class.
///
/// Ranks are kept doubled so the statistic is an exact integer ratio.
pub fn auc(scores: &[f32], labels: &[usize]) -> Result<Option<f64>> {
    let (pos, neg) = check_binary(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean; doubled that is i + j + 2
        let doubled_mid = (i + j + 2) as u64;
        let positives = order[i..=j].iter().filter(|&&r| labels[r] == 1).count() as u64;
        doubled_rank_sum += positives * doubled_mid;
        i = j + 1;
    }
    let doubled_u = doubled_rank_sum - pos * (pos + 1);
    Ok(Some(doubled_u as f64 / (2 * pos * neg) as f64))
}

fn scenario_rng(seed: u64, sigma: f64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sigma.to_bits());
    rng
}

fn ensemble_probs(model: &Model<f32>, data: &Dataset, table: &TabularBatch, batch_size: usize) -> Result<Vec<f32>> {
    let mut probs = Vec::new();
    for rows in batch_indices::<ChaCha8Rng>(data.len(), batch_size, BatchMode::Eval, None)? {
        let p = model.ensemble_classify(&data.image_tensor(&rows), &table.select(&rows))?;
        probs.extend_from_slice(p.data());
    }
    Ok(probs)
}

/// Scores the fine-tuned ensemble on `data`, after hiding cells according to
/// `scenario` when given. A zero-rate scenario leaves the table untouched.
pub fn evaluate_classification(
    model: &Model<f32>,
    data: &Dataset,
    scenario: Option<&MissingScenario>,
    metric: Metric,
    seed: u64,
    batch_size: usize,
    config_digest: &str,
) -> Result<EvalReport> {
    let classes = model
        .classes()
        .ok_or_else(|| HarnessError::config("classification needs a fine-tuned checkpoint"))?;
    let labels = data
        .table
        .labels
        .as_deref()
        .ok_or_else(|| HarnessError::config("classification needs labelled data"))?;
    if data.is_empty() {
        return Err(HarnessError::config("classification needs a non-empty split"));
    }
    if metric == Metric::Auc && classes > 2 {
        return Err(HarnessError::config(format!("AUC requested for {classes} classes")));
    }
    if metric == Metric::Rmse {
        return Err(HarnessError::config("RMSE is an imputation metric"));
    }
    let sigma = scenario.map_or(0.0, |s| s.sigma);
    let table = match scenario {
        Some(s) if s.sigma > 0.0 => apply_missing_scenario(&data.table, s, &mut scenario_rng(seed, s.sigma))?,
        _ => data.table.clone(),
    };
    let probs = ensemble_probs(model, data, &table, batch_size)?;
    let value = match metric {
        Metric::Auc => auc(&class_scores(&probs, classes, 1), labels)?,
        _ => Some(accuracy(&probs, classes, labels)?),
    };
    Ok(EvalReport {
        task: TASK_CLASSIFY.into(),
        metric,
        value,
        scenario: scenario.map(|s| s.kind),
        sigma,
        seed,
        config_digest: config_digest.into(),
        cells: data.len(),
    })
}

/// The frozen imputation mask for `(table, sigma, seed)`: `round(sigma * N)`
/// random cells per row, plus every categorical cell when asked.
pub fn imputation_mask(
    table: &TabularBatch,
    n_categorical: usize,
    sigma: f64,
    mask_categorical: bool,
    seed: u64,
) -> TabularBatch {
    let mut masked = random_msk(table, sigma, &mut scenario_rng(seed, sigma));
    if mask_categorical {
        for r in 0..masked.rows {
            masked.mask[r * masked.cols..r * masked.cols + n_categorical].fill(true);
        }
        masked.zero_masked();
    }
    masked
}

/// Continuous cells hidden by `masked` that hold an observed value in
/// `original`, as `(row, continuous index)` pairs.
fn scored_cells(original: &TabularBatch, masked: &TabularBatch, n_categorical: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for r in 0..original.rows {
        for c in n_categorical..original.cols {
            if masked.is_missing(r, c) && !original.is_missing(r, c) {
                cells.push((r, c - n_categorical));
            }
        }
    }
    cells
}

fn rmse(sq_sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| (sq_sum / n as f64).sqrt())
}

struct ImputeSetup {
    masked: TabularBatch,
    cells: Vec<(usize, usize)>,
}

fn impute_setup(data: &Dataset, sigma: f64, mask_categorical: bool, seed: u64) -> Result<ImputeSetup> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(HarnessError::config(format!("missing rate {sigma} outside [0, 1]")));
    }
    let n_cat = data.schema.n_categorical();
    let masked = imputation_mask(&data.table, n_cat, sigma, mask_categorical, seed);
    let cells = scored_cells(&data.table, &masked, n_cat);
    Ok(ImputeSetup { masked, cells })
}

fn imputation_report(task: &str, value: Option<f64>, sigma: f64, seed: u64, digest: &str, cells: usize) -> EvalReport {
    EvalReport {
        task: task.into(),
        metric: Metric::Rmse,
        value,
        scenario: None,
        sigma,
        seed,
        config_digest: digest.into(),
        cells,
    }
}

/// Reconstruction RMSE of the masked continuous cells, one report per rate.
pub fn evaluate_imputation(
    model: &Model<f32>,
    data: &Dataset,
    sigmas: &[f64],
    mask_categorical: bool,
    seed: u64,
    batch_size: usize,
    config_digest: &str,
) -> Result<Vec<EvalReport>> {
    let n_cat = data.schema.n_categorical();
    let n_cont = data.schema.n_continuous();
    let mut reports = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let setup = impute_setup(data, sigma, mask_categorical, seed)?;
        let value = if setup.cells.is_empty() {
            None
        } else {
            let mut pred = vec![0f32; data.len() * n_cont];
            for rows in batch_indices::<ChaCha8Rng>(data.len(), batch_size, BatchMode::Eval, None)? {
                let mut tape = Tape::new();
                let img = model.encode_image(&mut tape, &data.image_tensor(&rows))?;
                let t = model.encode_tabular(&mut tape, &setup.masked.select(&rows))?;
                let f = model.interaction(&mut tape, t, img.seq)?;
                let out = model.mtr_predict(&mut tape, f)?;
                let cont = out.cont.expect("schema has continuous columns");
                let start = rows[0] * n_cont;
                pred[start..start + rows.len() * n_cont].copy_from_slice(tape.value(cont).data());
            }
            let sq: f64 = setup
                .cells
                .iter()
                .map(|&(r, j)| {
                    let d = f64::from(pred[r * n_cont + j]) - f64::from(data.table.value(r, n_cat + j));
                    d * d
                })
                .sum();
            rmse(sq, setup.cells.len())
        };
        reports.push(imputation_report(
            TASK_IMPUTE,
            value,
            sigma,
            seed,
            config_digest,
            setup.cells.len(),
        ));
    }
    Ok(reports)
}

/// RMSE of predicting the training mean, 0 after z-scoring, for the same
/// masked cells [`evaluate_imputation`] scores.
pub fn mean_impute_baseline(
    data: &Dataset,
    sigma: f64,
    mask_categorical: bool,
    seed: u64,
    config_digest: &str,
) -> Result<EvalReport> {
    let setup = impute_setup(data, sigma, mask_categorical, seed)?;
    let n_cat = data.schema.n_categorical();
    let sq: f64 = setup
        .cells
        .iter()
        .map(|&(r, j)| f64::from(data.table.value(r, n_cat + j)).powi(2))
        .sum();
    Ok(imputation_report(
        TASK_MEAN_BASELINE,
        rmse(sq, setup.cells.len()),
        sigma,
        seed,
        config_digest,
        setup.cells.len(),
    ))
}

/// Settings shared by every cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPlan<'a> {
    pub kinds: &'a [ScenarioKind],
    pub sigmas: &'a [f64],
    pub seeds: &'a [u64],
    /// Columns from most to least important, needed for MIFM and LIFM.
    pub ranking: &'a [usize],
    pub metric: Metric,
    pub batch_size: usize,
}

/// Evaluates every `(kind, sigma, seed)` combination, in that nesting order.
pub fn run_missingness_sweep(
    model: &Model<f32>,
    data: &Dataset,
    plan: &SweepPlan<'_>,
    config_digest: &str,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::with_capacity(plan.kinds.len() * plan.sigmas.len() * plan.seeds.len());
    for &kind in plan.kinds {
        for &sigma in plan.sigmas {
            let scenario = MissingScenario::new(kind, sigma).with_importance(plan.ranking.to_vec());
            for &seed in plan.seeds {
                reports.push(evaluate_classification(
                    model,
                    data,
                    Some(&scenario),
                    plan.metric,
                    seed,
                    plan.batch_size,
                    config_digest,
                )?);
            }
        }
    }
    Ok(reports)
}

/// Aligned plain-text rendering of a report list.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["task", "metric", "scenario", "sigma", "seed", "cells", "value"];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.task.clone(),
                r.metric.name().to_owned(),
                r.scenario.map_or("-", |k| k.name()).to_owned(),
                format!("{:.3}", r.sigma),
                r.seed.to_string(),
                r.cells.to_string(),
                r.value.map_or("(empty)".to_owned(), |v| format!("{v:.4}")),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header);
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut out, &cells);
    }
    out
}
