use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TabularBatch;
use crate::error::{Error, Result};

fn count_for(rate: f64, n: usize) -> usize {
    (rate.clamp(0.0, 1.0) * n as f64).round() as usize
}

/// Masks exactly `round(rho * N)` distinct cells per row, chosen uniformly.
///
/// Masked cells carry the sentinel 0 in the returned batch; the caller keeps
/// the input as the reconstruction target. Cells that were already missing
/// stay missing.
pub fn random_msk<R: Rng + ?Sized>(batch: &TabularBatch, rho: f64, rng: &mut R) -> TabularBatch {
    let mut out = batch.clone();
    let k = count_for(rho, batch.cols);
    for r in 0..batch.rows {
        for c in sample(rng, batch.cols, k) {
            out.mask[r * batch.cols + c] = true;
        }
    }
    out.zero_masked();
    out
}

/// Replaces `round(rate * N)` cells per row with values drawn from the same
/// column of a random row of `pool`.
pub fn corrupt_tabular<R: Rng + ?Sized>(
    batch: &TabularBatch,
    pool: &TabularBatch,
    rate: f64,
    rng: &mut R,
) -> Result<TabularBatch> {
    let k = count_for(rate, batch.cols);
    if k == 0 {
        return Ok(batch.clone());
    }
    if pool.rows < 2 || pool.cols != batch.cols {
        return Err(Error::config(format!(
            "corruption pool needs at least 2 rows with {} columns",
            batch.cols
        )));
    }
    let mut out = batch.clone();
    for r in 0..batch.rows {
        for c in sample(rng, batch.cols, k) {
            let donor = rng.random_range(0..pool.rows);
            out.values[r * batch.cols + c] = pool.value(donor, c);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScenarioKind {
    /// Random cells.
    Rvm,
    /// Random whole columns.
    Rfm,
    /// Most important columns first.
    Mifm,
    /// Least important columns first.
    Lifm,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Rvm,
        ScenarioKind::Rfm,
        ScenarioKind::Mifm,
        ScenarioKind::Lifm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Rvm => "RVM",
            ScenarioKind::Rfm => "RFM",
            ScenarioKind::Mifm => "MIFM",
            ScenarioKind::Lifm => "LIFM",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::config(format!("unknown missingness scenario {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissingScenario {
    pub kind: ScenarioKind,
    pub sigma: f64,
    /// Columns ordered from most to least important.
    pub importance: Option<Vec<usize>>,
}

impl MissingScenario {
    pub fn new(kind: ScenarioKind, sigma: f64) -> Self {
        MissingScenario {
            kind,
            sigma,
            importance: None,
        }
    }

    pub fn with_importance(mut self, ranking: Vec<usize>) -> Self {
        self.importance = Some(ranking);
        self
    }

    fn ranking(&self, n: usize) -> Result<&[usize]> {
        let r = self
            .importance
            .as_deref()
            .ok_or_else(|| Error::config(format!("{} requires a feature-importance ranking", self.kind.name())))?;
        let mut seen = vec![false; n];
        for &c in r {
            if c >= n || std::mem::replace(&mut seen[c], true) {
                return Err(Error::config("importance ranking is not a permutation of the columns"));
            }
        }
        if r.len() != n {
            return Err(Error::config(format!(
                "importance ranking covers {} of {n} columns",
                r.len()
            )));
        }
        Ok(r)
    }
}

/// Marks cells missing according to `scenario`; unmasked values are untouched
/// and newly masked cells get the sentinel 0.
pub fn apply_missing_scenario<R: Rng + ?Sized>(
    batch: &TabularBatch,
    scenario: &MissingScenario,
    rng: &mut R,
) -> Result<TabularBatch> {
    if !(0.0..=1.0).contains(&scenario.sigma) {
        return Err(Error::config(format!("missing rate {} outside [0, 1]", scenario.sigma)));
    }
    let n = batch.cols;
    let mut out = batch.clone();
    let columns: Vec<usize> = match scenario.kind {
        ScenarioKind::Rvm => {
            let cells = batch.rows * n;
            for i in sample(rng, cells, count_for(scenario.sigma, cells)) {
                out.mask[i] = true;
            }
            out.zero_masked();
            return Ok(out);
        }
        ScenarioKind::Rfm => {
            let mut cols: Vec<usize> = (0..n).collect();
            cols.shuffle(rng);
            cols.truncate(count_for(scenario.sigma, n));
            cols
        }
        ScenarioKind::Mifm => scenario.ranking(n)?[..count_for(scenario.sigma, n)].to_vec(),
        ScenarioKind::Lifm => {
            let r = scenario.ranking(n)?;
            r[n - count_for(scenario.sigma, n)..].to_vec()
        }
    };
    for r in 0..batch.rows {
        for &c in &columns {
            out.mask[r * n + c] = true;
        }
    }
    out.zero_masked();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Drops the final short batch; requires at least 2 rows per batch.
    Pretrain,
    /// Keeps every sample.
    Eval,
}

/// Index batches for one epoch.
pub fn batch_indices<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    mode: BatchMode,
    shuffle: Option<&mut R>,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || (mode == BatchMode::Pretrain && batch_size < 2) {
        return Err(Error::config(format!("batch size {batch_size} too small for {mode:?}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(rng) = shuffle {
        order.shuffle(rng);
    }
    Ok(order
        .chunks(batch_size)
        .filter(|c| mode == BatchMode::Eval || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}
