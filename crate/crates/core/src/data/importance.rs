use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{TabularBatch, TabularSchema};
use crate::error::{Error, Result};

const PROBE_STEPS: usize = 300;
const PROBE_LR: f64 = 0.5;
pub const PERMUTATION_REPEATS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImportance {
    /// Accuracy drop per column when it is permuted.
    pub scores: Vec<f64>,
    /// Columns by descending score, ties broken by lower index.
    pub ranking: Vec<usize>,
}

/// Multinomial logistic regression over one-hot categoricals and raw
/// continuous values, fitted by full-batch gradient descent.
struct Probe {
    offsets: Vec<usize>,
    width: usize,
    classes: usize,
    weights: Vec<f64>,
}

impl Probe {
    fn new(schema: &TabularSchema, classes: usize) -> Self {
        let mut offsets = Vec::with_capacity(schema.len());
        let mut width = 0;
        for c in &schema.columns {
            offsets.push(width);
            width += c.cardinality.max(1);
        }
        width += 1; // bias
        Probe {
            offsets,
            width,
            classes,
            weights: vec![0.0; width * classes],
        }
    }

    fn features(&self, schema: &TabularSchema, batch: &TabularBatch, row: usize, out: &mut [f64]) {
        out.fill(0.0);
        for (c, col) in schema.columns.iter().enumerate() {
            let v = batch.value(row, c) as f64;
            if col.cardinality > 0 {
                let code = (v.max(0.0) as usize).min(col.cardinality - 1);
                out[self.offsets[c] + code] = 1.0;
            } else {
                out[self.offsets[c]] = v;
            }
        }
        out[self.width - 1] = 1.0;
    }

    fn logits(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.weights[k * self.width..(k + 1) * self.width]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum();
        }
    }

    fn fit(&mut self, schema: &TabularSchema, batch: &TabularBatch, labels: &[usize]) {
        let n = batch.rows as f64;
        let mut x = vec![0.0; self.width];
        let mut z = vec![0.0; self.classes];
        let mut grad = vec![0.0; self.weights.len()];
        for _ in 0..PROBE_STEPS {
            grad.fill(0.0);
            for (r, &y) in labels.iter().enumerate() {
                self.features(schema, batch, r, &mut x);
                self.logits(&x, &mut z);
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
                for k in 0..self.classes {
                    let p = (z[k] - max).exp() / total - f64::from(k == y);
                    for (g, v) in grad[k * self.width..(k + 1) * self.width].iter_mut().zip(&x) {
                        *g += p * v / n;
                    }
                }
            }
            for (w, g) in self.weights.iter_mut().zip(&grad) {
                *w -= PROBE_LR * g;
            }
        }
    }

    fn accuracy(&self, schema: &TabularSchema, batch: &TabularBatch, labels: &[usize]) -> f64 {
        let mut x = vec![0.0; self.width];
        let mut z = vec![0.0; self.classes];
        let mut hits = 0usize;
        for (r, &y) in labels.iter().enumerate() {
            self.features(schema, batch, r, &mut x);
            self.logits(&x, &mut z);
            let mut best = 0;
            for k in 1..self.classes {
                if z[k] > z[best] {
                    best = k;
                }
            }
            hits += usize::from(best == y);
        }
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Permutation importance of each column for a logistic probe trained on the
/// labelled batch. The same row permutations are reused for every column.
pub fn feature_importance(batch: &TabularBatch, schema: &TabularSchema, seed: u64) -> Result<FeatureImportance> {
    let labels = batch
        .labels
        .as_deref()
        .ok_or_else(|| Error::config("feature importance needs labelled data"))?;
    if batch.rows == 0 || batch.cols != schema.len() {
        return Err(Error::config(
            "feature importance needs a non-empty batch matching the schema",
        ));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let mut probe = Probe::new(schema, classes);
    probe.fit(schema, batch, labels);
    let base = probe.accuracy(schema, batch, labels);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = (0..PERMUTATION_REPEATS)
        .map(|_| {
            let mut p: Vec<usize> = (0..batch.rows).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();

    let mut scores = Vec::with_capacity(batch.cols);
    for c in 0..batch.cols {
        let mut drop = 0.0;
        for p in &perms {
            let mut shuffled = batch.clone();
            for (r, &src) in p.iter().enumerate() {
                shuffled.values[r * batch.cols + c] = batch.value(src, c);
            }
            drop += base - probe.accuracy(schema, &shuffled, labels);
        }
        scores.push(drop / perms.len() as f64);
    }
    let mut ranking: Vec<usize> = (0..batch.cols).collect();
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(FeatureImportance { scores, ranking })
}
