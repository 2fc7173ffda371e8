//! Central finite-difference gradient checking.
//!
//! The analytic side runs the tape in the element type under test; the
//! numerical side only ever evaluates forward passes, in `f64`, so it does
//! not share any code with the backward sweep it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numeric::{ParamStore, Scalar, Tape, Tensor, Var, BLOCKED};

/// Default perturbation.
pub const FD_STEP: f64 = 1e-3;
/// Pass threshold on the relative error.
pub const FD_TOLERANCE: f64 = 1e-3;

/// A scalar function of the trainable slots of a parameter store.
pub trait Probe {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotError {
    pub slot: String,
    pub rel_err: f64,
    pub checked: usize,
}

/// Gradient norm below which both sides count as zero. Slots such as
/// attention key biases have an exactly vanishing gradient, where a ratio
/// of two rounding residues means nothing.
pub const VANISHING_NORM: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|)` over a whole gradient tensor (L2 norms); the
/// plain difference once both norms are below [`VANISHING_NORM`].
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < VANISHING_NORM {
        diff
    } else {
        diff / denom
    }
}

pub fn loss_value<T: Scalar, P: Probe>(probe: &P, store: &ParamStore<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = probe.build(&mut tape, store)?;
    Ok(tape.value(loss).item().as_f64())
}

/// Compares `A`-precision analytic gradients with central differences of
/// the `f64` forward. At most `max_elems` evenly spaced entries are probed
/// per slot.
pub fn check_probe<A: Scalar, P: Probe>(
    probe: &P,
    store: &ParamStore<f64>,
    step: f64,
    max_elems: usize,
) -> Result<Vec<SlotError>> {
    let mut analytic_store: ParamStore<A> = store.cast();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let loss = probe.build(&mut tape, &analytic_store)?;
    tape.backward_into(loss, &mut analytic_store)?;

    let mut work = store.clone();
    let mut out = Vec::new();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        let stride = n.div_ceil(max_elems.max(1)).max(1);
        let picks: Vec<usize> = (0..n).step_by(stride).collect();
        let grad = analytic_store.get(id).grad.clone().unwrap_or_default();
        let mut analytic = Vec::with_capacity(picks.len());
        let mut numeric = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = work.get(id).value.data()[j];
            work.get_mut(id).value.data_mut()[j] = orig + step;
            let plus = loss_value(probe, &work)?;
            work.get_mut(id).value.data_mut()[j] = orig - step;
            let minus = loss_value(probe, &work)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
            analytic.push(grad.get(j).map_or(0.0, |g| g.as_f64()));
        }
        out.push(SlotError {
            slot: p.name.clone(),
            rel_err: relative_error(&analytic, &numeric),
            checked: picks.len(),
        });
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
}

/// Elementary engine operations covered by the suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    MatMulTransposed,
    Linear,
    AddMul,
    AddBroadcast,
    Gelu,
    LayerNorm,
    Softmax,
    Attention,
    MeanAxis1,
    ConcatGather,
    Transpose,
    L2Normalize,
    Conv2d,
    CrossEntropy,
    SoftmaxNll,
    Mse,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::MatMul,
        OpKind::MatMulTransposed,
        OpKind::Linear,
        OpKind::AddMul,
        OpKind::AddBroadcast,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Attention,
        OpKind::MeanAxis1,
        OpKind::ConcatGather,
        OpKind::Transpose,
        OpKind::L2Normalize,
        OpKind::Conv2d,
        OpKind::CrossEntropy,
        OpKind::SoftmaxNll,
        OpKind::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulTransposed => "matmul_nt",
            OpKind::Linear => "linear",
            OpKind::AddMul => "add_mul_scale",
            OpKind::AddBroadcast => "add_broadcast",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax_rows",
            OpKind::Attention => "attention",
            OpKind::MeanAxis1 => "mean_axis1",
            OpKind::ConcatGather => "concat_gather_reshape",
            OpKind::Transpose => "transpose",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Conv2d => "conv2d",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SoftmaxNll => "softmax_nll",
            OpKind::Mse => "mse",
        }
    }
}

/// One randomly shaped instance of an [`OpKind`].
#[derive(Debug, Clone)]
pub struct OpCase {
    pub kind: OpKind,
    dims: [usize; 4],
    mask: Option<Tensor<f64>>,
    targets: Vec<usize>,
    segments: Vec<(usize, usize)>,
    rows: Vec<usize>,
}

impl OpCase {
    /// Draws shapes and inputs for `kind` from `seed`; returns the case and a
    /// store holding its inputs (trainable) plus fixed readout weights.
    pub fn random(kind: OpKind, seed: u64) -> (OpCase, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919) ^ kind as u64);
        let mut d = |lo: usize, hi: usize| rng.random_range(lo..=hi);
        let dims = [d(1, 5), d(2, 6), d(1, 5), d(2, 4)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 * kind as u64));
        let mut store = ParamStore::new();
        let mut case = OpCase {
            kind,
            dims,
            mask: None,
            targets: Vec::new(),
            segments: Vec::new(),
            rows: Vec::new(),
        };
        let [m, k, n, h] = dims;
        let add = |store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>| {
            store.insert(name, t).unwrap();
        };
        match kind {
            OpKind::MatMul => {
                add(&mut store, "a", uniform(&mut rng, &[m, k], 1.0));
                add(&mut store, "b", uniform(&mut rng, &[k, n], 1.0));
                add(&mut store, "r", uniform(&mut rng, &[m, n], 1.0));
            }
            OpKind::MatMulTransposed => {
                add(&mut store, "a", uniform(&mut rng, &[m, k], 1.0));
                add(&mut store, "b", uniform(&mut rng, &[n, k], 1.0));
                add(&mut store, "r", uniform(&mut rng, &[m, n], 1.0));
            }
            OpKind::Linear => {
                add(&mut store, "x", uniform(&mut rng, &[m, h, k], 1.0));
                add(&mut store, "w", uniform(&mut rng, &[k, n], 1.0));
                add(&mut store, "b", uniform(&mut rng, &[n], 1.0));
                add(&mut store, "r", uniform(&mut rng, &[m, h, n], 1.0));
            }
            OpKind::AddMul => {
                add(&mut store, "a", uniform(&mut rng, &[m, k], 1.0));
                add(&mut store, "b", uniform(&mut rng, &[m, k], 1.0));
                add(&mut store, "r", uniform(&mut rng, &[m, k], 1.0));
            }
            OpKind::AddBroadcast => {
                add(&mut store, "x", uniform(&mut rng, &[m, h, k], 1.0));
                add(&mut store, "y", uniform(&mut rng, &[h, k], 1.0));
                add(&mut store, "r", uniform(&mut rng, &[m, h, k], 1.0));
            }
            OpKind::Gelu => {
                add(&mut store, "x", uniform(&mut rng, &[m, k], 3.0));
                add(&mut store, "r", uniform(&mut rng, &[m, k], 1.0));
            }
            OpKind::LayerNorm => {
                add(&mut store, "x", uniform(&mut rng, &[m, h, k], 2.0));
                add(&mut store, "gamma", uniform(&mut rng, &[k], 1.0));
                add(&mut store, "beta", uniform(&mut rng, &[k], 1.0));
                add(&mut store, "r", uniform(&mut rng, &[m, h, k], 1.0));
            }
            OpKind::Softmax => {
                add(&mut store, "x", uniform(&mut rng, &[m, k], 2.0));
                add(&mut store, "r", uniform(&mut rng, &[m, k], 1.0));
                case.mask = Some(random_mask(&mut rng, m, k));
            }
            OpKind::Attention => {
                let heads = [1, 2][h % 2];
                let width = heads * n.max(1);
                let sk = k;
                add(&mut store, "q", uniform(&mut rng, &[m, h, width], 1.0));
                add(&mut store, "k", uniform(&mut rng, &[m, sk, width], 1.0));
                add(&mut store, "v", uniform(&mut rng, &[m, sk, width], 1.0));
                add(&mut store, "r", uniform(&mut rng, &[m, h, width], 1.0));
                case.dims[3] = heads;
                case.mask = Some(random_mask(&mut rng, m * h, sk).reshaped(&[m, h, sk]).unwrap());
            }
            OpKind::MeanAxis1 => {
                add(&mut store, "x", uniform(&mut rng, &[m, h, k], 1.0));
                add(&mut store, "r", uniform(&mut rng, &[m, k], 1.0));
            }
            OpKind::ConcatGather => {
                add(&mut store, "a", uniform(&mut rng, &[m, k], 1.0));
                add(&mut store, "b", uniform(&mut rng, &[h, k], 1.0));
                case.rows = (0..m + h + 2).map(|_| rng.random_range(0..m + h)).collect();
                add(&mut store, "r", uniform(&mut rng, &[(m + h + 2) * k], 1.0));
            }
            OpKind::Transpose => {
                add(&mut store, "x", uniform(&mut rng, &[m, k], 1.0));
                add(&mut store, "r", uniform(&mut rng, &[k, m], 1.0));
            }
            OpKind::L2Normalize => {
                add(&mut store, "x", uniform(&mut rng, &[m, k], 1.0));
                add(&mut store, "r", uniform(&mut rng, &[m, k], 1.0));
            }
            OpKind::Conv2d => {
                let (hw, cin, cout) = (h + 2, n, k);
                let stride = 1 + seed as usize % 2;
                case.dims[3] = stride;
                add(&mut store, "x", uniform(&mut rng, &[2, hw, hw, cin], 1.0));
                add(&mut store, "w", uniform(&mut rng, &[9 * cin, cout], 0.5));
                add(&mut store, "b", uniform(&mut rng, &[cout], 0.5));
                let oh = (hw + 2 - 3) / stride + 1;
                add(&mut store, "r", uniform(&mut rng, &[2, oh, oh, cout], 1.0));
            }
            OpKind::CrossEntropy => {
                let width = k + 2;
                add(&mut store, "x", uniform(&mut rng, &[m, width], 2.0));
                for _ in 0..m {
                    let len = rng.random_range(2..=width);
                    let start = rng.random_range(0..=width - len);
                    case.segments.push((start, len));
                    case.targets.push(rng.random_range(0..len));
                }
            }
            OpKind::SoftmaxNll => {
                add(&mut store, "x", uniform(&mut rng, &[m, k], 2.0));
                case.targets = (0..m).map(|_| rng.random_range(0..k)).collect();
            }
            OpKind::Mse => {
                add(&mut store, "x", uniform(&mut rng, &[m, k], 1.0));
                add(&mut store, "target", uniform(&mut rng, &[m, k], 1.0));
                let mut w = Tensor::from_fn(&[m, k], |_| f64::from(rng.random_bool(0.6)));
                w.data_mut()[0] = 1.0;
                add(&mut store, "weights", w);
            }
        }
        for name in ["r", "target", "weights"] {
            if let Some(id) = store.id(name) {
                store.get_mut(id).trainable = false;
            }
        }
        (case, store)
    }
}

fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut data = vec![0.0; rows * cols];
    for r in 0..rows {
        let keep = rng.random_range(0..cols);
        for c in 0..cols {
            if c != keep && rng.random_bool(0.3) {
                data[r * cols + c] = BLOCKED;
            }
        }
    }
    Tensor::new(&[rows, cols], data).unwrap()
}

fn slot<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    let id = store
        .id(name)
        .ok_or_else(|| crate::Error::config(format!("missing slot {name}")))?;
    tape.param(store, id)
}

fn readout<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, out: Var) -> Result<Var> {
    let r = slot(tape, store, "r")?;
    let shape = tape.shape(out).to_vec();
    let r = tape.reshape(r, &shape)?;
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

impl Probe for OpCase {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> Result<Var> {
        let s = |tape: &mut Tape<T>, name| slot(tape, store, name);
        let mask = self.mask.as_ref().map(|m| m.cast::<T>());
        match self.kind {
            OpKind::MatMul | OpKind::MatMulTransposed => {
                let (a, b) = (s(tape, "a")?, s(tape, "b")?);
                let out = tape.matmul_ext(a, b, self.kind == OpKind::MatMulTransposed)?;
                readout(tape, store, out)
            }
            OpKind::Linear => {
                let (x, w, b) = (s(tape, "x")?, s(tape, "w")?, s(tape, "b")?);
                let out = tape.linear(x, w, Some(b))?;
                readout(tape, store, out)
            }
            OpKind::AddMul => {
                let (a, b) = (s(tape, "a")?, s(tape, "b")?);
                let ab = tape.mul(a, b)?;
                let sum = tape.add(ab, a)?;
                let aa = tape.mul(a, a)?;
                let sq = tape.scale(aa, T::lit(0.5))?;
                let out = tape.add(sum, sq)?;
                readout(tape, store, out)
            }
            OpKind::AddBroadcast => {
                let (x, y) = (s(tape, "x")?, s(tape, "y")?);
                let out = tape.add_broadcast(x, y)?;
                let out = tape.mul(out, out)?;
                readout(tape, store, out)
            }
            OpKind::Gelu => {
                let x = s(tape, "x")?;
                let out = tape.gelu(x)?;
                readout(tape, store, out)
            }
            OpKind::LayerNorm => {
                let (x, g, b) = (s(tape, "x")?, s(tape, "gamma")?, s(tape, "beta")?);
                let out = tape.layer_norm(x, g, b)?;
                readout(tape, store, out)
            }
            OpKind::Softmax => {
                let x = s(tape, "x")?;
                let out = tape.softmax_rows(x, mask.as_ref())?;
                readout(tape, store, out)
            }
            OpKind::Attention => {
                let (q, k, v) = (s(tape, "q")?, s(tape, "k")?, s(tape, "v")?);
                let out = tape.attention(q, k, v, self.dims[3], mask.as_ref())?;
                readout(tape, store, out)
            }
            OpKind::MeanAxis1 => {
                let x = s(tape, "x")?;
                let out = tape.mean_axis1(x)?;
                readout(tape, store, out)
            }
            OpKind::ConcatGather => {
                let (a, b) = (s(tape, "a")?, s(tape, "b")?);
                let cat = tape.concat_rows(&[a, b])?;
                let g = tape.gather_rows(cat, &self.rows)?;
                let n = tape.value(g).numel();
                let out = tape.reshape(g, &[n])?;
                let out = tape.mul(out, out)?;
                readout(tape, store, out)
            }
            OpKind::Transpose => {
                let x = s(tape, "x")?;
                let out = tape.transpose(x)?;
                readout(tape, store, out)
            }
            OpKind::L2Normalize => {
                let x = s(tape, "x")?;
                let out = tape.l2_normalize_rows(x)?;
                readout(tape, store, out)
            }
            OpKind::Conv2d => {
                let (x, w, b) = (s(tape, "x")?, s(tape, "w")?, s(tape, "b")?);
                let out = tape.conv2d(x, w, b, self.dims[3], 1)?;
                readout(tape, store, out)
            }
            OpKind::CrossEntropy => {
                let x = s(tape, "x")?;
                tape.segment_cross_entropy(x, &self.segments, &self.targets)
            }
            OpKind::SoftmaxNll => {
                let x = s(tape, "x")?;
                let p = tape.softmax_rows(x, None)?;
                tape.nll(p, &self.targets)
            }
            OpKind::Mse => {
                let x = s(tape, "x")?;
                let target = store.by_name("target").unwrap().value.data().to_vec();
                let w = store.by_name("weights").unwrap().value.data().to_vec();
                tape.mse(x, &target, Some(&w))
            }
        }
    }
}
