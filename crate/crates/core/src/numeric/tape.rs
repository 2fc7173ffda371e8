use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Scalar, Tensor};

/// Additive sentinel for blocked attention/softmax positions.
pub const BLOCKED: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        s: T,
    },
    AddBroadcast {
        x: usize,
        y: usize,
    },
    Gelu {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    MeanAxis1 {
        x: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Transpose {
        x: usize,
    },
    L2Normalize {
        x: usize,
        inv_norm: Vec<T>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    SegmentCrossEntropy {
        logits: usize,
        segments: Vec<(usize, usize)>,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Nll {
        p: usize,
        targets: Vec<usize>,
    },
    Mse {
        pred: usize,
        target: Vec<T>,
        weights: Option<Vec<T>>,
        wsum: T,
    },
}

/// Linear record of a forward computation, replayed in reverse by
/// [`Tape::backward`].
#[derive(Debug)]
pub struct Tape<T> {
    pub(crate) id: u64,
    pub(crate) values: Vec<Tensor<T>>,
    pub(crate) ops: Vec<Op<T>>,
    pub(crate) requires_grad: Vec<bool>,
    pub(crate) spent: bool,
    param_cache: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            spent: false,
            param_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.values.len() || self.spent {
            return Err(Error::DetachedTape);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.values[v.index]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.index]
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let index = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(rg);
        Ok(Var { tape: self.id, index })
    }

    fn rg(&self, idx: &[usize]) -> bool {
        idx.iter().any(|&i| self.requires_grad[i])
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a parameter as a leaf. Repeated requests reuse the same node so
    /// gradients from every use accumulate into one slot.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push("param", p.value.clone(), Op::Leaf { param: Some(id) }, p.trainable)?;
        self.param_cache.insert(id, v);
        Ok(v)
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (ParamId, usize)> + '_ {
        self.ops.iter().enumerate().filter_map(|(i, op)| match op {
            Op::Leaf { param: Some(id) } => Some((*id, i)),
            _ => None,
        })
    }

    /// `a @ b`, or `a @ b^T` when `trans_b`. Both operands are 2-D.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.values[ai].shape(), self.values[bi].shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: need 2-D")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?} x {sb:?}{}", if trans_b { "^T" } else { "" }),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.values[ai].data(),
            (k as isize, 1),
            self.values[bi].data(),
            b_strides,
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(&[ai, bi]);
        self.push(
            "matmul",
            Tensor::new(&[m, n], out)?,
            Op::MatMul { a: ai, b: bi, trans_b },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// Affine map over the last axis: `x[..., in] @ w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xs = self.values[xi].shape().to_vec();
        let ws = self.values[wi].shape();
        let din = *xs.last().unwrap_or(&1);
        if ws.len() != 2 || ws[0] != din {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let dout = ws[1];
        if let Some(bi) = bi {
            if self.values[bi].shape() != [dout] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?}, expected [{dout}]", self.values[bi].shape()),
                ));
            }
        }
        let rows = self.values[xi].numel() / din.max(1);
        let mut out = match bi {
            Some(bi) => {
                let bias = self.values[bi].data();
                let mut o = Vec::with_capacity(rows * dout);
                for _ in 0..rows {
                    o.extend_from_slice(bias);
                }
                o
            }
            None => vec![T::zero(); rows * dout],
        };
        let beta = if bi.is_some() { T::one() } else { T::zero() };
        T::gemm(
            rows,
            din,
            dout,
            T::one(),
            self.values[xi].data(),
            (din as isize, 1),
            self.values[wi].data(),
            (dout as isize, 1),
            beta,
            &mut out,
            (dout as isize, 1),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut ins = vec![xi, wi];
        ins.extend(bi);
        let rg = self.rg(&ins);
        self.push(
            "linear",
            Tensor::new(&shape, out)?,
            Op::Linear { x: xi, w: wi, b: bi },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.values[a].shape() != self.values[b].shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.values[a].shape(), self.values[b].shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ai, bi)?;
        let data = self.values[ai]
            .data()
            .iter()
            .zip(self.values[bi].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.values[ai].shape(), data)?;
        let rg = self.rg(&[ai, bi]);
        self.push("add", t, Op::Add { a: ai, b: bi }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ai, bi)?;
        let data = self.values[ai]
            .data()
            .iter()
            .zip(self.values[bi].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.values[ai].shape(), data)?;
        let rg = self.rg(&[ai, bi]);
        self.push("mul", t, Op::Mul { a: ai, b: bi }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let xi = self.idx(x)?;
        let data = self.values[xi].data().iter().map(|&v| v * s).collect();
        let t = Tensor::new(self.values[xi].shape(), data)?;
        let rg = self.rg(&[xi]);
        self.push("scale", t, Op::Scale { x: xi, s }, rg)
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xi, yi) = (self.idx(x)?, self.idx(y)?);
        let (xs, ys) = (self.values[xi].shape(), self.values[yi].shape());
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(Error::shape("add_broadcast", format!("{xs:?} + {ys:?}")));
        }
        let yd = self.values[yi].data();
        let n = yd.len().max(1);
        let data = self.values[xi]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + yd[i % n])
            .collect();
        let t = Tensor::new(self.values[xi].shape(), data)?;
        let rg = self.rg(&[xi, yi]);
        self.push("add_broadcast", t, Op::AddBroadcast { x: xi, y: yi }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let data = self.values[xi].data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.values[xi].shape(), data)?;
        let rg = self.rg(&[xi]);
        self.push("gelu", t, Op::Gelu { x: xi }, rg)
    }

    /// Normalises the last axis to zero mean / unit variance, then applies
    /// `gamma * x_hat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let d = self.values[xi].last_dim();
        if d < 2 || self.values[gi].shape() != [d] || self.values[bi].shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.values[xi].shape(),
                    self.values[gi].shape(),
                    self.values[bi].shape()
                ),
            ));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_d = T::lit(1.0 / d as f64);
        let xs = self.values[xi].data();
        let (g, b) = (self.values[gi].data(), self.values[bi].data());
        let rows = xs.len() / d;
        let mut out = Vec::with_capacity(xs.len());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in xs.chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(&v, (&gg, &bb))| (v - mean) * rstd * gg + bb),
            );
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(self.values[xi].shape(), out)?;
        let rg = self.rg(&[xi, gi, bi]);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                mean: means,
                rstd: rstds,
            },
            rg,
        )
    }

    /// Row-wise softmax over the last axis with an optional additive mask
    /// (0 = allowed, [`BLOCKED`] = blocked).
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.values[xi];
        let n = xv.last_dim();
        if let Some(m) = mask {
            if m.shape() != xv.shape() {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("mask {:?} vs x {:?}", m.shape(), xv.shape()),
                ));
            }
        }
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_exact_mut(n).enumerate() {
            if let Some(m) = mask {
                let mrow = &m.data()[r * n..(r + 1) * n];
                if mrow.iter().all(|&v| is_blocked(v)) {
                    return Err(Error::DegenerateMask { row: r });
                }
                row.iter_mut().zip(mrow).for_each(|(v, &mv)| *v += mv);
            }
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[xi]);
        self.push("softmax_rows", t, Op::Softmax { x: xi }, rg)
    }

    /// Multi-head scaled dot-product attention,
    /// `softmax(Q K^T / sqrt(d_k) + mask) V` per head, heads concatenated.
    ///
    /// `q: [B, Sq, D]`, `k, v: [B, Sk, D]`, optional additive
    /// `mask: [B, Sq, Sk]`. Projections are applied by the caller.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Tensor<T>>) -> Result<Var> {
        let (qi, ki, vi) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (qs, ks, vs) = (
            self.values[qi].shape(),
            self.values[ki].shape(),
            self.values[vi].shape(),
        );
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(Error::shape("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        let (b, sq, d) = (qs[0], qs[1], qs[2]);
        let sk = ks[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        if let Some(m) = mask {
            if m.shape() != [b, sq, sk] {
                return Err(Error::shape(
                    "attention",
                    format!("mask {:?}, expected [{b}, {sq}, {sk}]", m.shape()),
                ));
            }
        }
        let dk = d / heads;
        let scale = T::lit(1.0 / (dk as f64).sqrt());
        let (qd, kd, vd) = (self.values[qi].data(), self.values[ki].data(), self.values[vi].data());
        let mut probs = vec![T::zero(); b * heads * sq * sk];
        let mut out = vec![T::zero(); b * sq * d];
        for bb in 0..b {
            for h in 0..heads {
                let off = h * dk;
                for i in 0..sq {
                    let qrow = &qd[(bb * sq + i) * d + off..][..dk];
                    let prow = &mut probs[((bb * heads + h) * sq + i) * sk..][..sk];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(bb * sk + j) * d + off..][..dk];
                        *p = dot(qrow, krow) * scale;
                    }
                    if let Some(m) = mask {
                        let mrow = &m.data()[(bb * sq + i) * sk..][..sk];
                        if mrow.iter().all(|&x| is_blocked(x)) {
                            return Err(Error::DegenerateMask { row: bb * sq + i });
                        }
                        prow.iter_mut().zip(mrow).for_each(|(p, &mv)| *p += mv);
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(bb * sq + i) * d + off..][..dk];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vd[(bb * sk + j) * d + off..][..dk];
                        orow.iter_mut().zip(vrow).for_each(|(o, &vv)| *o += p * vv);
                    }
                }
            }
        }
        let t = Tensor::new(&[b, sq, d], out)?;
        let rg = self.rg(&[qi, ki, vi]);
        self.push(
            "attention",
            t,
            Op::Attention {
                q: qi,
                k: ki,
                v: vi,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.values[xi].data().iter().copied().sum::<T>();
        let rg = self.rg(&[xi]);
        self.push("sum", Tensor::scalar(s), Op::Sum { x: xi }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = self.values[xi].numel();
        if n == 0 {
            return Err(Error::EmptySelection("mean"));
        }
        let s = self.values[xi].data().iter().copied().sum::<T>() / T::lit(n as f64);
        let rg = self.rg(&[xi]);
        self.push("mean", Tensor::scalar(s), Op::Mean { x: xi }, rg)
    }

    /// `[B, S, C] -> [B, C]`, averaging over the middle axis.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.values[xi].shape();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(Error::shape("mean_axis1", format!("{xs:?}")));
        }
        let (b, s, c) = (xs[0], xs[1], xs[2]);
        let inv = T::lit(1.0 / s as f64);
        let xd = self.values[xi].data();
        let mut out = vec![T::zero(); b * c];
        for bb in 0..b {
            let o = &mut out[bb * c..(bb + 1) * c];
            for row in xd[bb * s * c..(bb + 1) * s * c].chunks_exact(c) {
                o.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
            }
            o.iter_mut().for_each(|a| *a *= inv);
        }
        let rg = self.rg(&[xi]);
        self.push("mean_axis1", Tensor::new(&[b, c], out)?, Op::MeanAxis1 { x: xi }, rg)
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let idx = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let tail = self.values[idx[0]].shape().get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let s = self.values[i].shape();
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{s:?} does not match trailing {tail:?}"),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.values[i].data());
        }
        let mut shape = vec![lead];
        shape.extend(&tail);
        let rg = self.rg(&idx);
        self.push(
            "concat_rows",
            Tensor::new(&shape, data)?,
            Op::ConcatRows { parts: idx },
            rg,
        )
    }

    /// Selects slices along the first axis (embedding lookup, batch
    /// re-indexing). Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.values[xi].shape();
        if xs.is_empty() {
            return Err(Error::shape("gather_rows", "scalar input"));
        }
        let r = xs[0];
        let width = self.values[xi].numel().checked_div(r).unwrap_or(0);
        let xd = self.values[xi].data();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &row in rows {
            if row >= r {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: row,
                    bound: r,
                });
            }
            data.extend_from_slice(&xd[row * width..(row + 1) * width]);
        }
        let mut shape = vec![rows.len()];
        shape.extend(&xs[1..]);
        let rg = self.rg(&[xi]);
        self.push(
            "gather_rows",
            Tensor::new(&shape, data)?,
            Op::GatherRows {
                x: xi,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let t = self.values[xi].clone().reshaped(shape)?;
        let rg = self.rg(&[xi]);
        self.push("reshape", t, Op::Reshape { x: xi }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xs = self.values[xi].shape();
        if xs.len() != 2 {
            return Err(Error::shape("transpose", format!("{xs:?}: need 2-D")));
        }
        let (m, n) = (xs[0], xs[1]);
        let xd = self.values[xi].data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let rg = self.rg(&[xi]);
        self.push("transpose", Tensor::new(&[n, m], out)?, Op::Transpose { x: xi }, rg)
    }

    /// Scales each row to unit L2 norm, `x / sqrt(|x|^2 + 1e-12)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let d = self.values[xi].last_dim();
        let eps = T::lit(L2_EPS);
        let xd = self.values[xi].data();
        let mut out = Vec::with_capacity(xd.len());
        let mut inv_norm = Vec::with_capacity(xd.len() / d.max(1));
        for row in xd.chunks_exact(d) {
            let inv = T::one() / (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            out.extend(row.iter().map(|&v| v * inv));
            inv_norm.push(inv);
        }
        let t = Tensor::new(self.values[xi].shape(), out)?;
        let rg = self.rg(&[xi]);
        self.push("l2_normalize", t, Op::L2Normalize { x: xi, inv_norm }, rg)
    }

    /// 2-D convolution on NHWC input with a square kernel and zero padding.
    ///
    /// `w` has shape `[kernel * kernel * in_ch, out_ch]`, rows ordered by
    /// `(ky, kx, c)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi, bi) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let xs = self.values[xi].shape();
        let ws = self.values[wi].shape();
        if xs.len() != 4 || ws.len() != 2 || stride == 0 {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?}")));
        }
        let (bn, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
        let kk = ws[0] / c.max(1);
        let kernel = (kk as f64).sqrt().round() as usize;
        if kernel * kernel * c != ws[0] || kernel == 0 {
            return Err(Error::shape("conv2d", format!("weight rows {} not k*k*{c}", ws[0])));
        }
        let out_ch = ws[1];
        if self.values[bi].shape() != [out_ch] {
            return Err(Error::shape("conv2d", "bias shape"));
        }
        if h + 2 * pad < kernel || wd + 2 * pad < kernel {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let out_h = (h + 2 * pad - kernel) / stride + 1;
        let out_w = (wd + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            batch: bn,
            height: h,
            width: wd,
            in_ch: c,
            out_ch,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        };
        let cols = im2col(self.values[xi].data(), &geom);
        let rows = bn * out_h * out_w;
        let kc = kernel * kernel * c;
        let bias = self.values[bi].data();
        let mut out = Vec::with_capacity(rows * out_ch);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        T::gemm(
            rows,
            kc,
            out_ch,
            T::one(),
            &cols,
            (kc as isize, 1),
            self.values[wi].data(),
            (out_ch as isize, 1),
            T::one(),
            &mut out,
            (out_ch as isize, 1),
        );
        let t = Tensor::new(&[bn, out_h, out_w, out_ch], out)?;
        let rg = self.rg(&[xi, wi, bi]);
        self.push(
            "conv2d",
            t,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Mean cross-entropy over rows of `logits: [m, K]` with integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let k = self.value(logits).last_dim();
        let segments = vec![(0, k); targets.len()];
        self.segment_cross_entropy(logits, &segments, targets)
    }

    /// Cross-entropy where row `r` only scores the logit block
    /// `segments[r] = (start, len)`; `targets[r]` indexes within that block.
    pub fn segment_cross_entropy(
        &mut self,
        logits: Var,
        segments: &[(usize, usize)],
        targets: &[usize],
    ) -> Result<Var> {
        let li = self.idx(logits)?;
        let ls = self.values[li].shape();
        if ls.len() != 2 || ls[0] != targets.len() || segments.len() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {ls:?}, {} targets, {} segments", targets.len(), segments.len()),
            ));
        }
        let (m, k) = (ls[0], ls[1]);
        if m == 0 {
            return Err(Error::EmptySelection("cross_entropy"));
        }
        let ld = self.values[li].data();
        let mut probs = Vec::new();
        let mut total = 0.0f64;
        for r in 0..m {
            let (start, len) = segments[r];
            if len == 0 || start + len > k {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("segment ({start}, {len}) outside {k} logits"),
                ));
            }
            let t = targets[r];
            if t >= len {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: len,
                });
            }
            let seg = &ld[r * k + start..r * k + start + len];
            let max = seg.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = seg.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += (lse - seg[t]).as_f64();
            probs.extend(seg.iter().map(|&v| (v - lse).exp()));
        }
        let loss = T::lit(total / m as f64);
        let rg = self.rg(&[li]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::SegmentCrossEntropy {
                logits: li,
                segments: segments.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under probability rows `p`.
    pub fn nll(&mut self, p: Var, targets: &[usize]) -> Result<Var> {
        let pi = self.idx(p)?;
        let ps = self.values[pi].shape();
        if ps.len() != 2 || ps[0] != targets.len() {
            return Err(Error::shape("nll", format!("p {ps:?}, {} targets", targets.len())));
        }
        let (m, k) = (ps[0], ps[1]);
        if m == 0 {
            return Err(Error::EmptySelection("nll"));
        }
        let pd = self.values[pi].data();
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::Index {
                    op: "nll",
                    index: t,
                    bound: k,
                });
            }
            total -= pd[r * k + t].ln().as_f64();
        }
        let rg = self.rg(&[pi]);
        self.push(
            "nll",
            Tensor::scalar(T::lit(total / m as f64)),
            Op::Nll {
                p: pi,
                targets: targets.to_vec(),
            },
            rg,
        )
    }

    /// Weighted mean squared error against a constant target. With weights,
    /// the sum is divided by the weight total.
    pub fn mse(&mut self, pred: Var, target: &[T], weights: Option<&[T]>) -> Result<Var> {
        let pi = self.idx(pred)?;
        let n = self.values[pi].numel();
        if target.len() != n || weights.is_some_and(|w| w.len() != n) {
            return Err(Error::shape(
                "mse",
                format!("pred has {n} values, target {}", target.len()),
            ));
        }
        let pd = self.values[pi].data();
        let wsum = match weights {
            Some(w) => w.iter().copied().sum::<T>(),
            None => T::lit(n as f64),
        };
        if wsum <= T::zero() {
            return Err(Error::EmptySelection("mse"));
        }
        let mut total = T::zero();
        for i in 0..n {
            let d = pd[i] - target[i];
            let w = weights.map_or(T::one(), |w| w[i]);
            total += w * d * d;
        }
        let rg = self.rg(&[pi]);
        self.push(
            "mse",
            Tensor::scalar(total / wsum),
            Op::Mse {
                pred: pi,
                target: target.to_vec(),
                weights: weights.map(|w| w.to_vec()),
                wsum,
            },
            rg,
        )
    }
}

pub(crate) fn is_blocked<T: Scalar>(v: T) -> bool {
    v <= T::lit(BLOCKED * 0.5)
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `sigmoid(2u)`, which equals `(1 + tanh u) / 2` but costs one `exp`.
fn half_one_plus_tanh<T: Scalar>(u: T) -> T {
    T::one() / (T::one() + (-(u + u)).exp())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let u = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    x * half_one_plus_tanh(u)
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let u = c * (x + a * x * x * x);
    let s = half_one_plus_tanh(u);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    // 1 - tanh^2 = 4 s (1 - s)
    s + T::lit(2.0) * x * s * (T::one() - s) * du
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let kc = g.kernel * g.kernel * g.in_ch;
    let mut cols = vec![T::zero(); g.batch * g.out_h * g.out_w * kc];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * kc;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * g.in_ch;
                        let dst = row + (ky * g.kernel + kx) * g.in_ch;
                        cols[dst..dst + g.in_ch].copy_from_slice(&x[src..src + g.in_ch]);
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let kc = g.kernel * g.kernel * g.in_ch;
    let mut x = vec![T::zero(); g.batch * g.height * g.width * g.in_ch];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * kc;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * g.in_ch;
                        let src = row + (ky * g.kernel + kx) * g.in_ch;
                        x[dst..dst + g.in_ch]
                            .iter_mut()
                            .zip(&cols[src..src + g.in_ch])
                            .for_each(|(a, &v)| *a += v);
                    }
                }
            }
        }
    }
    x
}
