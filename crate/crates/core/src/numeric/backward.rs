use crate::error::{Error, Result};
use crate::numeric::tape::{col2im, dot, gelu_grad, Op};
use crate::numeric::{ParamStore, Scalar, Tape, Var};

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf, `None` when the leaf does
    /// not require gradients. Leaves the loss does not depend on get zeros.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index)?.as_deref()
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], i: usize, len: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    /// Reverse-mode sweep from a scalar `loss`. Consumes the recording: a
    /// second call, or any further op on this tape, fails with
    /// [`Error::DetachedTape`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.values[li].numel() != 1 {
            return Err(Error::NotScalar(self.values[li].shape().to_vec()));
        }
        self.spent = true;
        let n = self.values.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[li] = Some(vec![T::one()]);
        let rg = &self.requires_grad;
        for i in (0..=li).rev() {
            if !rg[i] {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let vals = &self.values;
            match &self.ops[i] {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                }
                Op::MatMul { a, b, trans_b } => {
                    let (a, b, trans_b) = (*a, *b, *trans_b);
                    let (m, k) = (vals[a].shape()[0], vals[a].shape()[1]);
                    let nn = vals[i].shape()[1];
                    if rg[a] {
                        // da[m,k] = g[m,n] . op(b)^T
                        let bs = if trans_b { (k as isize, 1) } else { (1, nn as isize) };
                        let da = acc(&mut grads, a, m * k);
                        T::gemm(
                            m,
                            nn,
                            k,
                            T::one(),
                            &g,
                            (nn as isize, 1),
                            vals[b].data(),
                            bs,
                            T::one(),
                            da,
                            (k as isize, 1),
                        );
                    }
                    if rg[b] {
                        let db = acc(&mut grads, b, k * nn);
                        if trans_b {
                            // db[n,k] = g^T[n,m] . a[m,k]
                            T::gemm(
                                nn,
                                m,
                                k,
                                T::one(),
                                &g,
                                (1, nn as isize),
                                vals[a].data(),
                                (k as isize, 1),
                                T::one(),
                                db,
                                (k as isize, 1),
                            );
                        } else {
                            // db[k,n] = a^T[k,m] . g[m,n]
                            T::gemm(
                                k,
                                m,
                                nn,
                                T::one(),
                                vals[a].data(),
                                (1, k as isize),
                                &g,
                                (nn as isize, 1),
                                T::one(),
                                db,
                                (nn as isize, 1),
                            );
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let din = vals[w].shape()[0];
                    let dout = vals[w].shape()[1];
                    let rows = vals[x].numel() / din.max(1);
                    if rg[x] {
                        let dx = acc(&mut grads, x, rows * din);
                        T::gemm(
                            rows,
                            dout,
                            din,
                            T::one(),
                            &g,
                            (dout as isize, 1),
                            vals[w].data(),
                            (1, dout as isize),
                            T::one(),
                            dx,
                            (din as isize, 1),
                        );
                    }
                    if rg[w] {
                        let dw = acc(&mut grads, w, din * dout);
                        T::gemm(
                            din,
                            rows,
                            dout,
                            T::one(),
                            vals[x].data(),
                            (1, din as isize),
                            &g,
                            (dout as isize, 1),
                            T::one(),
                            dw,
                            (dout as isize, 1),
                        );
                    }
                    if let Some(b) = b {
                        if rg[b] {
                            let db = acc(&mut grads, b, dout);
                            for row in g.chunks_exact(dout) {
                                db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &t in [*a, *b].iter() {
                        if rg[t] {
                            let d = acc(&mut grads, t, g.len());
                            d.iter_mut().zip(&g).for_each(|(a, &v)| *a += v);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if rg[a] {
                        let other = vals[b].data();
                        let d = acc(&mut grads, a, g.len());
                        for ((d, &gv), &o) in d.iter_mut().zip(&g).zip(other) {
                            *d += gv * o;
                        }
                    }
                    if rg[b] {
                        let other = vals[a].data();
                        let d = acc(&mut grads, b, g.len());
                        for ((d, &gv), &o) in d.iter_mut().zip(&g).zip(other) {
                            *d += gv * o;
                        }
                    }
                }
                Op::Scale { x, s } => {
                    let (x, s) = (*x, *s);
                    if rg[x] {
                        let d = acc(&mut grads, x, g.len());
                        d.iter_mut().zip(&g).for_each(|(a, &v)| *a += v * s);
                    }
                }
                Op::AddBroadcast { x, y } => {
                    let (x, y) = (*x, *y);
                    if rg[x] {
                        let d = acc(&mut grads, x, g.len());
                        d.iter_mut().zip(&g).for_each(|(a, &v)| *a += v);
                    }
                    if rg[y] {
                        let ny = vals[y].numel();
                        let d = acc(&mut grads, y, ny);
                        for chunk in g.chunks_exact(ny.max(1)) {
                            d.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                        }
                    }
                }
                Op::Gelu { x } => {
                    let x = *x;
                    if rg[x] {
                        let xd = vals[x].data();
                        let d = acc(&mut grads, x, g.len());
                        for ((d, &gv), &xv) in d.iter_mut().zip(&g).zip(xd) {
                            *d += gv * gelu_grad(xv);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let dd = vals[gamma].numel();
                    let xd = vals[x].data();
                    let gm = vals[gamma].data();
                    let inv_d = T::lit(1.0 / dd as f64);
                    let mut dgamma = vec![T::zero(); dd];
                    let mut dbeta = vec![T::zero(); dd];
                    let mut dx = if rg[x] { Some(vec![T::zero(); xd.len()]) } else { None };
                    let mut xhat = vec![T::zero(); dd];
                    let mut dxhat = vec![T::zero(); dd];
                    for (r, (xrow, grow)) in xd.chunks_exact(dd).zip(g.chunks_exact(dd)).enumerate() {
                        let (mu, rs) = (mean[r], rstd[r]);
                        for j in 0..dd {
                            xhat[j] = (xrow[j] - mu) * rs;
                            dxhat[j] = grow[j] * gm[j];
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                        }
                        if let Some(dx) = dx.as_mut() {
                            let m1 = dxhat.iter().copied().sum::<T>() * inv_d;
                            let m2 = dot(&dxhat, &xhat) * inv_d;
                            let out = &mut dx[r * dd..(r + 1) * dd];
                            for j in 0..dd {
                                out[j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        let d = acc(&mut grads, x, dx.len());
                        d.iter_mut().zip(&dx).for_each(|(a, &v)| *a += v);
                    }
                    if rg[gamma] {
                        let d = acc(&mut grads, gamma, dd);
                        d.iter_mut().zip(&dgamma).for_each(|(a, &v)| *a += v);
                    }
                    if rg[beta] {
                        let d = acc(&mut grads, beta, dd);
                        d.iter_mut().zip(&dbeta).for_each(|(a, &v)| *a += v);
                    }
                }
                Op::Softmax { x } => {
                    let x = *x;
                    if rg[x] {
                        let y = vals[i].data();
                        let nn = vals[i].last_dim();
                        let d = acc(&mut grads, x, g.len());
                        for ((drow, yrow), grow) in
                            d.chunks_exact_mut(nn).zip(y.chunks_exact(nn)).zip(g.chunks_exact(nn))
                        {
                            let c = dot(grow, yrow);
                            for j in 0..nn {
                                drow[j] += yrow[j] * (grow[j] - c);
                            }
                        }
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (q, k, v, heads) = (*q, *k, *v, *heads);
                    let qs = vals[q].shape();
                    let (b, sq, d) = (qs[0], qs[1], qs[2]);
                    let sk = vals[k].shape()[1];
                    let dk = d / heads;
                    let scale = T::lit(1.0 / (dk as f64).sqrt());
                    let (qd, kd, vd) = (vals[q].data(), vals[k].data(), vals[v].data());
                    let mut dq = vec![T::zero(); qd.len()];
                    let mut dkk = vec![T::zero(); kd.len()];
                    let mut dv = vec![T::zero(); vd.len()];
                    let mut dp = vec![T::zero(); sk];
                    for bb in 0..b {
                        for h in 0..heads {
                            let off = h * dk;
                            for ii in 0..sq {
                                let grow = &g[(bb * sq + ii) * d + off..][..dk];
                                let prow = &probs[((bb * heads + h) * sq + ii) * sk..][..sk];
                                for j in 0..sk {
                                    let vrow = &vd[(bb * sk + j) * d + off..][..dk];
                                    dp[j] = dot(grow, vrow);
                                    let p = prow[j];
                                    let dvrow = &mut dv[(bb * sk + j) * d + off..][..dk];
                                    dvrow.iter_mut().zip(grow).for_each(|(a, &gv)| *a += p * gv);
                                }
                                let c = dot(&dp, prow);
                                let qrow = &qd[(bb * sq + ii) * d + off..][..dk];
                                for j in 0..sk {
                                    let ds = prow[j] * (dp[j] - c) * scale;
                                    if ds == T::zero() {
                                        continue;
                                    }
                                    let krow = &kd[(bb * sk + j) * d + off..][..dk];
                                    let dqrow = &mut dq[(bb * sq + ii) * d + off..][..dk];
                                    dqrow.iter_mut().zip(krow).for_each(|(a, &kv)| *a += ds * kv);
                                    let dkrow = &mut dkk[(bb * sk + j) * d + off..][..dk];
                                    dkrow.iter_mut().zip(qrow).for_each(|(a, &qv)| *a += ds * qv);
                                }
                            }
                        }
                    }
                    for (t, buf) in [(q, dq), (k, dkk), (v, dv)] {
                        if rg[t] {
                            let d = acc(&mut grads, t, buf.len());
                            d.iter_mut().zip(&buf).for_each(|(a, &x)| *a += x);
                        }
                    }
                }
                Op::Sum { x } => {
                    let x = *x;
                    if rg[x] {
                        let nx = vals[x].numel();
                        let d = acc(&mut grads, x, nx);
                        d.iter_mut().for_each(|a| *a += g[0]);
                    }
                }
                Op::Mean { x } => {
                    let x = *x;
                    if rg[x] {
                        let nx = vals[x].numel();
                        let gv = g[0] / T::lit(nx as f64);
                        let d = acc(&mut grads, x, nx);
                        d.iter_mut().for_each(|a| *a += gv);
                    }
                }
                Op::MeanAxis1 { x } => {
                    let x = *x;
                    if rg[x] {
                        let xs = vals[x].shape();
                        let (b, s, c) = (xs[0], xs[1], xs[2]);
                        let inv = T::lit(1.0 / s as f64);
                        let d = acc(&mut grads, x, b * s * c);
                        for bb in 0..b {
                            let grow = &g[bb * c..(bb + 1) * c];
                            for row in d[bb * s * c..(bb + 1) * s * c].chunks_exact_mut(c) {
                                row.iter_mut().zip(grow).for_each(|(a, &v)| *a += v * inv);
                            }
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let np = vals[p].numel();
                        if rg[p] {
                            let d = acc(&mut grads, p, np);
                            d.iter_mut().zip(&g[off..off + np]).for_each(|(a, &v)| *a += v);
                        }
                        off += np;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let x = *x;
                    if rg[x] {
                        let r = vals[x].shape()[0];
                        let nx = vals[x].numel();
                        let width = nx.checked_div(r).unwrap_or(0);
                        let d = acc(&mut grads, x, nx);
                        for (k, &row) in rows.iter().enumerate() {
                            d[row * width..(row + 1) * width]
                                .iter_mut()
                                .zip(&g[k * width..(k + 1) * width])
                                .for_each(|(a, &v)| *a += v);
                        }
                    }
                }
                Op::Reshape { x } => {
                    let x = *x;
                    if rg[x] {
                        let d = acc(&mut grads, x, g.len());
                        d.iter_mut().zip(&g).for_each(|(a, &v)| *a += v);
                    }
                }
                Op::Transpose { x } => {
                    let x = *x;
                    if rg[x] {
                        let (m, nn) = (vals[x].shape()[0], vals[x].shape()[1]);
                        let d = acc(&mut grads, x, m * nn);
                        for r in 0..m {
                            for c in 0..nn {
                                d[r * nn + c] += g[c * m + r];
                            }
                        }
                    }
                }
                Op::L2Normalize { x, inv_norm } => {
                    let x = *x;
                    if rg[x] {
                        let y = vals[i].data();
                        let dd = vals[i].last_dim();
                        let d = acc(&mut grads, x, g.len());
                        for (r, ((drow, yrow), grow)) in d
                            .chunks_exact_mut(dd)
                            .zip(y.chunks_exact(dd))
                            .zip(g.chunks_exact(dd))
                            .enumerate()
                        {
                            let c = dot(grow, yrow);
                            let inv = inv_norm[r];
                            for j in 0..dd {
                                drow[j] += (grow[j] - yrow[j] * c) * inv;
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, b, geom, cols } => {
                    let (x, w, b, geom) = (*x, *w, *b, *geom);
                    let rows = geom.batch * geom.out_h * geom.out_w;
                    let kc = geom.kernel * geom.kernel * geom.in_ch;
                    let oc = geom.out_ch;
                    if rg[w] {
                        let dw = acc(&mut grads, w, kc * oc);
                        T::gemm(
                            kc,
                            rows,
                            oc,
                            T::one(),
                            cols,
                            (1, kc as isize),
                            &g,
                            (oc as isize, 1),
                            T::one(),
                            dw,
                            (oc as isize, 1),
                        );
                    }
                    if rg[b] {
                        let db = acc(&mut grads, b, oc);
                        for row in g.chunks_exact(oc) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    }
                    if rg[x] {
                        let mut dcols = vec![T::zero(); rows * kc];
                        T::gemm(
                            rows,
                            oc,
                            kc,
                            T::one(),
                            &g,
                            (oc as isize, 1),
                            vals[w].data(),
                            (1, oc as isize),
                            T::zero(),
                            &mut dcols,
                            (kc as isize, 1),
                        );
                        let dx_local = col2im(&dcols, &geom);
                        let d = acc(&mut grads, x, dx_local.len());
                        d.iter_mut().zip(&dx_local).for_each(|(a, &v)| *a += v);
                    }
                }
                Op::SegmentCrossEntropy {
                    logits,
                    segments,
                    targets,
                    probs,
                } => {
                    let l = *logits;
                    if rg[l] {
                        let (m, k) = (vals[l].shape()[0], vals[l].shape()[1]);
                        let scale = g[0] / T::lit(m as f64);
                        let d = acc(&mut grads, l, m * k);
                        let mut off = 0;
                        for r in 0..m {
                            let (start, len) = segments[r];
                            for j in 0..len {
                                let mut v = probs[off + j];
                                if j == targets[r] {
                                    v -= T::one();
                                }
                                d[r * k + start + j] += v * scale;
                            }
                            off += len;
                        }
                    }
                }
                Op::Nll { p, targets } => {
                    let p = *p;
                    if rg[p] {
                        let (m, k) = (vals[p].shape()[0], vals[p].shape()[1]);
                        let pd = vals[p].data();
                        let scale = g[0] / T::lit(m as f64);
                        let d = acc(&mut grads, p, m * k);
                        for (r, &t) in targets.iter().enumerate() {
                            d[r * k + t] -= scale / pd[r * k + t];
                        }
                    }
                }
                Op::Mse {
                    pred,
                    target,
                    weights,
                    wsum,
                } => {
                    let p = *pred;
                    if rg[p] {
                        let pd = vals[p].data();
                        let scale = T::lit(2.0) * g[0] / *wsum;
                        let d = acc(&mut grads, p, pd.len());
                        for j in 0..pd.len() {
                            let w = weights.as_ref().map_or(T::one(), |w| w[j]);
                            d[j] += scale * w * (pd[j] - target[j]);
                        }
                    }
                }
            }
        }
        // Leaves that require grad but were not reached get zeros.
        for (i, op) in self.ops.iter().enumerate() {
            if matches!(op, Op::Leaf { .. }) && rg[i] && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); self.values[i].numel()]);
            }
        }
        Ok(Gradients { tape: self.id, grads })
    }

    /// Runs [`Tape::backward`] and writes parameter gradients into `store`.
    ///
    /// Fails with [`Error::GradientsNotReset`] if any slot still holds a
    /// gradient from an earlier pass.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if store.has_grads() {
            return Err(Error::GradientsNotReset);
        }
        let grads = self.backward(loss)?;
        for (id, i) in self.param_leaves() {
            if let Some(g) = grads.grads[i].as_ref() {
                store.get_mut(id).grad = Some(g.clone());
            }
        }
        Ok(())
    }
}
