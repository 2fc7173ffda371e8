use super::slots::{Attn, Dense, Mlp, Norm};
use super::Model;
use crate::data::TabularBatch;
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Tensor, Var, BLOCKED};
use crate::vision;

/// Image encoder outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageFeatures {
    /// `[B, H', W', C]`
    pub spatial: Var,
    /// `[B, H'W', D]`
    pub seq: Var,
}

/// Reconstruction-head outputs for every feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct MtrPrediction {
    /// `[B * N_cat, total_categories]`, row `b * N_cat + c`; only the
    /// column's block (see `segments`) is meaningful.
    pub cat_logits: Option<Var>,
    /// `(offset, cardinality)` per logit row.
    pub segments: Vec<(usize, usize)>,
    /// `[B, N_cont]`
    pub cont: Option<Var>,
}

/// The three representations the classifiers read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Features {
    /// Pooled image map, `[B, C]`.
    pub image: Var,
    /// Tabular `[CLS]`, `[B, D]`.
    pub tab: Var,
    /// Multimodal `[CLS]`, `[B, D]`.
    pub multi: Var,
}

/// Additive mask `[B, N+1, N+1]`: token `q` sees key `k` when `q == k` or
/// `k` is not missing. Position 0 (`[CLS]`) is never missing.
pub fn build_attention_mask<T: Scalar>(batch: &TabularBatch) -> Tensor<T> {
    let s = batch.cols + 1;
    let blocked = T::lit(BLOCKED);
    let mut data = vec![T::zero(); batch.rows * s * s];
    for b in 0..batch.rows {
        for k in 1..s {
            if batch.is_missing(b, k - 1) {
                for q in 0..s {
                    if q != k {
                        data[(b * s + q) * s + k] = blocked;
                    }
                }
            }
        }
    }
    Tensor::new(&[batch.rows, s, s], data).expect("mask buffer matches its shape")
}

impl<T: Scalar> Model<T> {
    fn dense(&self, tape: &mut Tape<T>, d: Dense, x: Var) -> Result<Var> {
        let w = tape.param(&self.params, d.w)?;
        let b = tape.param(&self.params, d.b)?;
        tape.linear(x, w, Some(b))
    }

    fn norm(&self, tape: &mut Tape<T>, n: Norm, x: Var) -> Result<Var> {
        let g = tape.param(&self.params, n.gamma)?;
        let b = tape.param(&self.params, n.beta)?;
        tape.layer_norm(x, g, b)
    }

    fn mlp(&self, tape: &mut Tape<T>, m: Mlp, x: Var) -> Result<Var> {
        let h = self.dense(tape, m.up, x)?;
        let h = tape.gelu(h)?;
        self.dense(tape, m.down, h)
    }

    fn attend(&self, tape: &mut Tape<T>, a: Attn, queries: Var, keys: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let q = self.dense(tape, a.q, queries)?;
        let k = self.dense(tape, a.k, keys)?;
        let v = self.dense(tape, a.v, keys)?;
        let h = tape.attention(q, k, v, self.cfg.heads, mask)?;
        self.dense(tape, a.o, h)
    }

    /// `[B, N+1, D]` token embeddings: `[CLS]`, then one token per column
    /// (`[MSK]` where missing, a category row, or the scaled continuous
    /// value), plus the column embedding.
    pub fn embed_tabular(&self, tape: &mut Tape<T>, batch: &TabularBatch) -> Result<Var> {
        let schema = &self.schema;
        let (rows, n) = (batch.rows, schema.len());
        if batch.cols != n {
            return Err(Error::shape(
                "embed_tabular",
                format!("{} columns, schema has {n}", batch.cols),
            ));
        }
        let d = self.cfg.d_model;
        let n_cat = schema.n_categorical();
        let n_cont = n - n_cat;
        let cats = schema.total_categories().max(1);
        let offsets = schema.category_offsets();

        let cls = tape.param(&self.params, self.ids.cls)?;
        let cls = tape.reshape(cls, &[1, d])?;
        let msk = tape.param(&self.params, self.ids.msk)?;
        let msk = tape.reshape(msk, &[1, d])?;
        let table = tape.param(&self.params, self.ids.cat_table)?;
        let mut parts = vec![cls, msk, table];
        if n_cont > 0 {
            let mut xc = Vec::with_capacity(rows * n_cont);
            for b in 0..rows {
                for j in n_cat..n {
                    let v = if batch.is_missing(b, j) { 0.0 } else { batch.value(b, j) };
                    xc.push(T::of_f32(v));
                }
            }
            let x = tape.constant(Tensor::new(&[rows * n_cont, 1], xc)?)?;
            let w = tape.param(&self.params, self.ids.cont.w)?;
            let w = tape.reshape(w, &[1, d])?;
            let bias = tape.param(&self.params, self.ids.cont.b)?;
            parts.push(tape.linear(x, w, Some(bias))?);
        }
        let all = tape.concat_rows(&parts)?;

        let cont_base = 2 + cats;
        let mut index = Vec::with_capacity(rows * (n + 1));
        for b in 0..rows {
            index.push(0);
            #[allow(clippy::needless_range_loop)]
            for c in 0..n {
                if batch.is_missing(b, c) {
                    index.push(1);
                } else if c < n_cat {
                    let v = batch.value(b, c);
                    let card = schema.columns[c].cardinality;
                    if !(v >= 0.0 && v.fract() == 0.0 && (v as usize) < card) {
                        return Err(Error::Index {
                            op: "embed_tabular",
                            index: v.max(0.0) as usize,
                            bound: card,
                        });
                    }
                    index.push(2 + offsets[c] + v as usize);
                } else {
                    index.push(cont_base + b * n_cont + (c - n_cat));
                }
            }
        }
        let e = tape.gather_rows(all, &index)?;
        let e = tape.reshape(e, &[rows, n + 1, d])?;
        let u = tape.param(&self.params, self.ids.columns)?;
        tape.add_broadcast(e, u)
    }

    /// Pre-norm transformer stack with masked self-attention and a final
    /// layer norm.
    pub fn tabular_encode(&self, tape: &mut Tape<T>, e: Var, mask: &Tensor<T>) -> Result<Var> {
        let mut x = e;
        for layer in &self.ids.tab_layers {
            let h = self.norm(tape, layer.ln1, x)?;
            let a = self.attend(tape, layer.attn, h, h, Some(mask))?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, layer.ln2, x)?;
            let f = self.mlp(tape, layer.ff, h)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, self.ids.tab_norm, x)
    }

    pub fn encode_tabular(&self, tape: &mut Tape<T>, batch: &TabularBatch) -> Result<Var> {
        let e = self.embed_tabular(tape, batch)?;
        let mask = build_attention_mask(batch);
        self.tabular_encode(tape, e, &mask)
    }

    pub fn encode_image(&self, tape: &mut Tape<T>, images: &Tensor<f32>) -> Result<ImageFeatures> {
        let x = tape.constant(images.cast())?;
        let vcfg = &self.cfg.vision;
        let spatial = vision::encode_image(tape, &self.params, &self.ids.vision, vcfg, x)?;
        let seq = vision::project_to_sequence(tape, &self.params, &self.ids.vision, spatial)?;
        Ok(ImageFeatures { spatial, seq })
    }

    /// Multi-head cross-attention of one interaction layer: queries from
    /// `f`, keys and values from the image sequence, heads mixed by the
    /// output projection.
    pub fn cross_attention(&self, tape: &mut Tape<T>, layer: usize, f: Var, seq: Var) -> Result<Var> {
        let l = self
            .ids
            .interact
            .get(layer)
            .ok_or_else(|| Error::config(format!("no interaction layer {layer}")))?;
        self.attend(tape, l.cross, f, seq, None)
    }

    /// Interaction stack starting from the tabular encoding.
    pub fn interaction(&self, tape: &mut Tape<T>, t: Var, seq: Var) -> Result<Var> {
        let mut x = t;
        for (i, layer) in self.ids.interact.iter().enumerate() {
            let h = self.norm(tape, layer.ln1, x)?;
            let a = self.attend(tape, layer.self_attn, h, h, None)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, layer.ln2, x)?;
            let c = self.cross_attention(tape, i, h, seq)?;
            x = tape.add(x, c)?;
            let h = self.norm(tape, layer.ln3, x)?;
            let f = self.mlp(tape, layer.ff, h)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, self.ids.interact_norm, x)
    }

    /// Row 0 of every sequence in `[B, S, D]`.
    pub fn cls_rows(tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("cls_rows", format!("{s:?}")));
        }
        let flat = tape.reshape(x, &[s[0] * s[1], s[2]])?;
        let rows: Vec<usize> = (0..s[0]).map(|b| b * s[1]).collect();
        tape.gather_rows(flat, &rows)
    }

    /// Unit-norm image projection from the pooled spatial map.
    pub fn project_image(&self, tape: &mut Tape<T>, spatial: Var) -> Result<Var> {
        let pooled = vision::pool_image(tape, spatial)?;
        let z = self.mlp(tape, self.ids.image_proj, pooled)?;
        tape.l2_normalize_rows(z)
    }

    /// Unit-norm tabular projection from the `[CLS]` row.
    pub fn project_tabular(&self, tape: &mut Tape<T>, t: Var) -> Result<Var> {
        let cls = Self::cls_rows(tape, t)?;
        let z = self.mlp(tape, self.ids.tab_proj, cls)?;
        tape.l2_normalize_rows(z)
    }

    /// Matched/unmatched logits `[B, 2]` from the multimodal `[CLS]`.
    pub fn itm_logits(&self, tape: &mut Tape<T>, f: Var) -> Result<Var> {
        let cls = Self::cls_rows(tape, f)?;
        self.dense(tape, self.ids.itm, cls)
    }

    /// Category logits and continuous values predicted from feature rows
    /// `1..=N` of `f`.
    pub fn mtr_predict(&self, tape: &mut Tape<T>, f: Var) -> Result<MtrPrediction> {
        let s = tape.shape(f).to_vec();
        let n = self.schema.len();
        if s.len() != 3 || s[1] != n + 1 {
            return Err(Error::shape("mtr_predict", format!("{s:?}, expected N+1 = {}", n + 1)));
        }
        let (rows, d) = (s[0], s[2]);
        let n_cat = self.schema.n_categorical();
        let n_cont = n - n_cat;
        let flat = tape.reshape(f, &[rows * (n + 1), d])?;

        let mut segments = Vec::new();
        let cat_logits = if n_cat > 0 {
            let idx: Vec<usize> = (0..rows)
                .flat_map(|b| (0..n_cat).map(move |c| b * (n + 1) + 1 + c))
                .collect();
            let h = tape.gather_rows(flat, &idx)?;
            let blocks: Vec<(usize, usize)> = self
                .schema
                .category_offsets()
                .into_iter()
                .zip(self.schema.cardinalities())
                .collect();
            for _ in 0..rows {
                segments.extend_from_slice(&blocks);
            }
            Some(self.dense(tape, self.ids.mtr_cat, h)?)
        } else {
            None
        };
        let cont = if n_cont > 0 {
            let idx: Vec<usize> = (0..rows)
                .flat_map(|b| (0..n_cont).map(move |j| b * (n + 1) + 1 + n_cat + j))
                .collect();
            let h = tape.gather_rows(flat, &idx)?;
            let y = self.dense(tape, self.ids.mtr_cont, h)?;
            Some(tape.reshape(y, &[rows, n_cont])?)
        } else {
            None
        };
        Ok(MtrPrediction {
            cat_logits,
            segments,
            cont,
        })
    }

    /// Pooled image, tabular `[CLS]` and multimodal `[CLS]` for a batch.
    pub fn features(&self, tape: &mut Tape<T>, images: &Tensor<f32>, batch: &TabularBatch) -> Result<Features> {
        let img = self.encode_image(tape, images)?;
        let t = self.encode_tabular(tape, batch)?;
        let f = self.interaction(tape, t, img.seq)?;
        Ok(Features {
            image: vision::pool_image(tape, img.spatial)?,
            tab: Self::cls_rows(tape, t)?,
            multi: Self::cls_rows(tape, f)?,
        })
    }

    /// Mean of the three classifiers' softmax outputs, `[B, K]`.
    pub fn classifier_probs(&self, tape: &mut Tape<T>, feats: &Features) -> Result<Var> {
        let c = self
            .ids
            .classifiers
            .ok_or_else(|| Error::config("model has no classifiers; fine-tune first"))?;
        let mut sum = None;
        for (dense, x) in [(c.image, feats.image), (c.tab, feats.tab), (c.multi, feats.multi)] {
            let logits = self.dense(tape, dense, x)?;
            let p = tape.softmax_rows(logits, None)?;
            sum = Some(match sum {
                None => p,
                Some(s) => tape.add(s, p)?,
            });
        }
        tape.scale(sum.expect("three classifiers"), T::lit(1.0 / 3.0))
    }

    /// Ensemble class probabilities without recording gradients for later use.
    pub fn ensemble_classify(&self, images: &Tensor<f32>, batch: &TabularBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let feats = self.features(&mut tape, images, batch)?;
        let p = self.classifier_probs(&mut tape, &feats)?;
        Ok(tape.value(p).clone())
    }
}
