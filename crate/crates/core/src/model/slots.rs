//! Named parameter slots and their initial values.

use rand::Rng;

use super::ModelConfig;
use crate::data::TabularSchema;
use crate::error::{Error, Result};
use crate::init::{ones, trunc_normal, zeros, INIT_STD};
use crate::numeric::{ParamId, ParamStore, Scalar};
use crate::vision::VisionParams;

/// The independently trained parts of the network, identified by slot prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    ImageEncoder,
    TabularEncoder,
    Interaction,
    ImageProjection,
    TabularProjection,
    MatchingHead,
    ReconstructionHead,
    Classifiers,
}

impl ParamGroup {
    /// The seven groups updated during pre-training.
    pub const PRETRAIN: [ParamGroup; 7] = [
        ParamGroup::ImageEncoder,
        ParamGroup::TabularEncoder,
        ParamGroup::Interaction,
        ParamGroup::ImageProjection,
        ParamGroup::TabularProjection,
        ParamGroup::MatchingHead,
        ParamGroup::ReconstructionHead,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::ImageEncoder => "img.",
            ParamGroup::TabularEncoder => "tab.",
            ParamGroup::Interaction => "interact.",
            ParamGroup::ImageProjection => "head.gi.",
            ParamGroup::TabularProjection => "head.gt.",
            ParamGroup::MatchingHead => "head.itm.",
            ParamGroup::ReconstructionHead => "head.mtr.",
            ParamGroup::Classifiers => "clf.",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        ParamGroup::PRETRAIN
            .into_iter()
            .chain([ParamGroup::Classifiers])
            .find(|g| name.starts_with(g.prefix()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Attn {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Mlp {
    pub up: Dense,
    pub down: Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct TabLayer {
    pub ln1: Norm,
    pub attn: Attn,
    pub ln2: Norm,
    pub ff: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct InteractLayer {
    pub ln1: Norm,
    pub self_attn: Attn,
    pub ln2: Norm,
    pub cross: Attn,
    pub ln3: Norm,
    pub ff: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct Classifiers {
    pub classes: usize,
    pub image: Dense,
    pub tab: Dense,
    pub multi: Dense,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) struct Ids {
    pub cat_table: ParamId,
    pub cont: Dense,
    pub msk: ParamId,
    pub cls: ParamId,
    pub columns: ParamId,
    pub tab_layers: Vec<TabLayer>,
    pub tab_norm: Norm,
    pub vision: VisionParams,
    pub interact: Vec<InteractLayer>,
    pub interact_norm: Norm,
    pub image_proj: Mlp,
    pub tab_proj: Mlp,
    pub itm: Dense,
    pub mtr_cat: Dense,
    pub mtr_cont: Dense,
    pub classifiers: Option<Classifiers>,
}

struct Init<'a, T: Scalar, R: Rng + ?Sized> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Init<'_, T, R> {
    fn normal(&mut self, name: String, shape: &[usize]) -> Result<()> {
        let t = trunc_normal(self.rng, shape, INIT_STD);
        self.store.insert(name, t).map(|_| ())
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.normal(format!("{prefix}.W"), &[fan_in, fan_out])?;
        self.store.insert(format!("{prefix}.b"), zeros(&[fan_out]))?;
        Ok(())
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.gamma"), ones(&[d]))?;
        self.store.insert(format!("{prefix}.beta"), zeros(&[d]))?;
        Ok(())
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<()> {
        for p in ["q", "k", "v", "o"] {
            self.normal(format!("{prefix}.W{p}"), &[d, d])?;
            self.store.insert(format!("{prefix}.b{p}"), zeros(&[d]))?;
        }
        Ok(())
    }

    fn mlp(&mut self, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<()> {
        self.dense(&format!("{prefix}.up"), d_in, hidden)?;
        self.dense(&format!("{prefix}.down"), hidden, d_out)
    }
}

pub(super) fn init_slots<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    schema: &TabularSchema,
    rng: &mut R,
) -> Result<()> {
    let d = cfg.d_model;
    let n = schema.len();
    let cats = schema.total_categories();
    let hidden = cfg.ff_mult * d;
    let mut init = Init { store, rng };

    init.normal("tab.embed.A".into(), &[cats.max(1), d])?;
    init.normal("tab.embed.cont.W".into(), &[d])?;
    init.store.insert("tab.embed.cont.b", zeros(&[d]))?;
    init.normal("tab.embed.msk".into(), &[d])?;
    init.normal("tab.embed.cls".into(), &[d])?;
    init.normal("tab.embed.U".into(), &[n + 1, d])?;
    for l in 0..cfg.tab_layers {
        let p = format!("tab.layer.{l}");
        init.norm(&format!("{p}.ln1"), d)?;
        init.attn(&format!("{p}.attn"), d)?;
        init.norm(&format!("{p}.ln2"), d)?;
        init.mlp(&format!("{p}.ff"), d, hidden, d)?;
    }
    init.norm("tab.norm", d)?;

    VisionParams::init(init.store, &cfg.vision, init.rng)?;

    for l in 0..cfg.interact_layers {
        let p = format!("interact.{l}");
        init.norm(&format!("{p}.ln1"), d)?;
        init.attn(&format!("{p}.self"), d)?;
        init.norm(&format!("{p}.ln2"), d)?;
        init.attn(&format!("{p}.cross"), d)?;
        init.norm(&format!("{p}.ln3"), d)?;
        init.mlp(&format!("{p}.ff"), d, hidden, d)?;
    }
    init.norm("interact.norm", d)?;

    let c = cfg.vision.channels();
    init.mlp("head.gi", c, cfg.image_head_hidden, cfg.proj_dim)?;
    init.mlp("head.gt", d, cfg.tab_head_hidden, cfg.proj_dim)?;
    init.dense("head.itm", d, 2)?;
    init.dense("head.mtr.cat", d, cats.max(1))?;
    init.dense("head.mtr.cont", d, 1)?;
    Ok(())
}

pub(super) fn init_classifiers<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    classes: usize,
    rng: &mut R,
) -> Result<()> {
    let mut init = Init { store, rng };
    init.dense("clf.image", cfg.vision.channels(), classes)?;
    init.dense("clf.tab", cfg.d_model, classes)?;
    init.dense("clf.multi", cfg.d_model, classes)
}

fn dense<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Dense> {
    Ok(Dense {
        w: store.require(&format!("{prefix}.W"))?,
        b: store.require(&format!("{prefix}.b"))?,
    })
}

fn norm<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Norm> {
    Ok(Norm {
        gamma: store.require(&format!("{prefix}.gamma"))?,
        beta: store.require(&format!("{prefix}.beta"))?,
    })
}

fn attn<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Attn> {
    let proj = |p: &str| -> Result<Dense> {
        Ok(Dense {
            w: store.require(&format!("{prefix}.W{p}"))?,
            b: store.require(&format!("{prefix}.b{p}"))?,
        })
    };
    Ok(Attn {
        q: proj("q")?,
        k: proj("k")?,
        v: proj("v")?,
        o: proj("o")?,
    })
}

fn mlp<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Result<Mlp> {
    Ok(Mlp {
        up: dense(store, &format!("{prefix}.up"))?,
        down: dense(store, &format!("{prefix}.down"))?,
    })
}

fn expect_shape<T: Scalar>(store: &ParamStore<T>, id: ParamId, shape: &[usize]) -> Result<()> {
    let p = store.get(id);
    if p.value.shape() != shape {
        return Err(Error::config(format!(
            "slot {} has shape {:?}, expected {shape:?}",
            p.name,
            p.value.shape()
        )));
    }
    Ok(())
}

impl Ids {
    pub(super) fn lookup<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, schema: &TabularSchema) -> Result<Self> {
        let d = cfg.d_model;
        let ids = Ids {
            cat_table: store.require("tab.embed.A")?,
            cont: dense(store, "tab.embed.cont")?,
            msk: store.require("tab.embed.msk")?,
            cls: store.require("tab.embed.cls")?,
            columns: store.require("tab.embed.U")?,
            tab_layers: (0..cfg.tab_layers)
                .map(|l| {
                    let p = format!("tab.layer.{l}");
                    Ok(TabLayer {
                        ln1: norm(store, &format!("{p}.ln1"))?,
                        attn: attn(store, &format!("{p}.attn"))?,
                        ln2: norm(store, &format!("{p}.ln2"))?,
                        ff: mlp(store, &format!("{p}.ff"))?,
                    })
                })
                .collect::<Result<_>>()?,
            tab_norm: norm(store, "tab.norm")?,
            vision: VisionParams::lookup(store, &cfg.vision)?,
            interact: (0..cfg.interact_layers)
                .map(|l| {
                    let p = format!("interact.{l}");
                    Ok(InteractLayer {
                        ln1: norm(store, &format!("{p}.ln1"))?,
                        self_attn: attn(store, &format!("{p}.self"))?,
                        ln2: norm(store, &format!("{p}.ln2"))?,
                        cross: attn(store, &format!("{p}.cross"))?,
                        ln3: norm(store, &format!("{p}.ln3"))?,
                        ff: mlp(store, &format!("{p}.ff"))?,
                    })
                })
                .collect::<Result<_>>()?,
            interact_norm: norm(store, "interact.norm")?,
            image_proj: mlp(store, "head.gi")?,
            tab_proj: mlp(store, "head.gt")?,
            itm: dense(store, "head.itm")?,
            mtr_cat: dense(store, "head.mtr.cat")?,
            mtr_cont: dense(store, "head.mtr.cont")?,
            classifiers: None,
        };
        expect_shape(store, ids.cat_table, &[schema.total_categories().max(1), d])?;
        expect_shape(store, ids.columns, &[schema.len() + 1, d])?;
        expect_shape(store, ids.mtr_cat.w, &[d, schema.total_categories().max(1)])?;
        expect_shape(store, ids.image_proj.down.w, &[cfg.image_head_hidden, cfg.proj_dim])?;

        let classifiers = match store.id("clf.multi.W") {
            None => None,
            Some(w) => {
                let classes = store.get(w).value.last_dim();
                let c = Classifiers {
                    classes,
                    image: dense(store, "clf.image")?,
                    tab: dense(store, "clf.tab")?,
                    multi: dense(store, "clf.multi")?,
                };
                expect_shape(store, c.image.w, &[cfg.vision.channels(), classes])?;
                expect_shape(store, c.tab.w, &[d, classes])?;
                expect_shape(store, c.multi.w, &[d, classes])?;
                Some(c)
            }
        };
        Ok(Ids { classifiers, ..ids })
    }
}
