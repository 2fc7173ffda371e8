//! Flat `key = value` run configuration.
//!
//! Every setting of a run lives in one text file; unknown keys are
//! rejected. The canonical rendering ([`RunConfig::to_text`]) lists every
//! key in a fixed order and is what checkpoints embed and digest.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use tabimg_core::data::{ScenarioKind, SynthConfig};
use tabimg_core::model::ModelConfig;
use tabimg_core::ssl::PretrainConfig;
use tabimg_core::vision::VisionConfig;

use crate::error::{HarnessError, Result};
use crate::finetune::{FinetuneConfig, FinetuneMode};

/// Evaluation and sweep settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Missing rates for imputation reports.
    pub impute_sigmas: Vec<f64>,
    /// Also hide every categorical cell during imputation.
    pub mask_categorical: bool,
    pub sweep_kinds: Vec<ScenarioKind>,
    pub sweep_sigmas: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            impute_sigmas: vec![0.1, 0.3, 0.5],
            mask_categorical: false,
            sweep_kinds: ScenarioKind::ALL.to_vec(),
            sweep_sigmas: vec![0.0, 0.25, 0.5],
            sweep_seeds: vec![0, 1, 2],
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    /// Master seed: data generation, initialisation and every training loop.
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    /// Dataset directory; synthetic data is generated when absent.
    pub data: Option<PathBuf>,
    /// Input checkpoint for fine-tuning and evaluation.
    pub checkpoint: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| HarnessError::config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses a config file body, starting from defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    /// Assigns one key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (s, m, p, f, e) = (
            &mut self.synth,
            &mut self.model,
            &mut self.pretrain,
            &mut self.finetune,
            &mut self.eval,
        );
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),

            "samples" => s.samples = parse(key, v)?,
            "n_cols" => s.n_cols = parse(key, v)?,
            "cardinalities" => s.cardinalities = parse_list(key, v)?,
            "image_size" => s.image_size = parse(key, v)?,
            "latent_dim" => s.latent_dim = parse(key, v)?,
            "noise" => s.noise = parse(key, v)?,
            "classes" => s.classes = parse(key, v)?,

            "d_model" => m.d_model = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "tab_layers" => m.tab_layers = parse(key, v)?,
            "interact_layers" => m.interact_layers = parse(key, v)?,
            "proj_dim" => m.proj_dim = parse(key, v)?,
            "image_head_hidden" => m.image_head_hidden = parse(key, v)?,
            "tab_head_hidden" => m.tab_head_hidden = parse(key, v)?,
            "ff_mult" => m.ff_mult = parse(key, v)?,
            "temperature" => m.temperature = parse(key, v)?,
            "mask_ratio" => m.mask_ratio = parse(key, v)?,
            "vision_widths" => m.vision.widths = parse_list(key, v)?,
            "vision_strides" => m.vision.strides = parse_list(key, v)?,

            "epochs" => p.epochs = parse(key, v)?,
            "batch_size" => p.batch_size = parse(key, v)?,
            "corruption_rate" => p.corruption_rate = parse(key, v)?,
            "lr" => p.lr = parse(key, v)?,
            "warmup_epochs" => p.warmup_epochs = parse(key, v)?,
            "weight_decay" => p.weight_decay = parse(key, v)?,
            "clip_norm" => p.clip_norm = parse(key, v)?,
            "augment" => p.augment = parse(key, v)?,

            "finetune_mode" => f.mode = parse(key, v)?,
            "finetune_epochs" => f.epochs = parse(key, v)?,
            "finetune_batch_size" => f.batch_size = parse(key, v)?,
            "finetune_lr" => f.lr = parse(key, v)?,
            "finetune_weight_decay" => f.weight_decay = parse(key, v)?,
            "patience" => f.patience = parse(key, v)?,
            "min_delta" => f.min_delta = parse(key, v)?,

            "impute_sigmas" => e.impute_sigmas = parse_list(key, v)?,
            "mask_categorical" => e.mask_categorical = parse(key, v)?,
            "sweep_kinds" => e.sweep_kinds = parse_list(key, v)?,
            "sweep_sigmas" => e.sweep_sigmas = parse_list(key, v)?,
            "sweep_seeds" => e.sweep_seeds = parse_list(key, v)?,
            "eval_batch_size" => e.batch_size = parse(key, v)?,
            _ => return Err(HarnessError::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Propagates the shared settings and validates everything.
    pub fn finish(&mut self) -> Result<()> {
        self.synth.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        self.model.vision = VisionConfig {
            image_size: self.synth.image_size,
            d_model: self.model.d_model,
            ..self.model.vision.clone()
        };
        self.synth.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let rates = self.eval.impute_sigmas.iter().chain(&self.eval.sweep_sigmas);
        if rates.clone().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(HarnessError::config("missing rates must lie in [0, 1]"));
        }
        if self.eval.batch_size == 0 {
            return Err(HarnessError::config("eval_batch_size must be positive"));
        }
        Ok(())
    }

    /// Canonical text of every setting that affects results. Paths are
    /// left out so relocating a run does not change its digest.
    pub fn to_text(&self) -> String {
        let (s, m, p, f, e) = (&self.synth, &self.model, &self.pretrain, &self.finetune, &self.eval);
        let kinds: Vec<&str> = e.sweep_kinds.iter().map(|k| k.name()).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("samples", s.samples.to_string()),
            ("n_cols", s.n_cols.to_string()),
            ("cardinalities", join(&s.cardinalities)),
            ("image_size", s.image_size.to_string()),
            ("latent_dim", s.latent_dim.to_string()),
            ("noise", s.noise.to_string()),
            ("classes", s.classes.to_string()),
            ("d_model", m.d_model.to_string()),
            ("heads", m.heads.to_string()),
            ("tab_layers", m.tab_layers.to_string()),
            ("interact_layers", m.interact_layers.to_string()),
            ("proj_dim", m.proj_dim.to_string()),
            ("image_head_hidden", m.image_head_hidden.to_string()),
            ("tab_head_hidden", m.tab_head_hidden.to_string()),
            ("ff_mult", m.ff_mult.to_string()),
            ("temperature", m.temperature.to_string()),
            ("mask_ratio", m.mask_ratio.to_string()),
            ("vision_widths", join(&m.vision.widths)),
            ("vision_strides", join(&m.vision.strides)),
            ("epochs", p.epochs.to_string()),
            ("batch_size", p.batch_size.to_string()),
            ("corruption_rate", p.corruption_rate.to_string()),
            ("lr", p.lr.to_string()),
            ("warmup_epochs", p.warmup_epochs.to_string()),
            ("weight_decay", p.weight_decay.to_string()),
            ("clip_norm", p.clip_norm.to_string()),
            ("augment", p.augment.to_string()),
            ("finetune_mode", f.mode.to_string()),
            ("finetune_epochs", f.epochs.to_string()),
            ("finetune_batch_size", f.batch_size.to_string()),
            ("finetune_lr", f.lr.to_string()),
            ("finetune_weight_decay", f.weight_decay.to_string()),
            ("patience", f.patience.to_string()),
            ("min_delta", f.min_delta.to_string()),
            ("impute_sigmas", join(&e.impute_sigmas)),
            ("mask_categorical", e.mask_categorical.to_string()),
            ("sweep_kinds", kinds.join(",")),
            ("sweep_sigmas", join(&e.sweep_sigmas)),
            ("sweep_seeds", join(&e.sweep_seeds)),
            ("eval_batch_size", e.batch_size.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Hex SHA-256 of a config text.
pub fn digest(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl FromStr for FinetuneMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_probe" => Ok(FinetuneMode::LinearProbe),
            "full" => Ok(FinetuneMode::Full),
            _ => Err(HarnessError::config(format!(
                "fine-tuning mode {s:?}: expected linear_probe or full"
            ))),
        }
    }
}

impl Display for FinetuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FinetuneMode::LinearProbe => "linear_probe",
            FinetuneMode::Full => "full",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let cfg = RunConfig::parse("seed = 3\nlr = 0.0005 # comment\nsweep_kinds = mifm, LIFM\n").unwrap();
        assert_eq!(cfg.pretrain.seed, 3);
        assert_eq!(cfg.eval.sweep_kinds, [ScenarioKind::Mifm, ScenarioKind::Lifm]);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(RunConfig::parse("learning_rate = 1").unwrap_err().is_config());
        assert!(RunConfig::parse("heads = many").unwrap_err().is_config());
        assert!(RunConfig::parse("heads = 5").unwrap_err().is_config());
        assert!(RunConfig::parse("just words").unwrap_err().is_config());
    }

    #[test]
    fn digest_is_hex_sha256() {
        assert_eq!(
            digest(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
