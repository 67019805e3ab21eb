//! Run configuration: one flat JSON object covering training, probing and
//! scoring, plus the shipped presets.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vgcl_core::objective::DEFAULT_TAU;
use vgcl_core::uncertainty::DEFAULT_DRAWS;
use vgcl_core::{AugmentConfig, MaskMode, Mode, Negatives, PriorConfig, TrainConfig};

/// `(file name, contents)` of every shipped preset.
pub const PRESETS: [(&str, &str); 9] = [
    ("cora_infonce.json", include_str!("../../../presets/cora_infonce.json")),
    ("cora_vi.json", include_str!("../../../presets/cora_vi.json")),
    ("cora_vgcl.json", include_str!("../../../presets/cora_vgcl.json")),
    ("citeseer_infonce.json", include_str!("../../../presets/citeseer_infonce.json")),
    ("citeseer_vi.json", include_str!("../../../presets/citeseer_vi.json")),
    ("citeseer_vgcl.json", include_str!("../../../presets/citeseer_vgcl.json")),
    ("pubmed_infonce.json", include_str!("../../../presets/pubmed_infonce.json")),
    ("pubmed_vi.json", include_str!("../../../presets/pubmed_vi.json")),
    ("pubmed_vgcl.json", include_str!("../../../presets/pubmed_vgcl.json")),
];

fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_dim() -> usize {
    128
}
fn default_embedding_samples() -> usize {
    100
}
fn default_probe_runs() -> usize {
    20
}
fn default_draws() -> usize {
    DEFAULT_DRAWS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub mode: Mode,
    pub epochs: usize,
    pub lr: f64,
    pub samples: usize,

    pub p_f1: f64,
    pub p_f2: f64,
    pub p_e1: f64,
    pub p_e2: f64,
    #[serde(default)]
    pub mask_mode: MaskMode,

    /// Prior weight variance; required by the variational modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_sq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
    /// Squared hyperprior mean of the spread parameters, as tabulated.
    /// The mean used is its nonnegative root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_p_sq: Option<f64>,
    /// Hyperprior mean taken as is; wins over `mu_p_sq`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_p_raw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_p_sq: Option<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hp_scale: Option<f64>,
    #[serde(default)]
    pub negatives: Negatives,

    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub hidden: usize,
    #[serde(default = "default_dim")]
    pub out: usize,
    #[serde(default = "default_dim")]
    pub proj_hidden: usize,
    #[serde(default)]
    pub strict: bool,

    /// Weight samples averaged per embedding.
    #[serde(default = "default_embedding_samples")]
    pub embedding_samples: usize,
    #[serde(default = "default_probe_runs")]
    pub probe_runs: usize,
    #[serde(default)]
    pub standardize: bool,
    /// Draws `M` behind the uncertainty scores.
    #[serde(default = "default_draws")]
    pub draws: usize,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).with_context(|| format!("invalid config {origin}"))?;
        cfg.validate().with_context(|| format!("invalid config {origin}"))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Shipped preset for `dataset` and `model` (`infonce`, `vi` or `vgcl`).
    pub fn preset(dataset: &str, model: &str) -> Result<Self> {
        let name = format!("{dataset}_{model}.json");
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .with_context(|| format!("no preset {name}"))?;
        Self::parse(text, &name)
    }

    pub fn mu_p(&self) -> Result<Option<f64>> {
        if let Some(raw) = self.mu_p_raw {
            if self.mu_p_sq.is_some() {
                log::warn!("mu_p_raw = {raw} overrides mu_p_sq");
            }
            return Ok(Some(raw));
        }
        match self.mu_p_sq {
            Some(v) if v < 0.0 || !v.is_finite() => bail!("mu_p_sq must be a nonnegative number, got {v}"),
            Some(v) => Ok(Some(v.sqrt())),
            None => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?.validate()?;
        if self.embedding_samples == 0 {
            bail!("embedding_samples must be >= 1");
        }
        if self.probe_runs == 0 {
            bail!("probe_runs must be >= 1");
        }
        if self.draws < 2 {
            bail!("draws must be >= 2, got {}", self.draws);
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let variational = self.mode != Mode::Infonce;
        let sigma_sq = match (self.sigma_sq, variational) {
            (Some(s), _) => s,
            (None, true) => bail!("{} mode needs sigma_sq", self.mode.as_str()),
            // Unused without a weight distribution.
            (None, false) => 1.0,
        };
        if !variational && (self.sigma0.is_some() || self.mu_p_sq.is_some() || self.sigma_p_sq.is_some()) {
            log::warn!("hyperprior settings are ignored in infonce mode");
        }
        let prior = PriorConfig {
            sigma_sq,
            sigma0: self.sigma0,
            mu_p: self.mu_p()?,
            sigma_p_sq: self.sigma_p_sq,
            tau: self.tau,
            kl_scale: self.kl_scale,
            hp_scale: self.hp_scale,
            negatives: self.negatives,
        };
        Ok(TrainConfig {
            mode: self.mode,
            epochs: self.epochs,
            lr: self.lr,
            samples: self.samples,
            augment: AugmentConfig {
                p_f1: self.p_f1,
                p_f2: self.p_f2,
                p_e1: self.p_e1,
                p_e2: self.p_e2,
                mask_mode: self.mask_mode,
            },
            prior,
            seed: self.seed,
            hidden: self.hidden,
            out: self.out,
            proj_hidden: self.proj_hidden,
            strict: self.strict,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
