//! Run configuration: one TOML file with `[data]`, `[synth]`, `[model]`,
//! `[diffusion]`, `[train]` and `[eval]` sections. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory or best-track CSV; synthetic data is generated when unset.
    pub path: Option<PathBuf>,
    /// History length in 6-h steps.
    pub m: usize,
    /// Forecast horizon in 6-h steps.
    pub n: usize,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, m: 4, n: 4, train_frac: 0.7, val_frac: 0.15 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    NoPiga,
    NoFuture,
    NoBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoPiga, Ablation::NoFuture, Ablation::NoBoth];

    pub fn tag(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoPiga => "no-piga",
            Ablation::NoFuture => "no-future",
            Ablation::NoBoth => "no-both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (none, no-piga, no-future, no-both)")))
    }

    pub fn piga_enabled(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoFuture)
    }

    pub fn future_env_enabled(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoPiga)
    }

    pub fn from_flags(piga: bool, future: bool) -> Self {
        match (piga, future) {
            (true, true) => Ablation::None,
            (false, true) => Ablation::NoPiga,
            (true, false) => Ablation::NoFuture,
            (false, false) => Ablation::NoBoth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_embedding: usize,
    pub d_env: usize,
    pub heads: usize,
    pub k_enc: usize,
    pub k_dec: usize,
    pub ffn_mult: usize,
    pub latent_hidden: usize,
    pub gru_hidden: usize,
    pub env_channels: usize,
    pub env_grid: usize,
    /// Patch side; the grid must be divisible by it.
    pub patch: usize,
    pub piga_enabled: bool,
    pub future_env_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 48,
            d_embedding: 16,
            d_env: 24,
            heads: 4,
            k_enc: 2,
            k_dec: 2,
            ffn_mult: 2,
            latent_hidden: 32,
            gru_hidden: 48,
            env_channels: 4,
            env_grid: 16,
            patch: 4,
            piga_enabled: true,
            future_env_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn d_sub(&self) -> usize {
        self.d_model / 3
    }

    pub fn ablation(&self) -> Ablation {
        Ablation::from_flags(self.piga_enabled, self.future_env_enabled)
    }

    pub fn apply(&mut self, a: Ablation) {
        self.piga_enabled = a.piga_enabled();
        self.future_env_enabled = a.future_env_enabled();
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        let dims = [
            self.d_model, self.d_embedding, self.d_env, self.heads, self.k_dec, self.ffn_mult,
            self.latent_hidden, self.gru_hidden, self.env_channels, self.env_grid, self.patch,
        ];
        if dims.contains(&0) {
            return bad("all sizes must be positive".into());
        }
        if self.d_model % 3 != 0 {
            return bad(format!("d_model = {} is not divisible by 3", self.d_model));
        }
        if self.d_model % self.heads != 0 || self.d_env % self.heads != 0 {
            return bad(format!("heads = {} must divide d_model and d_env", self.heads));
        }
        if self.env_grid % self.patch != 0 {
            return bad(format!("env grid {} is not divisible by patch {}", self.env_grid, self.patch));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    /// Desk schedule: T = 50, β linear in [1e-3, 0.2], so ᾱ_T ≈ 0.004 while
    /// 1/√ᾱ_t (the x̂0 error amplification) stays below about 16.
    fn default() -> Self {
        Self { steps: 50, beta_start: 1e-3, beta_end: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Stops early after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub grad_clip: f64,
    pub routing: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 64, lr: 1e-4, lr_min: 0.0, max_steps: None, grad_clip: 1.0, routing: true, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train: epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr || !(self.grad_clip > 0.0) {
            return Err(Error::Config("train: need 0 <= lr_min <= lr, lr > 0, grad_clip > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub members: usize,
    /// Caps the number of evaluated test windows (0 = all).
    pub max_windows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { members: 1, max_windows: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.m == 0 || self.data.n == 0 {
            return Err(Error::Config("data: m and n must be positive".into()));
        }
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        crate::diffusion::NoiseSchedule::build(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)?;
        if self.eval.members == 0 {
            return Err(Error::Config("eval: members must be positive".into()));
        }
        Ok(())
    }
}

/// Hash of everything that fixes the parameter layout and its meaning.
pub fn model_hash(m: &ModelConfig, d: &DiffusionConfig, window: (usize, usize)) -> String {
    let text = format!("{}\n{}\nm={} n={}", toml::to_string(m).unwrap(), toml::to_string(d).unwrap(), window.0, window.1);
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(RunConfig::from_toml("[model]\nd_modle = 48\n").is_err());
        assert!(RunConfig::from_toml("[model]\nd_model = 50\n").is_err());
        let c = RunConfig::from_toml("seed = 3\n[train]\nlr = 0.001\n").unwrap();
        assert_eq!((c.seed, c.train.lr, c.train.batch_size), (3, 0.001, 64));
    }

    #[test]
    fn ablation_flags() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::from_flags(a.piga_enabled(), a.future_env_enabled()), a);
            assert_eq!(Ablation::parse(a.tag()).unwrap(), a);
        }
        assert!(Ablation::parse("no-fengwu").is_err());
    }

    #[test]
    fn hash_tracks_ablation() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.apply(Ablation::NoPiga);
        let d = DiffusionConfig::default();
        assert_ne!(model_hash(&a, &d, (4, 4)), model_hash(&b, &d, (4, 4)));
        assert_eq!(model_hash(&a, &d, (4, 4)), model_hash(&a.clone(), &d, (4, 4)));
    }
}
