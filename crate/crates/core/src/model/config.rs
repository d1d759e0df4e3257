use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionOptions;
use crate::error::{Error, Result};

/// Which component to remove for an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Masked softmax attention in place of the rectified form.
    NoRelsa,
    /// EnCov kernels zeroed and frozen.
    NoEncov,
    /// Stage-2 heads read the layer input instead of the other stream.
    NoCcds,
}

impl Ablation {
    pub const VARIANTS: [Ablation; 3] = [Ablation::NoRelsa, Ablation::NoEncov, Ablation::NoCcds];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRelsa => "no_relsa",
            Ablation::NoEncov => "no_encov",
            Ablation::NoCcds => "no_ccds",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Ablation::Full, Ablation::NoRelsa, Ablation::NoEncov, Ablation::NoCcds]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation {s:?} (expected full, no_relsa, no_encov or no_ccds)"
                ))
            })
    }
}

/// Architecture hyperparameters.
///
/// The per-head width is `d₀ = d / (h_ressa + h_retsa + h_redasa)` and must
/// divide exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub h_ressa: usize,
    pub h_retsa: usize,
    pub h_redasa: usize,
    pub d_sk: usize,
    pub input_len: usize,
    pub horizon: usize,
    pub channels: usize,
    /// Laplacian embedding width.
    pub k: usize,
    pub tau: usize,
    pub geo_hops: usize,
    pub sem_top_k: usize,
    pub eps: f64,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            layers: 2,
            h_ressa: 2,
            h_retsa: 2,
            h_redasa: 4,
            d_sk: 256,
            input_len: 12,
            horizon: 12,
            channels: 1,
            k: 8,
            tau: 3,
            geo_hops: 2,
            sem_top_k: 10,
            eps: 1e-8,
            seed: 0,
            ablation: Ablation::Full,
        }
    }
}

impl ModelConfig {
    pub fn heads(&self) -> usize {
        self.h_ressa + self.h_retsa + self.h_redasa
    }

    pub fn d0(&self) -> usize {
        self.d / self.heads().max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("layers", self.layers),
            ("d_sk", self.d_sk),
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("k", self.k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.heads() == 0 {
            return Err(Error::Config("at least one attention head is required".into()));
        }
        if !self.d.is_multiple_of(self.heads()) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by the {} attention heads ({} + {} + {})",
                self.d,
                self.heads(),
                self.h_ressa,
                self.h_redasa,
                self.h_retsa
            )));
        }
        if self.d < 2 {
            return Err(Error::Config("d must be at least 2 for the positional encoding".into()));
        }
        if self.tau >= self.input_len && self.tau > 0 {
            return Err(Error::Config(format!(
                "tau = {} must be below input_len = {}",
                self.tau, self.input_len
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn attention_options(&self) -> AttentionOptions {
        AttentionOptions {
            rectified: self.ablation != Ablation::NoRelsa,
            encov: self.ablation != Ablation::NoEncov,
            eps: self.eps,
            tau: self.tau,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
