use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DomainError;
use crate::scalar::Probability;

/// Which counter is reported as the headline NFE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NfeMode {
    /// One engine-issued predict call counts once, whatever its batch size.
    #[default]
    BatchAsOne,
    /// Sum of the per-call forward costs reported by the oracle.
    RawForwards,
}

/// Conditioning used when verifying AR fallback drafts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ArVerifyMode {
    /// Every draft is checked against the base-state argmax.
    #[default]
    Base,
    /// Draft `k` is checked against the argmax under the state holding drafts `1..k`.
    Chain,
}

/// Thresholds, budgets and switches for a decode session.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig<P> {
    pub tau_high: P,
    pub tau_plan_lo: P,
    pub tau_plan_hi: P,
    pub tau_ar_lo: P,
    pub n_sparsity: usize,
    pub max_candidates: usize,
    pub gen_length: usize,
    pub block_size: usize,
    /// `None` means `4 * gen_length`.
    pub max_steps: Option<usize>,
    pub posterior_reuse: bool,
    pub nfe_mode: NfeMode,
    pub ar_verify: ArVerifyMode,
}

impl<P: Probability> DecodeConfig<P> {
    /// Desk-scale defaults, with `L = 16` and `S = 4`.
    pub fn desk_default() -> Self {
        Self::from_file_values(&ConfigFile::default())
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps.unwrap_or(4 * self.gen_length)
    }

    pub fn num_blocks(&self) -> usize {
        self.gen_length / self.block_size
    }

    /// Same config with cross-block expansion disabled.
    pub fn strict_blocks(&self) -> Self {
        Self {
            n_sparsity: 0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let unit = |name: &str, p: P| {
            let x = p.as_f64();
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(DomainError::InvalidConfig(format!("{name}={x} outside [0, 1]")))
            }
        };
        unit("tau_high", self.tau_high)?;
        unit("tau_plan_lo", self.tau_plan_lo)?;
        unit("tau_plan_hi", self.tau_plan_hi)?;
        unit("tau_ar_lo", self.tau_ar_lo)?;
        if !(self.tau_plan_lo < self.tau_plan_hi) {
            return Err(DomainError::InvalidConfig(
                "tau_plan_lo must be below tau_plan_hi".into(),
            ));
        }
        if self.tau_plan_hi > self.tau_high {
            return Err(DomainError::InvalidConfig(
                "planning band overlaps the high-confidence region (tau_plan_hi > tau_high)".into(),
            ));
        }
        if self.max_candidates == 0 {
            return Err(DomainError::InvalidConfig("max_candidates must be >= 1".into()));
        }
        if self.block_size == 0 || self.gen_length == 0 || !self.gen_length.is_multiple_of(self.block_size) {
            return Err(DomainError::InvalidConfig(format!(
                "gen_length {} must be a positive multiple of block_size {}",
                self.gen_length, self.block_size
            )));
        }
        if self.max_steps == Some(0) {
            return Err(DomainError::InvalidConfig("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn from_file_values(f: &ConfigFile) -> Self {
        Self {
            tau_high: P::from_f64_lossy(f.tau_high),
            tau_plan_lo: P::from_f64_lossy(f.tau_plan_lo),
            tau_plan_hi: P::from_f64_lossy(f.tau_plan_hi),
            tau_ar_lo: P::from_f64_lossy(f.tau_ar_lo),
            n_sparsity: f.n_sparsity,
            max_candidates: f.max_candidates,
            gen_length: f.gen_length,
            block_size: f.block_size,
            max_steps: f.max_steps,
            posterior_reuse: f.posterior_reuse,
            nfe_mode: f.nfe_mode,
            ar_verify: f.ar_verify,
        }
    }

    pub fn to_file_values(&self) -> ConfigFile {
        ConfigFile {
            tau_high: self.tau_high.as_f64(),
            tau_plan_lo: self.tau_plan_lo.as_f64(),
            tau_plan_hi: self.tau_plan_hi.as_f64(),
            tau_ar_lo: self.tau_ar_lo.as_f64(),
            n_sparsity: self.n_sparsity,
            max_candidates: self.max_candidates,
            gen_length: self.gen_length,
            block_size: self.block_size,
            max_steps: self.max_steps,
            posterior_reuse: self.posterior_reuse,
            nfe_mode: self.nfe_mode,
            ar_verify: self.ar_verify,
        }
    }

    /// Reads a JSON or `key=value` config file. Missing keys keep desk defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DomainError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let file = ConfigFile::parse(&text)?;
        let cfg = Self::from_file_values(&file);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Serialized form of [`DecodeConfig`], probabilities as decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub tau_high: f64,
    pub tau_plan_lo: f64,
    pub tau_plan_hi: f64,
    pub tau_ar_lo: f64,
    pub n_sparsity: usize,
    pub max_candidates: usize,
    pub gen_length: usize,
    pub block_size: usize,
    pub max_steps: Option<usize>,
    pub posterior_reuse: bool,
    pub nfe_mode: NfeMode,
    pub ar_verify: ArVerifyMode,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            tau_high: 0.9,
            tau_plan_lo: 0.2,
            tau_plan_hi: 0.65,
            tau_ar_lo: 0.1,
            n_sparsity: 5,
            max_candidates: 3,
            gen_length: 16,
            block_size: 4,
            max_steps: None,
            posterior_reuse: true,
            nfe_mode: NfeMode::BatchAsOne,
            ar_verify: ArVerifyMode::Base,
        }
    }
}

impl ConfigFile {
    /// JSON object if the first non-blank character is `{`, otherwise
    /// `key=value` lines (blank lines and `#` comments ignored).
    pub fn parse(text: &str) -> Result<Self, DomainError> {
        if text.trim_start().starts_with('{') {
            return serde_json::from_str(text).map_err(|e| DomainError::InvalidConfig(format!("json: {e}")));
        }
        let mut obj = serde_json::Map::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DomainError::InvalidConfig(format!("line {}: expected key=value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let value = match k {
                "posterior_reuse" => match v.to_ascii_uppercase().as_str() {
                    "ON" | "TRUE" | "1" => serde_json::Value::Bool(true),
                    "OFF" | "FALSE" | "0" => serde_json::Value::Bool(false),
                    _ => {
                        return Err(DomainError::InvalidConfig(format!(
                            "line {}: posterior_reuse expects ON/OFF",
                            lineno + 1
                        )))
                    }
                },
                "nfe_mode" | "ar_verify" => serde_json::Value::String(v.to_ascii_uppercase()),
                _ => serde_json::from_str(v)
                    .map_err(|_| DomainError::InvalidConfig(format!("line {}: bad value for {k}", lineno + 1)))?,
            };
            obj.insert(k.to_string(), value);
        }
        serde_json::from_value(serde_json::Value::Object(obj)).map_err(|e| DomainError::InvalidConfig(e.to_string()))
    }
}
