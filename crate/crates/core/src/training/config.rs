//! Run configuration: defaults, named presets and JSON overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::connectome::ConnectomeConfig;
use crate::error::{Error, Result};
use crate::hgan::{DemographicEncoding, DvConfig, GatEdges};
use crate::popgraph::PopGraphConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Node-embedding width `d`, shared by the population GAT output.
    pub d: usize,
    pub d_t: usize,
    pub d_att: usize,
    pub d_h: usize,
    /// When false the encoder skips global attention (`λ = 0`).
    pub global_attention: bool,
    pub gat_edges: GatEdges,
    pub demographic_encoding: DemographicEncoding,
    pub dv: DvConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_t: 32,
            d_att: 16,
            d_h: 32,
            global_attention: true,
            gat_edges: GatEdges::Weighted,
            demographic_encoding: DemographicEncoding::Ordinal,
            dv: DvConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub dropout: f64,
    pub edge_dropout: f64,
    /// KL weight of the biomarker bottleneck.
    pub beta: f64,
    /// KL weight of the heterogeneous bottleneck and MI damping strength.
    pub beta_h: f64,
    /// Weight of `L_BIB` in the total loss.
    pub zeta: f64,
    /// Weight of `L_HG` in the total loss.
    pub omega: f64,
    /// Weight of `L_struct` inside `L_HG`.
    pub mu: f64,
    /// Weight of `L_sparse` inside `L_HG`.
    pub kappa: f64,
    /// Weight of `L_MI` inside `L_HG`.
    pub eta: f64,
    pub warmup_epochs: usize,
    /// Population graph rebuild period during the second phase.
    pub refresh_every: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 5e-3,
            max_epochs: 300,
            patience: 30,
            dropout: 0.5,
            edge_dropout: 0.5,
            beta: 0.8,
            beta_h: 0.5,
            zeta: 1.0,
            omega: 1.0,
            mu: 0.1,
            kappa: 0.01,
            eta: 0.1,
            warmup_epochs: 50,
            refresh_every: 50,
            folds: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("beta", self.beta),
            ("beta_h", self.beta_h),
            ("zeta", self.zeta),
            ("omega", self.omega),
            ("mu", self.mu),
            ("kappa", self.kappa),
            ("eta", self.eta),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        for (name, p) in [("dropout", self.dropout), ("edge_dropout", self.edge_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if self.max_epochs == 0 || self.refresh_every == 0 {
            return Err(Error::invalid("max_epochs and refresh_every must be positive"));
        }
        if self.warmup_epochs > self.max_epochs {
            return Err(Error::invalid("warmup_epochs exceeds max_epochs"));
        }
        if self.folds < 3 {
            return Err(Error::invalid(format!("need at least 3 folds, got {}", self.folds)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<String>,
    pub output: Option<String>,
}

/// Everything a run needs; `config.json` is this struct serialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub preset: Option<String>,
    pub connectome: ConnectomeConfig,
    pub popgraph: PopGraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            preset: None,
            connectome: ConnectomeConfig::default(),
            popgraph: PopGraphConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

pub const PRESETS: [&str; 2] = ["abide-like", "adhd-like"];

/// `(beta, beta_h)` of a named preset.
pub fn preset_betas(name: &str) -> Result<(f64, f64)> {
    match name {
        "abide-like" => Ok((0.8, 0.5)),
        "adhd-like" => Ok((1.0, 0.8)),
        other => Err(Error::invalid(format!(
            "unknown preset `{other}` (expected one of {})",
            PRESETS.join(", ")
        ))),
    }
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported config schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.connectome.validate()?;
        self.popgraph.validate()?;
        self.train.validate()?;
        let m = &self.model;
        if m.d == 0 || m.d_t < 2 || m.d_att < 2 || m.d_h < 2 {
            return Err(Error::invalid("model widths: need d ≥ 1, d_t, d_att, d_h ≥ 2"));
        }
        if m.dv.hidden == 0 || !(m.dv.lr > 0.0) {
            return Err(Error::invalid("dv.hidden and dv.lr must be positive"));
        }
        Ok(())
    }

    /// Defaults, then the preset named in `overrides` (if any), then the
    /// overrides themselves. Unknown keys are rejected.
    pub fn resolve(overrides: &Value) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if !overrides.is_object() && !overrides.is_null() {
            return Err(Error::invalid("configuration must be a JSON object"));
        }
        if let Some(name) = overrides.get("preset").and_then(Value::as_str) {
            let (beta, beta_h) = preset_betas(name)?;
            merge(&mut value, &serde_json::json!({ "train": { "beta": beta, "beta_h": beta_h } }));
        }
        if !overrides.is_null() {
            merge(&mut value, overrides);
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::invalid(format!("configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::invalid(format!("configuration: {e}")))?;
        Self::resolve(&v)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn preset_sets_betas() {
        let c = RunConfig::resolve(&json!({ "preset": "adhd-like" })).unwrap();
        assert_eq!((c.train.beta, c.train.beta_h), (1.0, 0.8));
        let c = RunConfig::resolve(&json!({ "preset": "abide-like", "train": { "beta": 2.0 } })).unwrap();
        assert_eq!((c.train.beta, c.train.beta_h), (2.0, 0.5));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(&json!({ "train": { "learning_rate": 0.1 } })).is_err());
        assert!(RunConfig::resolve(&json!({ "extra": 1 })).is_err());
        assert!(RunConfig::resolve(&json!({ "preset": "nope" })).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::resolve(&json!({ "model": { "global_attention": false }, "train": { "zeta": 0.0 } })).unwrap();
        let back = RunConfig::from_json_str(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::resolve(&json!({ "train": { "dropout": 1.0 } })).is_err());
        assert!(RunConfig::resolve(&json!({ "train": { "folds": 2 } })).is_err());
        assert!(RunConfig::resolve(&json!({ "model": { "d_h": 1 } })).is_err());
    }
}
