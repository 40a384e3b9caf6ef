use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SealError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: "adamw".to_string(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Hyperparameters of one adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Number of auxiliary embeddings optimized in parallel.
    pub k: usize,
    pub lambda_bind: f64,
    pub lambda_supp: f64,
    pub lambda_spatial: f64,
    pub delta: f64,
    pub base_seed: u64,
    /// Std of the Gaussian jitter applied to each auxiliary's initialization.
    pub init_jitter: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            steps: 250,
            learning_rate: 1.5e-4,
            batch_size: 1,
            k: 5,
            lambda_bind: 1.0,
            lambda_supp: 1.0,
            lambda_spatial: 1.0,
            delta: 1e-8,
            base_seed: 0,
            init_jitter: 5e-4,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl AdaptationConfig {
    /// The control arm: one trajectory, no spatial term.
    pub fn control(&self) -> Self {
        Self {
            k: 1,
            lambda_spatial: 0.0,
            ..self.clone()
        }
    }

    pub fn is_control(&self) -> bool {
        self.k == 1 && self.lambda_spatial == 0.0
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        validate_config(serde_json::from_str(text)?)
    }
}

/// Returns `cfg` unchanged when valid, otherwise every violated constraint.
pub fn validate_config(cfg: AdaptationConfig) -> Result<AdaptationConfig> {
    let mut errs = Vec::new();
    if cfg.steps < 1 {
        errs.push("steps must be ≥ 1".to_string());
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        errs.push("learning_rate must be > 0".to_string());
    }
    if cfg.batch_size < 1 {
        errs.push("batch_size must be ≥ 1".to_string());
    }
    if cfg.k < 1 {
        errs.push("k must be ≥ 1".to_string());
    }
    for (name, v) in [
        ("lambda_bind", cfg.lambda_bind),
        ("lambda_supp", cfg.lambda_supp),
        ("lambda_spatial", cfg.lambda_spatial),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            errs.push(format!("{name} must be ≥ 0"));
        }
    }
    if !(cfg.delta > 0.0 && cfg.delta.is_finite()) {
        errs.push("delta must be > 0".to_string());
    }
    if !(cfg.init_jitter >= 0.0 && cfg.init_jitter.is_finite()) {
        errs.push("init_jitter must be ≥ 0".to_string());
    }
    let o = &cfg.optimizer;
    if o.kind != "adamw" {
        errs.push(format!(
            "optimizer.kind must be \"adamw\", got \"{}\"",
            o.kind
        ));
    }
    if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
        errs.push("optimizer betas must lie in [0, 1)".to_string());
    }
    if !(o.eps > 0.0) {
        errs.push("optimizer.eps must be > 0".to_string());
    }
    if !(o.weight_decay >= 0.0) {
        errs.push("optimizer.weight_decay must be ≥ 0".to_string());
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(SealError::InvalidConfig(errs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn violations(cfg: AdaptationConfig) -> Vec<String> {
        match validate_config(cfg) {
            Err(SealError::InvalidConfig(v)) => v,
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_are_accepted() {
        let cfg = validate_config(AdaptationConfig::default()).unwrap();
        assert_eq!(cfg.steps, 250);
        assert_eq!(cfg.learning_rate, 1.5e-4);
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.optimizer.beta2, 0.999);
    }

    #[test]
    fn zero_steps_rejected() {
        let v = violations(AdaptationConfig {
            steps: 0,
            ..Default::default()
        });
        assert_eq!(v, vec!["steps must be ≥ 1"]);
    }

    #[test]
    fn zero_delta_rejected() {
        let v = violations(AdaptationConfig {
            delta: 0.0,
            ..Default::default()
        });
        assert_eq!(v, vec!["delta must be > 0"]);
    }

    #[test]
    fn every_violation_is_reported() {
        let v = violations(AdaptationConfig {
            steps: 0,
            k: 0,
            delta: -1.0,
            lambda_bind: -0.5,
            ..Default::default()
        });
        assert_eq!(v.len(), 4, "{v:?}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(AdaptationConfig::from_json(r#"{"steps": 10, "bogus": 1}"#).is_err());
        let cfg = AdaptationConfig::from_json(r#"{"steps": 10}"#).unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.k, 5);
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg = AdaptationConfig {
            base_seed: 42,
            ..Default::default()
        };
        let back = AdaptationConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(cfg.hash(), AdaptationConfig::default().hash());
    }
}
