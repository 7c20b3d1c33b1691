use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters for mining. Every field has a default so partial JSON
/// documents (e.g. `{"k": 4}`) deserialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    /// Number of experts, one association per expert.
    pub k: usize,
    /// Weight of the retention term. `None` means `ln(genes_per_expert)`.
    pub lambda: Option<f64>,
    /// Minimum same-state probability required of embedded neighbors.
    pub gamma: f64,
    /// Weight of the neighbor-consistency penalty.
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature_start: f64,
    pub temperature_end: f64,
    /// Soft budget on the summed gene-gate mass of one expert.
    pub genes_per_expert: usize,
    pub latent_dim: usize,
    pub gating_hidden: usize,
    pub seed: u64,
    /// Histogram bins for per-gene entropies.
    pub bins: usize,
    /// Cap on neighbor-consistency pairs drawn per batch.
    pub max_pairs: usize,
    pub grad_clip: f64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self {
            k: 8,
            lambda: None,
            gamma: 0.1,
            beta: 1.0,
            learning_rate: 0.1,
            epochs: 200,
            batch_size: 256,
            temperature_start: 1.0,
            temperature_end: 0.1,
            genes_per_expert: 32,
            latent_dim: 16,
            gating_hidden: 64,
            seed: 1,
            bins: 16,
            max_pairs: 4096,
            grad_clip: 10.0,
        }
    }
}

impl MinerConfig {
    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn effective_lambda(&self) -> f64 {
        self.lambda
            .unwrap_or_else(|| (self.genes_per_expert.max(1) as f64).ln())
    }

    /// Temperature used during `epoch` (0-based): geometric from start to end.
    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.temperature_start;
        }
        let frac = epoch as f64 / (self.epochs - 1) as f64;
        self.temperature_start * (self.temperature_end / self.temperature_start).powf(frac)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 || self.latent_dim < 1 || self.gating_hidden < 1 {
            return bad("batch_size, latent_dim and gating_hidden must be positive");
        }
        if self.genes_per_expert < 1 || self.bins < 1 {
            return bad("genes_per_expert and bins must be positive");
        }
        let rates = [
            self.learning_rate,
            self.temperature_start,
            self.temperature_end,
            self.grad_clip,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("learning_rate, temperatures and grad_clip must be positive");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be nonnegative");
        }
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return bad("lambda must be nonnegative");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = MinerConfig::default();
        c.validate().unwrap();
        assert!((c.effective_lambda() - 32f64.ln()).abs() < 1e-15);
        assert_eq!(c.gamma, 0.1);
    }

    #[test]
    fn temperature_schedule_is_geometric() {
        let c = MinerConfig {
            epochs: 3,
            ..Default::default()
        };
        assert!((c.temperature(0) - 1.0).abs() < 1e-15);
        assert!((c.temperature(1) - 0.1f64.sqrt()).abs() < 1e-12);
        assert!((c.temperature(2) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_values() {
        for c in [
            MinerConfig::default().with_k(1),
            MinerConfig {
                gamma: 1.0,
                ..Default::default()
            },
            MinerConfig {
                temperature_end: 0.0,
                ..Default::default()
            },
            MinerConfig {
                epochs: 0,
                ..Default::default()
            },
            MinerConfig {
                learning_rate: -1.0,
                ..Default::default()
            },
        ] {
            assert_eq!(c.validate().unwrap_err().code(), "InvalidConfig");
        }
    }

    #[test]
    fn partial_json() {
        let c: MinerConfig = serde_json::from_str(r#"{"k": 4, "epochs": 10}"#).unwrap();
        assert_eq!(c.k, 4);
        assert_eq!(c.epochs, 10);
        assert_eq!(c.latent_dim, 16);
    }
}
