//! Per-session training and defense parameters agreed in the policy.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloneMode {
    /// `clone_count` random subsets of `clone_subset_size` clients.
    #[default]
    Random,
    /// One clone per client, each omitting exactly that client. The size
    /// fields are ignored.
    LeaveOneOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub min_clients: usize,
    pub max_rounds: u64,
    pub target_accuracy: f64,
    pub convergence_epsilon: f64,
    /// Number of consecutive small loss changes that count as a plateau;
    /// 0 disables plateau detection.
    pub patience: usize,
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub clone_count: usize,
    pub clone_subset_size: usize,
    pub outlier_threshold: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub clone_mode: CloneMode,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid session config: {0}")]
pub struct ConfigError(pub String);

impl SessionConfig {
    pub fn validate(&self, roster_size: usize) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError(m.to_string()));
        if self.min_clients < 1 {
            return fail("min_clients must be at least 1");
        }
        if self.min_clients > roster_size {
            return fail("min_clients exceeds the roster size");
        }
        if self.max_rounds < 1 {
            return fail("max_rounds must be at least 1");
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return fail("target_accuracy must lie in (0, 1]");
        }
        if !(self.convergence_epsilon > 0.0 && self.convergence_epsilon.is_finite()) {
            return fail("convergence_epsilon must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.local_epochs < 1 || self.batch_size < 1 {
            return fail("local_epochs and batch_size must be at least 1");
        }
        if !(self.outlier_threshold > 0.0 && self.outlier_threshold.is_finite()) {
            return fail("outlier_threshold must be positive");
        }
        if self.clone_mode == CloneMode::Random {
            if self.clone_count < 1 || self.clone_subset_size < 1 {
                return fail("clone_count and clone_subset_size must be at least 1");
            }
            if self.clone_subset_size > roster_size {
                return fail("clone_subset_size exceeds the roster size");
            }
        }
        Ok(())
    }
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            min_clients: 2,
            max_rounds: 30,
            target_accuracy: 0.95,
            convergence_epsilon: 1e-4,
            patience: 3,
            learning_rate: 0.1,
            local_epochs: 2,
            batch_size: 16,
            clone_count: 6,
            clone_subset_size: 2,
            outlier_threshold: 0.02,
            rng_seed: 1,
            clone_mode: CloneMode::Random,
        }
    }
}
