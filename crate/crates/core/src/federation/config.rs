use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent; used to check aggregation against a
    /// centralized step.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    LowestPrecision,
    FixedThreshold(f64),
}

impl DropPolicy {
    pub fn label(&self) -> String {
        match self {
            DropPolicy::LowestPrecision => "lowest_precision".into(),
            DropPolicy::FixedThreshold(t) => format!("threshold_{t}"),
        }
    }
}

fn default_min_active() -> usize {
    2
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub client_count: usize,
    pub server_rounds: usize,
    pub local_epochs: usize,
    /// Mini-batch size; 0 means one full batch per epoch.
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub personalization: bool,
    #[serde(default)]
    pub threshold_filtering: bool,
    #[serde(default = "default_policy")]
    pub drop_policy: DropPolicy,
    /// Disconnect on the first poor round instead of the second.
    #[serde(default)]
    pub immediate_disconnect: bool,
    pub eval_sample_count: usize,
    pub eval_start_round: usize,
    #[serde(default = "default_min_active")]
    pub min_active_clients: usize,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// When false the `wall_ms` column is written as 0 so logs compare
    /// byte for byte.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_policy() -> DropPolicy {
    DropPolicy::LowestPrecision
}

impl FederationConfig {
    /// Toy-scale defaults: 4 clients, 5 rounds of 5 local epochs.
    pub fn desk() -> Self {
        FederationConfig {
            client_count: 4,
            server_rounds: 5,
            local_epochs: 5,
            batch_size: 32,
            learning_rate: 2e-3,
            optimizer: OptimizerKind::Adam,
            personalization: false,
            threshold_filtering: false,
            drop_policy: DropPolicy::LowestPrecision,
            immediate_disconnect: false,
            eval_sample_count: 64,
            eval_start_round: 3,
            min_active_clients: 2,
            warmup_epochs: 5,
            seed: 0,
            record_wall_time: true,
        }
    }

    /// 10 clients, 10 rounds of 100 local epochs, lr 1e-4, evaluation
    /// from round 5 on 1000 samples per client.
    pub fn paper() -> Self {
        FederationConfig {
            client_count: 10,
            server_rounds: 10,
            local_epochs: 100,
            batch_size: 64,
            learning_rate: 1e-4,
            eval_sample_count: 1000,
            eval_start_round: 5,
            warmup_epochs: 20,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.server_rounds < 1 || self.local_epochs < 1 {
            return bad("server_rounds and local_epochs must be >= 1".into());
        }
        if self.client_count < 1 {
            return bad("client_count must be >= 1".into());
        }
        if self.threshold_filtering && self.client_count < 2 {
            return bad("threshold filtering needs at least 2 clients".into());
        }
        if self.eval_start_round < 1 || self.eval_start_round > self.server_rounds {
            return bad(format!(
                "eval_start_round {} outside [1, {}]",
                self.eval_start_round, self.server_rounds
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.min_active_clients < 1 {
            return bad("min_active_clients must be >= 1".into());
        }
        if let DropPolicy::FixedThreshold(t) = self.drop_policy {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("precision threshold {t} outside [0, 1]"));
            }
        }
        Ok(())
    }
}
