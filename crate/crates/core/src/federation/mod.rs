//! Round engine: client dropout, local training, model and prototype
//! aggregation.

mod local;
mod simulation;

use serde::{Deserialize, Serialize};

pub use local::{local_train, objective_and_grad, Augmenter, ClientUpdate, Objective};
pub use simulation::{Checkpoint, FederationSetup, ServerState, Simulation};

use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::real::Real;
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutKind {
    /// Fresh draw every round.
    Independent,
    /// One draw per window of `period` rounds.
    Periodic,
}

/// Per-client success probability of returning an update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutModel {
    pub kind: DropoutKind,
    pub p: f64,
    #[serde(default = "default_period")]
    pub period: usize,
    /// Overrides `p` for clients of cluster `k` when present.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cluster_p: Vec<f64>,
}

fn default_period() -> usize {
    1
}

impl DropoutModel {
    pub fn independent(p: f64) -> Self {
        DropoutModel {
            kind: DropoutKind::Independent,
            p,
            period: 1,
            cluster_p: Vec::new(),
        }
    }

    pub fn periodic(p: f64, period: usize) -> Self {
        DropoutModel {
            kind: DropoutKind::Periodic,
            p,
            period,
            cluster_p: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in std::iter::once(("dropout.p".to_string(), self.p))
            .chain(self.cluster_p.iter().enumerate().map(|(k, &p)| (format!("dropout.cluster_p[{k}]"), p)))
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} must lie in [0, 1]")));
            }
        }
        if self.period == 0 {
            return Err(Error::Config("dropout.period must be at least 1".into()));
        }
        Ok(())
    }

    pub fn probability(&self, cluster: usize) -> f64 {
        self.cluster_p.get(cluster).copied().unwrap_or(self.p)
    }
}

/// Active clients `S_t` in ascending id order. `clusters[i]` is the
/// cluster of client `i`. Independent mode draws from a stream keyed by
/// the round; periodic mode keys it by `round / period`, so the set only
/// changes on rounds divisible by the period.
pub fn sample_active_set(model: &DropoutModel, round: usize, clusters: &[usize], seed: u64) -> Vec<usize> {
    use rand::Rng as _;
    let key = match model.kind {
        DropoutKind::Independent => round,
        DropoutKind::Periodic => round / model.period.max(1),
    };
    let mut rng = stream(seed, Stream::Dropout, &[model.kind as u64, key as u64]);
    clusters
        .iter()
        .enumerate()
        .filter_map(|(i, &k)| {
            let u: f64 = rng.random();
            (u < model.probability(k)).then_some(i)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "bsm_fedavg")]
    BsmFedAvg,
    #[serde(rename = "rebafl")]
    ReBaFL,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fedavg" => Ok(StrategyKind::FedAvg),
            "fedprox" => Ok(StrategyKind::FedProx),
            "bsm_fedavg" => Ok(StrategyKind::BsmFedAvg),
            "rebafl" => Ok(StrategyKind::ReBaFL),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected fedavg, fedprox, bsm_fedavg or rebafl)"
            ))),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedProx => "fedprox",
            StrategyKind::BsmFedAvg => "bsm_fedavg",
            StrategyKind::ReBaFL => "rebafl",
        })
    }
}

/// Local-training hyperparameters. `epsilon`, `mu` and `lambda` apply to
/// ReBaFL only, `mu_prox` to FedProx only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: StrategyKind,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::mu")]
    pub mu: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::mu_prox")]
    pub mu_prox: f64,
}

mod defaults {
    pub fn lr() -> f64 {
        0.01
    }
    pub fn local_epochs() -> usize {
        5
    }
    pub fn batch_size() -> usize {
        50
    }
    pub fn weight_decay() -> f64 {
        5e-4
    }
    pub fn epsilon() -> f64 {
        0.01
    }
    pub fn mu() -> f64 {
        0.1
    }
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn mu_prox() -> f64 {
        0.01
    }
}

impl StrategyConfig {
    pub fn new(name: StrategyKind) -> Self {
        StrategyConfig {
            name,
            lr: defaults::lr(),
            local_epochs: defaults::local_epochs(),
            batch_size: defaults::batch_size(),
            weight_decay: defaults::weight_decay(),
            epsilon: defaults::epsilon(),
            mu: defaults::mu(),
            lambda: defaults::lambda(),
            mu_prox: defaults::mu_prox(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("mu", self.mu),
            ("lambda", self.lambda),
            ("mu_prox", self.mu_prox),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("strategy.{field} = {v} must be finite and nonnegative")));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("strategy.epsilon = {} must lie in [0, 1]", self.epsilon)));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("strategy.local_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("strategy.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `w + sum_i (n_i / sum n) * delta_i`, summed in ascending client order.
pub fn aggregate_models<T: Real>(global: &ModelParams<T>, updates: &[ClientUpdate<T>]) -> Result<ModelParams<T>> {
    if updates.is_empty() {
        return Err(Error::Config("aggregate_models needs at least one update".into()));
    }
    let mut order: Vec<&ClientUpdate<T>> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let total: usize = order.iter().map(|u| u.samples).sum();
    if total == 0 {
        return Err(Error::InvalidClient("all updates report zero samples".into()));
    }
    let mut out = global.clone();
    for u in order {
        out.axpy(T::from_f64(u.samples as f64 / total as f64), &u.delta)?;
    }
    Ok(out)
}

/// Gradient of `(mu / 2) * ||w - w_global||^2`.
pub fn fedprox_penalty_grad<T: Real>(w: &ModelParams<T>, w_global: &ModelParams<T>, mu_prox: f64) -> Result<ModelParams<T>> {
    let mut g = w.sub(w_global)?;
    g.scale(T::from_f64(mu_prox));
    Ok(g)
}
