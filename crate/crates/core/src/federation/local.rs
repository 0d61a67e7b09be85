use rand::seq::SliceRandom;

use super::{fedprox_penalty_grad, StrategyConfig, StrategyKind};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::losses::{rbsm_loss, smoothed_prior, vanilla_ce, LabelPrior};
use crate::matrix::Matrix;
use crate::nn::{classifier_grad, forward_logits, sgd_step, ModelParams, Network};
use crate::prototypes::{cyclic_augment_batch, extract_local_prototypes, merge_prototypes, AugmentedBatch, PrototypeSet};
use crate::real::Real;
use crate::rng::{stream, Stream};

/// What a client sends back after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate<T> {
    pub client_id: usize,
    /// Local model minus the received global model.
    pub delta: ModelParams<T>,
    /// Local prototypes; empty for strategies that do not use them.
    pub prototypes: PrototypeSet,
    pub samples: usize,
}

/// Builds the augmented batch from the current embeddings and labels.
pub type Augmenter<'a, T> = dyn Fn(&Matrix<T>, &[usize]) -> Result<Option<AugmentedBatch<T>>> + 'a;

/// Per-batch training objective.
pub struct Objective<'a, T> {
    /// Prior for the prior-calibrated loss; plain cross-entropy when `None`.
    pub prior: Option<&'a LabelPrior>,
    /// Weight and generator of the augmented term. Its gradient reaches the
    /// classifier only.
    pub augment: Option<(f64, &'a Augmenter<'a, T>)>,
    /// Proximal coefficient and anchor model.
    pub proximal: Option<(f64, &'a ModelParams<T>)>,
}

impl<T> Default for Objective<'_, T> {
    fn default() -> Self {
        Objective {
            prior: None,
            augment: None,
            proximal: None,
        }
    }
}

/// Loss value and full parameter gradient of `objective` on one batch.
pub fn objective_and_grad<T: Real>(
    network: &Network,
    params: &ModelParams<T>,
    x: &Matrix<T>,
    labels: &[usize],
    objective: &Objective<'_, T>,
) -> Result<(f64, ModelParams<T>)> {
    let (h, z, cache) = network.forward(params, x)?;
    let main = match objective.prior {
        Some(prior) => rbsm_loss(&z, labels, prior)?,
        None => vanilla_ce(&z, labels)?,
    };
    let mut value = main.value;
    let mut grads = network.backward(params, &cache, &main.dl_dz)?;

    if let Some((mu, augment)) = objective.augment {
        if let Some(aug) = augment(&h, labels)? {
            let z_aug = forward_logits(&params.classifier, params.classifier_bias.as_deref(), &aug.features)?;
            let l = rbsm_loss(&z_aug, &aug.labels, &aug.prior)?;
            value += mu * l.value;
            let (dw, db) = classifier_grad(&aug.features, &l.dl_dz, params.classifier_bias.is_some())?;
            let mu_t = T::from_f64(mu);
            for (g, &d) in grads.classifier.as_mut_slice().iter_mut().zip(dw.as_slice()) {
                *g += mu_t * d;
            }
            if let (Some(gb), Some(db)) = (grads.classifier_bias.as_mut(), db) {
                for (g, d) in gb.iter_mut().zip(db) {
                    *g += mu_t * d;
                }
            }
        }
    }

    if let Some((mu_prox, anchor)) = objective.proximal {
        value += 0.5 * mu_prox * params.squared_distance(anchor)?;
        grads.axpy(T::one(), &fedprox_penalty_grad(params, anchor, mu_prox)?)?;
    }
    Ok((value, grads))
}

fn with_context(err: Error, round: usize, client: usize) -> Error {
    match err {
        Error::NonFinite(what) => Error::NonFinite(format!("round {round}, client {client}: {what}")),
        other => other,
    }
}

/// Train one client from the broadcast model and return its update.
/// Randomness (batch order) comes from the `(seed, round, client)` stream.
#[allow(clippy::too_many_arguments)]
pub fn local_train<T: Real>(
    network: &Network,
    ds: &Dataset,
    shard: &ClientShard,
    global: &ModelParams<T>,
    global_prototypes: &PrototypeSet,
    strategy: &StrategyConfig,
    round: usize,
    seed: u64,
) -> Result<ClientUpdate<T>> {
    let client = shard.client_id;
    if shard.is_empty() {
        return Err(Error::InvalidClient(format!("client {client} has no samples")));
    }
    let classes = network.classes();
    let counts = shard.class_counts(ds);
    let rebafl = strategy.name == StrategyKind::ReBaFL;
    let prior = match strategy.name {
        StrategyKind::ReBaFL => Some(smoothed_prior(&counts, strategy.epsilon)?),
        StrategyKind::BsmFedAvg => Some(smoothed_prior(&counts, 0.0)?),
        StrategyKind::FedAvg | StrategyKind::FedProx => None,
    };
    let prototypes = if rebafl && strategy.mu > 0.0 {
        let fresh = extract_local_prototypes(network, global, ds, &shard.indices, round)?;
        merge_prototypes(global_prototypes, &fresh)?
    } else {
        PrototypeSet::new()
    };

    let mut rng = stream(seed, Stream::LocalTraining, &[round as u64, client as u64]);
    let mut w = global.clone();
    let mut order = shard.indices.clone();
    let mut step = 0usize;
    for _ in 0..strategy.local_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(strategy.batch_size) {
            let (x, labels) = ds.batch::<T>(batch);
            let augment = |h: &Matrix<T>, y: &[usize]| {
                cyclic_augment_batch(h, y, &prototypes, classes, strategy.lambda, strategy.epsilon, step)
            };
            let objective = Objective {
                prior: prior.as_ref(),
                augment: (rebafl && strategy.mu > 0.0).then_some((strategy.mu, &augment as &Augmenter<'_, T>)),
                proximal: (strategy.name == StrategyKind::FedProx).then_some((strategy.mu_prox, global)),
            };
            let (value, grads) = objective_and_grad(network, &w, &x, &labels, &objective)
                .map_err(|e| with_context(e, round, client))?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("round {round}, client {client}: training loss")));
            }
            sgd_step(&mut w, &grads, strategy.lr, strategy.weight_decay).map_err(|e| with_context(e, round, client))?;
            step += 1;
        }
    }

    let prototypes = if rebafl {
        extract_local_prototypes(network, &w, ds, &shard.indices, round)?
    } else {
        PrototypeSet::new()
    };
    Ok(ClientUpdate {
        client_id: client,
        delta: w.sub(global)?,
        prototypes,
        samples: shard.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::nn::SampleShape;

    fn setup() -> (Network, Dataset, ClientShard, ModelParams<f64>) {
        let ds = make_synthetic(4, 6, 30, 1, 3.0).unwrap();
        let net = Network::mlp(SampleShape::flat(6), 5, 4).unwrap();
        let params = net.init(&mut stream(1, Stream::Init, &[]));
        let indices: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels()[i] < 2).collect();
        let shard = ClientShard {
            client_id: 2,
            indices,
            label_set: vec![0, 1],
            cluster: 0,
        };
        (net, ds, shard, params)
    }

    #[test]
    fn zero_learning_rate_gives_zero_delta() {
        let (net, ds, shard, params) = setup();
        for name in [StrategyKind::FedAvg, StrategyKind::FedProx, StrategyKind::BsmFedAvg, StrategyKind::ReBaFL] {
            let strat = StrategyConfig {
                lr: 0.0,
                local_epochs: 2,
                batch_size: 16,
                ..StrategyConfig::new(name)
            };
            let u = local_train(&net, &ds, &shard, &params, &PrototypeSet::new(), &strat, 0, 5).unwrap();
            assert!(u.delta.to_f64_vec().iter().all(|&v| v == 0.0), "{name}");
            assert_eq!(u.samples, 60);
        }
    }

    #[test]
    fn rebafl_reduces_to_fedavg_bitwise() {
        let (net, ds, shard, params) = setup();
        let fedavg = StrategyConfig {
            batch_size: 7,
            local_epochs: 3,
            ..StrategyConfig::new(StrategyKind::FedAvg)
        };
        let rebafl = StrategyConfig {
            name: StrategyKind::ReBaFL,
            epsilon: 1.0,
            mu: 0.0,
            ..fedavg.clone()
        };
        let a = local_train(&net, &ds, &shard, &params, &PrototypeSet::new(), &fedavg, 3, 8).unwrap();
        let b = local_train(&net, &ds, &shard, &params, &PrototypeSet::new(), &rebafl, 3, 8).unwrap();
        assert_eq!(a.delta, b.delta);
        assert_eq!(b.prototypes.classes(), vec![0, 1]);
    }

    #[test]
    fn single_step_matches_negative_gradient() {
        let (net, ds, shard, params) = setup();
        let strat = StrategyConfig {
            local_epochs: 1,
            batch_size: shard.len(),
            weight_decay: 0.0,
            lr: 0.05,
            ..StrategyConfig::new(StrategyKind::BsmFedAvg)
        };
        let u = local_train(&net, &ds, &shard, &params, &PrototypeSet::new(), &strat, 0, 1).unwrap();
        let (x, y) = ds.batch::<f64>(&shard.indices);
        let prior = smoothed_prior(&shard.class_counts(&ds), 0.0).unwrap();
        let objective = Objective {
            prior: Some(&prior),
            ..Objective::default()
        };
        let (_, g) = objective_and_grad(&net, &params, &x, &y, &objective).unwrap();
        for (d, g) in u.delta.to_f64_vec().iter().zip(g.to_f64_vec()) {
            assert!((d + 0.05 * g).abs() < 1e-12, "{d} vs {}", -0.05 * g);
        }
    }

    #[test]
    fn rebafl_uses_global_prototypes_for_missing_classes() {
        let (net, ds, shard, params) = setup();
        let all: Vec<usize> = (0..ds.len()).collect();
        let global = extract_local_prototypes(&net, &params, &ds, &all, 0).unwrap();
        let strat = StrategyConfig {
            local_epochs: 1,
            batch_size: 10,
            ..StrategyConfig::new(StrategyKind::ReBaFL)
        };
        let with = local_train(&net, &ds, &shard, &params, &global, &strat, 1, 4).unwrap();
        let without = local_train(&net, &ds, &shard, &params, &PrototypeSet::new(), &strat, 1, 4).unwrap();
        assert_ne!(with.delta, without.delta);
        assert_eq!(with.prototypes.classes(), vec![0, 1]);
    }

    #[test]
    fn nan_weights_abort_with_context() {
        let (net, ds, shard, mut params) = setup();
        params.classifier[(0, 0)] = f64::NAN;
        let strat = StrategyConfig::new(StrategyKind::FedAvg);
        let err = local_train(&net, &ds, &shard, &params, &PrototypeSet::new(), &strat, 6, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("round 6, client 2")), "{err}");
    }
}
