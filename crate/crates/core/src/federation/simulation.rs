use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aggregate_models, local_train, sample_active_set, DropoutModel, StrategyConfig, StrategyKind};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{test_accuracy, weight_diversity, RoundRecord};
use crate::nn::{ModelParams, Network};
use crate::prototypes::{aggregate_prototypes, merge_prototypes, PrototypeSet};
use crate::real::Real;

/// Everything a run needs besides its mutable state.
#[derive(Clone, Debug)]
pub struct FederationSetup<T> {
    pub network: Network,
    pub train: Dataset,
    /// Evaluation set, already class-balanced.
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
    pub dropout: DropoutModel,
    pub strategy: StrategyConfig,
    pub rounds: usize,
    pub seed: u64,
    pub initial: ModelParams<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ServerState<T> {
    pub model: ModelParams<T>,
    pub prototypes: PrototypeSet,
    /// Next round to execute.
    pub round: usize,
}

/// Resumable snapshot written after a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Checkpoint<T> {
    pub round: usize,
    pub model: ModelParams<T>,
    pub prototypes: PrototypeSet,
}

pub struct Simulation<T> {
    setup: FederationSetup<T>,
    clusters: Vec<usize>,
    state: ServerState<T>,
    history: Vec<RoundRecord>,
    /// Accuracy of the current global model, reused by skipped rounds.
    current_accuracy: Option<f64>,
}

impl<T: Real> Simulation<T> {
    pub fn new(setup: FederationSetup<T>) -> Result<Self> {
        setup.network.check_params(&setup.initial)?;
        setup.dropout.validate()?;
        setup.strategy.validate()?;
        if setup.shards.is_empty() {
            return Err(Error::Config("federation needs at least one client".into()));
        }
        if let Some(s) = setup.shards.iter().enumerate().find(|(i, s)| s.client_id != *i) {
            return Err(Error::Config(format!("client ids must be 0..m in order, found {} at {}", s.1.client_id, s.0)));
        }
        if setup.train.shape() != setup.network.input_shape() || setup.test.shape() != setup.network.input_shape() {
            return Err(Error::Config("dataset sample shape does not match the network input".into()));
        }
        let clusters = setup.shards.iter().map(|s| s.cluster).collect();
        let state = ServerState {
            model: setup.initial.clone(),
            prototypes: PrototypeSet::new(),
            round: 0,
        };
        Ok(Simulation {
            setup,
            clusters,
            state,
            history: Vec::new(),
            current_accuracy: None,
        })
    }

    pub fn setup(&self) -> &FederationSetup<T> {
        &self.setup
    }

    pub fn state(&self) -> &ServerState<T> {
        &self.state
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    pub fn into_history(self) -> Vec<RoundRecord> {
        self.history
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.setup.rounds
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            round: self.state.round,
            model: self.state.model.clone(),
            prototypes: self.state.prototypes.clone(),
        }
    }

    /// Continue from a checkpoint; later rounds replay exactly because all
    /// randomness is keyed by round and client.
    pub fn resume(&mut self, checkpoint: Checkpoint<T>) -> Result<()> {
        self.setup.network.check_params(&checkpoint.model)?;
        if checkpoint.round > self.setup.rounds {
            return Err(Error::Config(format!(
                "checkpoint round {} is past the configured {} rounds",
                checkpoint.round, self.setup.rounds
            )));
        }
        self.state = ServerState {
            model: checkpoint.model,
            prototypes: checkpoint.prototypes,
            round: checkpoint.round,
        };
        self.current_accuracy = None;
        Ok(())
    }

    fn evaluate(&mut self) -> Result<f64> {
        if let Some(a) = self.current_accuracy {
            return Ok(a);
        }
        let a = test_accuracy(&self.setup.network, &self.state.model, &self.setup.test)?;
        self.current_accuracy = Some(a);
        Ok(a)
    }

    /// Execute one round. Returns `None` once all rounds are done.
    pub fn step(&mut self) -> Result<Option<&RoundRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let started = Instant::now();
        let t = self.state.round;
        let s = &self.setup;
        let active = sample_active_set(&s.dropout, t, &self.clusters, s.seed);
        let mut diversity = 0.0;
        let skipped = active.is_empty();
        if !skipped {
            let updates = active
                .par_iter()
                .map(|&i| {
                    local_train(
                        &s.network,
                        &s.train,
                        &s.shards[i],
                        &self.state.model,
                        &self.state.prototypes,
                        &s.strategy,
                        t,
                        s.seed,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let deltas: Vec<ModelParams<T>> = updates.iter().map(|u| u.delta.clone()).collect();
            diversity = weight_diversity(&deltas)?;
            let model = aggregate_models(&self.state.model, &updates)?;
            if let Some(name) = model.first_non_finite() {
                return Err(Error::NonFinite(format!("round {t}: aggregated {name}")));
            }
            if s.strategy.name == StrategyKind::ReBaFL {
                let locals: Vec<PrototypeSet> = updates.into_iter().map(|u| u.prototypes).collect();
                let fresh = aggregate_prototypes(&locals)?;
                self.state.prototypes = merge_prototypes(&self.state.prototypes, &fresh)?;
            }
            self.state.model = model;
            self.current_accuracy = None;
        }
        let accuracy = self.evaluate()?;
        self.state.round += 1;
        self.history.push(RoundRecord {
            round: t,
            active,
            accuracy,
            diversity,
            skipped,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        Ok(self.history.last())
    }

    pub fn run(&mut self) -> Result<&[RoundRecord]> {
        while self.step()?.is_some() {}
        Ok(&self.history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{balanced_test_set, make_synthetic, pathological_partition, PartitionMode, PartitionSpec};
    use crate::nn::SampleShape;
    use crate::rng::{stream, Stream};

    fn setup(strategy: StrategyConfig, p: f64, rounds: usize) -> FederationSetup<f64> {
        let train = make_synthetic(4, 5, 60, 3, 4.0).unwrap();
        let test = balanced_test_set(&make_synthetic(4, 5, 20, 4, 4.0).unwrap()).unwrap();
        let spec = PartitionSpec {
            mode: PartitionMode::Pathological {
                clients: 4,
                classes_per_client: 2,
            },
            samples_per_client: 40,
            seed: None,
        };
        let shards = pathological_partition(&train, &spec, 3).unwrap();
        let network = Network::mlp(SampleShape::flat(5), 6, 4).unwrap();
        let initial = network.init(&mut stream(3, Stream::Init, &[]));
        FederationSetup {
            network,
            train,
            test,
            shards,
            dropout: DropoutModel::independent(p),
            strategy,
            rounds,
            seed: 3,
            initial,
        }
    }

    fn quick(name: StrategyKind) -> StrategyConfig {
        StrategyConfig {
            local_epochs: 1,
            batch_size: 10,
            lr: 0.05,
            ..StrategyConfig::new(name)
        }
    }

    #[test]
    fn zero_rounds_keep_initial_model() {
        let mut sim = Simulation::new(setup(quick(StrategyKind::FedAvg), 1.0, 0)).unwrap();
        assert!(sim.run().unwrap().is_empty());
        assert_eq!(sim.state().model, sim.setup().initial);
    }

    #[test]
    fn empty_rounds_leave_state_unchanged() {
        let mut sim = Simulation::new(setup(quick(StrategyKind::ReBaFL), 0.0, 3)).unwrap();
        let h = sim.run().unwrap().to_vec();
        assert!(h.iter().all(|r| r.skipped && r.active.is_empty() && r.diversity == 0.0));
        assert_eq!(sim.state().model, sim.setup().initial);
        assert!(sim.state().prototypes.is_empty());
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let cfg = quick(StrategyKind::ReBaFL);
        let mut a = Simulation::new(setup(cfg.clone(), 0.6, 6)).unwrap();
        a.run().unwrap();
        let mut b = Simulation::new(setup(cfg.clone(), 0.6, 6)).unwrap();
        b.run().unwrap();
        assert_eq!(a.history().iter().map(|r| r.accuracy).collect::<Vec<_>>(), b.history().iter().map(|r| r.accuracy).collect::<Vec<_>>());
        assert_eq!(a.state(), b.state());

        let mut first = Simulation::new(setup(cfg.clone(), 0.6, 3)).unwrap();
        first.run().unwrap();
        let json = serde_json::to_string(&first.checkpoint()).unwrap();
        let mut resumed = Simulation::new(setup(cfg, 0.6, 6)).unwrap();
        resumed.resume(serde_json::from_str(&json).unwrap()).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.state(), a.state());
    }

    #[test]
    fn identical_shards_give_a_single_client_model() {
        // Full-batch steps make the update independent of batch order.
        let strategy = StrategyConfig {
            batch_size: 1000,
            local_epochs: 3,
            ..quick(StrategyKind::FedAvg)
        };
        let mut s = setup(strategy, 1.0, 1);
        let first = s.shards[0].clone();
        for (i, shard) in s.shards.iter_mut().enumerate() {
            *shard = ClientShard {
                client_id: i,
                ..first.clone()
            };
        }
        let lone = local_train(&s.network, &s.train, &s.shards[0], &s.initial, &PrototypeSet::new(), &s.strategy, 0, s.seed).unwrap();
        let mut expect = s.initial.clone();
        expect.axpy(1.0, &lone.delta).unwrap();
        let mut sim = Simulation::new(s).unwrap();
        let record = sim.step().unwrap().unwrap().clone();
        assert_eq!(record.active, vec![0, 1, 2, 3]);
        assert!(record.diversity < 1e-24);
        for (a, b) in sim.state().model.to_f64_vec().iter().zip(expect.to_f64_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn training_improves_accuracy() {
        let mut sim = Simulation::new(setup(quick(StrategyKind::ReBaFL), 1.0, 15)).unwrap();
        let h = sim.run().unwrap();
        assert!(h.last().unwrap().accuracy > 0.6, "{:?}", h.last());
        assert!(h.iter().all(|r| r.diversity >= 0.0));
    }
}
