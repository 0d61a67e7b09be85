//! Config-driven runs and parameter sweeps, including their on-disk
//! artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DatasetSpec, ExperimentConfig, Precision};
use crate::data::{
    balanced_test_set, clustered_partition, load_cifar10_binary, load_idx_dir, make_synthetic, partition_manifest, ClientShard,
    Dataset, PartitionMode,
};
use crate::error::{Error, Result};
use crate::federation::{Checkpoint, DropoutKind, FederationSetup, Simulation};
use crate::metrics::{accuracy_tsv, mean_std, rounds_csv, RoundRecord};
use crate::nn::{ModelParams, Network};
use crate::real::Real;
use crate::rng::{stream, Stream};

pub const DATA_DIR_ENV: &str = "REBAFL_DATA_DIR";

/// Dataset root: `$REBAFL_DATA_DIR`, else `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

/// Training split and class-balanced test split.
pub fn load_datasets(cfg: &ExperimentConfig, root: &Path) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.dataset {
        DatasetSpec::FashionMnist { dir } => load_idx_dir(root.join(dir.as_deref().unwrap_or(Path::new("fashion-mnist"))))?,
        DatasetSpec::Cifar10 { dir } => {
            let dir = root.join(dir.as_deref().unwrap_or(Path::new("cifar-10-batches-bin")));
            let train: Vec<PathBuf> = (1..=5).map(|k| dir.join(format!("data_batch_{k}.bin"))).collect();
            (load_cifar10_binary(&train)?, load_cifar10_binary(&[dir.join("test_batch.bin")])?)
        }
        DatasetSpec::Synthetic {
            classes,
            dim,
            train_per_class,
            test_per_class,
            separation,
        } => {
            let per = train_per_class + test_per_class;
            let all = make_synthetic(*classes, *dim, per, cfg.seed, *separation)?;
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for c in 0..*classes {
                tr.extend(c * per..c * per + train_per_class);
                te.extend(c * per + train_per_class..(c + 1) * per);
            }
            (all.subset(&tr, "synthetic-train"), all.subset(&te, "synthetic-test"))
        }
    };
    Ok((train, balanced_test_set(&test)?))
}

pub fn partition(cfg: &ExperimentConfig, train: &Dataset) -> Result<Vec<ClientShard>> {
    clustered_partition(train, &cfg.partition, cfg.seed)
}

pub fn build_network(cfg: &ExperimentConfig, train: &Dataset) -> Result<Network> {
    Ok(Network::for_choice(cfg.model.arch, train.shape(), cfg.model.hidden, train.classes())?
        .with_classifier_bias(cfg.model.classifier_bias))
}

pub fn initial_params<T: Real>(cfg: &ExperimentConfig, network: &Network) -> ModelParams<T> {
    network.init(&mut stream(cfg.seed, Stream::Init, &[]))
}

/// A simulation at either precision.
pub enum Run {
    F32(Simulation<f32>),
    F64(Simulation<f64>),
}

fn setup<T: Real>(cfg: &ExperimentConfig, network: Network, train: Dataset, test: Dataset, shards: Vec<ClientShard>) -> FederationSetup<T> {
    let initial = initial_params(cfg, &network);
    FederationSetup {
        network,
        train,
        test,
        shards,
        dropout: cfg.dropout.clone(),
        strategy: cfg.strategy.clone(),
        rounds: cfg.rounds,
        seed: cfg.seed,
        initial,
    }
}

impl Run {
    /// Load data, partition it and initialize the global model.
    pub fn prepare(cfg: &ExperimentConfig, root: &Path) -> Result<(Run, Vec<ClientShard>)> {
        cfg.validate()?;
        let (train, test) = load_datasets(cfg, root)?;
        let shards = partition(cfg, &train)?;
        let network = build_network(cfg, &train)?;
        let run = match cfg.precision {
            Precision::F32 => Run::F32(Simulation::new(setup(cfg, network, train, test, shards.clone()))?),
            Precision::F64 => Run::F64(Simulation::new(setup(cfg, network, train, test, shards.clone()))?),
        };
        Ok((run, shards))
    }

    pub fn step(&mut self) -> Result<Option<RoundRecord>> {
        Ok(match self {
            Run::F32(s) => s.step()?.cloned(),
            Run::F64(s) => s.step()?.cloned(),
        })
    }

    pub fn run(&mut self) -> Result<()> {
        while self.step()?.is_some() {}
        Ok(())
    }

    pub fn history(&self) -> &[RoundRecord] {
        match self {
            Run::F32(s) => s.history(),
            Run::F64(s) => s.history(),
        }
    }

    pub fn rounds_done(&self) -> usize {
        match self {
            Run::F32(s) => s.state().round,
            Run::F64(s) => s.state().round,
        }
    }

    pub fn checkpoint_json(&self) -> String {
        let out = match self {
            Run::F32(s) => serde_json::to_string(&s.checkpoint()),
            Run::F64(s) => serde_json::to_string(&s.checkpoint()),
        };
        out.expect("checkpoint is always serializable")
    }

    pub fn resume_json(&mut self, json: &str) -> Result<()> {
        match self {
            Run::F32(s) => s.resume(serde_json::from_str::<Checkpoint<f32>>(json)?),
            Run::F64(s) => s.resume(serde_json::from_str::<Checkpoint<f64>>(json)?),
        }
    }
}

/// Headline numbers of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub rounds: usize,
    pub final_accuracy: Option<f64>,
    pub window: usize,
    pub window_mean: Option<f64>,
    pub window_std: Option<f64>,
    /// Mean weight diversity over non-skipped rounds of the window.
    pub window_diversity: Option<f64>,
    pub skipped_rounds: usize,
}

pub fn summarize(history: &[RoundRecord], window: usize, seed: u64) -> RunSummary {
    let w = window.min(history.len());
    let tail = &history[history.len() - w..];
    let (mean, std) = mean_std(&tail.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    let div: Vec<f64> = tail.iter().filter(|r| !r.skipped).map(|r| r.diversity).collect();
    RunSummary {
        seed,
        rounds: history.len(),
        final_accuracy: history.last().map(|r| r.accuracy),
        window: w,
        window_mean: (w > 0).then_some(mean),
        window_std: (w > 0).then_some(std),
        window_diversity: (!div.is_empty()).then(|| div.iter().sum::<f64>() / div.len() as f64),
        skipped_rounds: history.iter().filter(|r| r.skipped).count(),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Run one experiment and write `config.json`, `partition.json`,
/// `rounds.csv`, `history.json`, `accuracy.tsv` and `checkpoint.json` into
/// the configured output directory.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let (mut run, shards) = Run::prepare(cfg, root)?;
    if let Some(path) = resume {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        run.resume_json(&json)?;
    }
    run.run()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(out, "config.json", &cfg.to_json())?;
    write(out, "partition.json", &serde_json::to_string_pretty(&partition_manifest(&shards))?)?;
    write(out, "rounds.csv", &rounds_csv(run.history()))?;
    write(out, "history.json", &serde_json::to_string_pretty(run.history())?)?;
    write(out, "accuracy.tsv", &accuracy_tsv(run.history()))?;
    write(out, "checkpoint.json", &run.checkpoint_json())?;
    Ok(summarize(run.history(), cfg.stability_window, cfg.seed))
}

/// Hyperparameters that can be swept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Dropout success probability.
    P,
    /// Local epochs.
    E,
    Epsilon,
    Mu,
    /// Dropout period (switches to periodic dropout).
    S,
    /// Number of clients (pathological partitions only).
    M,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(SweepParam::P),
            "E" | "e" => Ok(SweepParam::E),
            "epsilon" => Ok(SweepParam::Epsilon),
            "mu" => Ok(SweepParam::Mu),
            "s" => Ok(SweepParam::S),
            "m" => Ok(SweepParam::M),
            other => Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (expected p, E, epsilon, mu, s or m)"
            ))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::P => "p",
            SweepParam::E => "E",
            SweepParam::Epsilon => "epsilon",
            SweepParam::Mu => "mu",
            SweepParam::S => "s",
            SweepParam::M => "m",
        })
    }
}

fn as_count(param: SweepParam, v: f64) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("sweep value {v} for `{param}` must be a positive integer")))
    }
}

/// Copy of `cfg` with `param` set to `value`.
pub fn apply_sweep_value(cfg: &ExperimentConfig, param: SweepParam, value: f64) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    match param {
        SweepParam::P => {
            c.dropout.p = value;
            c.dropout.cluster_p.clear();
        }
        SweepParam::E => c.strategy.local_epochs = as_count(param, value)?,
        SweepParam::Epsilon => c.strategy.epsilon = value,
        SweepParam::Mu => c.strategy.mu = value,
        SweepParam::S => {
            c.dropout.kind = DropoutKind::Periodic;
            c.dropout.period = as_count(param, value)?;
        }
        SweepParam::M => match &mut c.partition.mode {
            PartitionMode::Pathological { clients, .. } => *clients = as_count(param, value)?,
            PartitionMode::Clustered { .. } => {
                return Err(Error::Config("sweeping `m` requires a pathological partition".into()));
            }
        },
    }
    c.validate()?;
    Ok(c)
}

pub const SWEEP_CSV_HEADER: &str = "param,value,seed,strategy,rounds,final_accuracy,window_mean,window_std,window_diversity,skipped_rounds";

/// One run per value; run `k` uses seed `cfg.seed + k` and writes into
/// `<output_dir>/<param>_<value>`. The combined table goes to
/// `<output_dir>/summary.csv`. Parallel execution gives the same results.
pub fn run_sweep(cfg: &ExperimentConfig, root: &Path, param: SweepParam, values: &[f64], parallel: bool) -> Result<Vec<RunSummary>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let mut c = apply_sweep_value(cfg, param, v)?;
            c.seed = cfg.seed.wrapping_add(k as u64);
            c.output_dir = cfg.output_dir.join(format!("{param}_{v}"));
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries: Vec<RunSummary> = if parallel {
        configs.par_iter().map(|c| run_experiment(c, root, None)).collect::<Result<_>>()?
    } else {
        configs.iter().map(|c| run_experiment(c, root, None)).collect::<Result<_>>()?
    };
    let fmt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for ((v, c), s) in values.iter().zip(&configs).zip(&summaries) {
        let _ = writeln!(
            csv,
            "{param},{v},{},{},{},{},{},{},{},{}",
            s.seed,
            c.strategy.name,
            s.rounds,
            fmt(s.final_accuracy),
            fmt(s.window_mean),
            fmt(s.window_std),
            fmt(s.window_diversity),
            s.skipped_rounds
        );
    }
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write(&cfg.output_dir, "summary.csv", &csv)?;
    Ok(summaries)
}
