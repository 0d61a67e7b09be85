//! Evaluation, weight diversity and round logs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ModelParams, Network};
use crate::real::Real;

const EVAL_CHUNK: usize = 500;

/// Fraction of samples whose argmax logit (lowest id on ties) is the label.
pub fn test_accuracy<T: Real>(network: &Network, params: &ModelParams<T>, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, labels) = test.batch::<T>(chunk);
        let pred = network.predict(params, &x)?;
        correct += pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Mean squared distance of each model from the unweighted mean model.
pub fn weight_diversity<T: Real>(models: &[ModelParams<T>]) -> Result<f64> {
    let Some(first) = models.first() else {
        return Err(Error::Config("weight_diversity needs at least one model".into()));
    };
    if let Some(k) = models.iter().position(|m| !m.same_shape(first)) {
        return Err(Error::shape("weight_diversity model", first.num_params(), models[k].num_params()));
    }
    let flat: Vec<Vec<f64>> = models.iter().map(ModelParams::to_f64_vec).collect();
    let n = flat.len() as f64;
    let mut mean = vec![0.0; flat[0].len()];
    for v in &flat {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let total: f64 = flat
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(&x, &m)| (x - m) * (x - m)).sum::<f64>())
        .sum();
    Ok(total / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub active: Vec<usize>,
    pub accuracy: f64,
    /// Weight diversity of the active clients' local models; 0 when skipped.
    pub diversity: f64,
    pub skipped: bool,
    pub wall_time_ms: f64,
}

/// Sample mean and standard deviation (n - 1 denominator, 0 for a single
/// value) of the accuracy over the last `window` rounds.
pub fn stability_stats(history: &[RoundRecord], window: usize) -> Result<(f64, f64)> {
    if window == 0 || window > history.len() {
        return Err(Error::Config(format!(
            "stability window {window} must lie in 1..={}",
            history.len()
        )));
    }
    let tail: Vec<f64> = history[history.len() - window..].iter().map(|r| r.accuracy).collect();
    Ok(mean_std(&tail))
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const ROUNDS_CSV_HEADER: &str = "round,active_count,accuracy,diversity,skipped";

/// Round log without wall-clock columns, so reruns are byte-identical.
pub fn rounds_csv(history: &[RoundRecord]) -> String {
    let mut out = String::from(ROUNDS_CSV_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(out, "{},{},{},{},{}", r.round, r.active.len(), r.accuracy, r.diversity, r.skipped);
    }
    out
}

/// Two-column `round<TAB>accuracy` series for plotting.
pub fn accuracy_tsv(history: &[RoundRecord]) -> String {
    let mut out = String::from("round\taccuracy\n");
    for r in history {
        let _ = writeln!(out, "{}\t{}", r.round, r.accuracy);
    }
    out
}
