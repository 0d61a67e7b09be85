//! Finite-difference verification of the analytic gradients on small
//! random models in 64-bit precision.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::federation::{objective_and_grad, Augmenter, Objective};
use crate::losses::LabelPrior;
use crate::matrix::Matrix;
use crate::nn::{ModelParams, Network, SampleShape};
use crate::prototypes::{cyclic_augment_batch, AugmentedBatch, Prototype, PrototypeSet};
use crate::rng::{stream, Rng, Stream};

pub const DEFAULT_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-4;
const BATCH: usize = 8;
/// Inputs are redrawn until every ReLU input and pooling gap is at least
/// this far from a kink.
const MIN_KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: u64 = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradModel {
    Mlp,
    Cnn,
}

impl FromStr for GradModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(GradModel::Mlp),
            "cnn" => Ok(GradModel::Cnn),
            other => Err(Error::Config(format!("unknown gradcheck model `{other}` (expected mlp or cnn)"))),
        }
    }
}

impl GradModel {
    fn network(self) -> Result<Network> {
        let net = match self {
            GradModel::Mlp => Network::mlp(SampleShape::flat(6), 10, 5)?,
            GradModel::Cnn => Network::tiny_cnn(SampleShape::image(6, 6, 1), 2, 6, 4)?,
        };
        Ok(net.with_classifier_bias(true))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "loss", rename_all = "snake_case")]
pub enum GradLoss {
    Ce,
    Rbsm { epsilon: f64 },
    /// Relaxed balanced-softmax plus `mu` times the same loss on features
    /// transferred to other classes (held fixed while differencing).
    Rebafl { epsilon: f64, mu: f64, lambda: f64 },
    /// Cross-entropy plus `(mu / 2) * ||w - w_anchor||^2`.
    Fedprox { mu: f64 },
}

impl GradLoss {
    /// Parse a loss name; `epsilon` and `mu` fall back to the training
    /// defaults when not given.
    pub fn parse(name: &str, epsilon: Option<f64>, mu: Option<f64>) -> Result<Self> {
        let eps = epsilon.unwrap_or(0.01);
        match name {
            "ce" | "vanilla_ce" => Ok(GradLoss::Ce),
            "rbsm" => Ok(GradLoss::Rbsm { epsilon: eps }),
            "rebafl" => Ok(GradLoss::Rebafl {
                epsilon: eps,
                mu: mu.unwrap_or(0.1),
                lambda: 1.0,
            }),
            "fedprox" => Ok(GradLoss::Fedprox { mu: mu.unwrap_or(0.1) }),
            other => Err(Error::Config(format!(
                "unknown gradcheck loss `{other}` (expected ce, rbsm, rebafl or fedprox)"
            ))),
        }
    }
}

impl fmt::Display for GradLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradLoss::Ce => write!(f, "ce"),
            GradLoss::Rbsm { epsilon } => write!(f, "rbsm(eps={epsilon})"),
            GradLoss::Rebafl { epsilon, mu, lambda } => write!(f, "rebafl(eps={epsilon}, mu={mu}, lambda={lambda})"),
            GradLoss::Fedprox { mu } => write!(f, "fedprox(mu={mu})"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub model: GradModel,
    pub loss: String,
    pub params: usize,
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub kink_margin: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:?} loss={} params={} max_rel_error={:.3e} at {}[{}] kink_margin={:.2e} tolerance={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.model,
            self.loss,
            self.params,
            self.max_rel_error,
            self.worst_tensor,
            self.worst_index,
            self.kink_margin,
            self.tolerance,
        )
    }
}

struct Problem {
    network: Network,
    params: ModelParams<f64>,
    x: Matrix<f64>,
    labels: Vec<usize>,
    prior: Option<LabelPrior>,
    augmented: Option<(f64, AugmentedBatch<f64>)>,
    anchor: Option<(f64, ModelParams<f64>)>,
    kink_margin: f64,
}

impl Problem {
    fn objective(&self, params: &ModelParams<f64>) -> Result<(f64, ModelParams<f64>)> {
        let fixed = |_: &Matrix<f64>, _: &[usize]| Ok(self.augmented.as_ref().map(|(_, a)| a.clone()));
        let objective = Objective {
            prior: self.prior.as_ref(),
            augment: self.augmented.as_ref().map(|(mu, _)| (*mu, &fixed as &Augmenter<'_, f64>)),
            proximal: self.anchor.as_ref().map(|(mu, a)| (*mu, a)),
        };
        objective_and_grad(&self.network, params, &self.x, &self.labels, &objective)
    }
}

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn draw_problem(model: GradModel, loss: GradLoss, seed: u64) -> Result<Problem> {
    let network = model.network()?;
    let classes = network.classes();
    let d_in = network.input_shape().len();
    for attempt in 0..MAX_DRAWS {
        let mut rng = stream(seed, Stream::Gradcheck, &[attempt]);
        let mut params: ModelParams<f64> = network.init(&mut rng);
        for layer in &mut params.extractor {
            for b in &mut layer.bias {
                *b = rng.random_range(-0.1..0.1);
            }
        }
        if let Some(b) = params.classifier_bias.as_mut() {
            for v in b.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let x = Matrix::from_vec(BATCH, d_in, uniform(&mut rng, BATCH * d_in, -1.0, 1.0))?;
        // The last class never appears so zero-prior masking is exercised.
        let labels: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..classes - 1)).collect();
        let (h, _, cache) = network.forward(&params, &x)?;
        let margin = cache.kink_margin(&network);
        if margin < MIN_KINK_MARGIN {
            continue;
        }

        let epsilon = match loss {
            GradLoss::Rbsm { epsilon } | GradLoss::Rebafl { epsilon, .. } => Some(epsilon),
            _ => None,
        };
        let prior = epsilon.map(|e| LabelPrior::from_labels(&labels, classes, e)).transpose()?;
        let augmented = match loss {
            GradLoss::Rebafl { epsilon, mu, lambda } => {
                let d = network.embed_dim();
                let protos = PrototypeSet::from_entries((0..classes).map(|c| {
                    (
                        c,
                        Prototype {
                            centroid: uniform(&mut rng, d, 0.0, 1.5),
                            count: 1 + c,
                            round: 0,
                        },
                    )
                }))?;
                let aug = cyclic_augment_batch(&h, &labels, &protos, classes, lambda, epsilon, attempt as usize)?
                    .ok_or_else(|| Error::Internal("augmentation unexpectedly skipped".into()))?;
                Some((mu, aug))
            }
            _ => None,
        };
        let anchor = match loss {
            GradLoss::Fedprox { mu } => {
                let mut a = params.clone();
                for t in a.tensors_mut() {
                    for v in t.iter_mut() {
                        *v += rng.random_range(-0.2..0.2);
                    }
                }
                Some((mu, a))
            }
            _ => None,
        };
        return Ok(Problem {
            network,
            params,
            x,
            labels,
            prior,
            augmented,
            anchor,
            kink_margin: margin,
        });
    }
    Err(Error::Internal(format!("no draw with kink margin >= {MIN_KINK_MARGIN} in {MAX_DRAWS} attempts")))
}

/// Compare every analytic partial derivative with a Richardson-extrapolated
/// central difference. With `corrupt` set, the largest analytic entry is
/// scaled by 1.01 first (negative control).
pub fn gradcheck(model: GradModel, loss: GradLoss, seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    gradcheck_with_tolerance(model, loss, seed, corrupt, DEFAULT_TOLERANCE)
}

pub fn gradcheck_with_tolerance(model: GradModel, loss: GradLoss, seed: u64, corrupt: bool, tolerance: f64) -> Result<GradcheckReport> {
    let problem = draw_problem(model, loss, seed)?;
    let (_, grads) = problem.objective(&problem.params)?;
    let mut analytic = grads.to_f64_vec();
    if corrupt {
        let k = (0..analytic.len())
            .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
            .unwrap_or(0);
        analytic[k] *= 1.01;
    }
    let base = problem.params.to_f64_vec();
    let mut probe = problem.params.clone();
    let mut flat = base.clone();
    let mut value_at = |i: usize, delta: f64| -> Result<f64> {
        flat[i] = base[i] + delta;
        probe.set_from_f64(&flat)?;
        flat[i] = base[i];
        Ok(problem.objective(&probe)?.0)
    };

    let names: Vec<(String, usize)> = problem.params.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    let locate = |mut i: usize| -> (String, usize) {
        for (n, len) in &names {
            if i < *len {
                return (n.clone(), i);
            }
            i -= len;
        }
        ("?".into(), i)
    };

    let mut worst = (0.0f64, 0usize);
    for (i, &a) in analytic.iter().enumerate() {
        let d1 = (value_at(i, STEP)? - value_at(i, -STEP)?) / (2.0 * STEP);
        let d2 = (value_at(i, STEP / 2.0)? - value_at(i, -STEP / 2.0)?) / STEP;
        let numeric = (4.0 * d2 - d1) / 3.0;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst.0 || rel.is_nan() {
            worst = (rel, i);
        }
    }
    let (worst_tensor, worst_index) = locate(worst.1);
    Ok(GradcheckReport {
        model,
        loss: loss.to_string(),
        params: analytic.len(),
        max_rel_error: worst.0,
        worst_tensor,
        worst_index,
        kink_margin: problem.kink_margin,
        tolerance,
        passed: worst.0 < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn models_are_small() {
        for m in [GradModel::Mlp, GradModel::Cnn] {
            let net = m.network().unwrap();
            let n = net.zeros::<f64>().num_params();
            assert!(n <= 2000, "{m:?} has {n} parameters");
        }
    }

    #[test]
    fn every_loss_passes_on_the_mlp() {
        for loss in [
            GradLoss::Ce,
            GradLoss::Rbsm { epsilon: 0.0 },
            GradLoss::Rbsm { epsilon: 0.01 },
            GradLoss::Rbsm { epsilon: 1.0 },
            GradLoss::Rebafl {
                epsilon: 0.01,
                mu: 0.1,
                lambda: 1.0,
            },
            GradLoss::Fedprox { mu: 0.1 },
        ] {
            let r = gradcheck(GradModel::Mlp, loss, 3, false).unwrap();
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let r = gradcheck(GradModel::Mlp, GradLoss::Ce, 3, true).unwrap();
        assert!(!r.passed, "{r}");
    }

    #[test]
    fn names_parse() {
        assert_eq!(GradLoss::parse("rbsm", Some(0.5), None).unwrap(), GradLoss::Rbsm { epsilon: 0.5 });
        assert!(GradLoss::parse("hinge", None, None).is_err());
        assert!("resnet".parse::<GradModel>().is_err());
    }
}
