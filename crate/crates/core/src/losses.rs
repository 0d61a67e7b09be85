//! Prior-calibrated softmax losses.
//!
//! All losses share one log-domain kernel: each class gets an additive
//! logit offset `log p(c) - max_c' log p(c')`, classes with zero prior are
//! masked out of the normalizer entirely, and every row is evaluated with
//! max subtraction. A uniform prior therefore produces offsets that are
//! exactly zero, and vanilla cross-entropy is the same code path with all
//! offsets zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

/// Per-client label prior, optionally smoothed toward uniform:
/// `p(c) = (1 - eps) * n_c / n + eps / C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPrior {
    counts: Vec<usize>,
    total: usize,
    epsilon: f64,
    smoothed: Vec<f64>,
}

impl LabelPrior {
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn smoothed(&self) -> &[f64] {
        &self.smoothed
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    /// Class histogram of `labels` over `classes` classes.
    pub fn from_labels(labels: &[usize], classes: usize, epsilon: f64) -> Result<Self> {
        let mut counts = vec![0usize; classes];
        for &y in labels {
            *counts
                .get_mut(y)
                .ok_or_else(|| Error::Data(format!("label {y} out of range for {classes} classes")))? += 1;
        }
        smoothed_prior(&counts, epsilon)
    }

    /// Additive logit offsets; `None` marks a zero-prior class.
    fn log_offsets<T: Real>(&self) -> Vec<Option<T>> {
        let logs: Vec<Option<f64>> = self.smoothed.iter().map(|&p| (p > 0.0).then(|| p.ln())).collect();
        let max = logs.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        logs.into_iter().map(|l| l.map(|l| T::from_f64(l - max))).collect()
    }
}

pub fn smoothed_prior(counts: &[usize], epsilon: f64) -> Result<LabelPrior> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("smoothing epsilon must lie in [0, 1], got {epsilon}")));
    }
    if counts.is_empty() {
        return Err(Error::Config("label prior needs at least one class".into()));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidClient("client holds no samples".into()));
    }
    let uniform = 1.0 / counts.len() as f64;
    let smoothed = counts
        .iter()
        .map(|&n| (1.0 - epsilon) * (n as f64 / total as f64) + epsilon * uniform)
        .collect();
    Ok(LabelPrior {
        counts: counts.to_vec(),
        total,
        epsilon,
        smoothed,
    })
}

/// Mean loss over a batch and its gradient with respect to the logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LossResult<T> {
    pub value: f64,
    pub dl_dz: Matrix<T>,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("loss labels", rows, labels.len()));
    }
    if let Some((j, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Data(format!("label {y} of sample {j} out of range for {classes} classes")));
    }
    Ok(())
}

/// Row-wise `q_c = exp(s_c - lse)` over unmasked classes, with
/// `s_c = z_c + offset_c`. Returns (scores, log-normalizers).
fn offset_softmax<T: Real>(z: &Matrix<T>, offsets: &[Option<T>]) -> Result<(Matrix<T>, Vec<T>)> {
    if offsets.len() != z.cols() {
        return Err(Error::shape("prior classes", z.cols(), offsets.len()));
    }
    if offsets.iter().all(Option::is_none) {
        return Err(Error::DegenerateLoss { row: 0, label: 0 });
    }
    let mut q = Matrix::zeros(z.rows(), z.cols());
    let mut lse = Vec::with_capacity(z.rows());
    for j in 0..z.rows() {
        let zr = z.row(j);
        let mut m = T::neg_infinity();
        for (&v, off) in zr.iter().zip(offsets) {
            if let Some(o) = off {
                m = m.max(v + *o);
            }
        }
        let qr = q.row_mut(j);
        let mut sum = T::zero();
        for ((qc, &v), off) in qr.iter_mut().zip(zr).zip(offsets) {
            if let Some(o) = off {
                let e = (v + *o - m).exp();
                *qc = e;
                sum += e;
            }
        }
        for qc in qr.iter_mut() {
            *qc = *qc / sum;
        }
        lse.push(m + sum.ln());
    }
    Ok((q, lse))
}

fn offset_cross_entropy<T: Real>(z: &Matrix<T>, labels: &[usize], offsets: &[Option<T>]) -> Result<LossResult<T>> {
    check_labels(labels, z.rows(), z.cols())?;
    if !z.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    for (row, &label) in labels.iter().enumerate() {
        if offsets.get(label).copied().flatten().is_none() {
            return Err(Error::DegenerateLoss { row, label });
        }
    }
    let (mut grad, lse) = offset_softmax(z, offsets)?;
    let n = z.rows();
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut total = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        let s_y = z[(j, y)] + offsets[y].unwrap_or_else(T::zero);
        total += (lse[j] - s_y).as_f64().max(0.0);
        let row = grad.row_mut(j);
        row[y] -= T::one();
        for g in row.iter_mut() {
            *g *= inv_n;
        }
    }
    let value = if n == 0 { 0.0 } else { total / n as f64 };
    Ok(LossResult { value, dl_dz: grad })
}

/// Softmax cross-entropy averaged over the batch.
pub fn vanilla_ce<T: Real>(z: &Matrix<T>, labels: &[usize]) -> Result<LossResult<T>> {
    let offsets = vec![Some(T::zero()); z.cols()];
    offset_cross_entropy(z, labels, &offsets)
}

/// Relaxed balanced-softmax: cross-entropy of `p(c) e^{z_c} / sum p(c') e^{z_c'}`.
///
/// With `eps = 1` this is exactly [`vanilla_ce`]; with `eps = 0` it is plain
/// balanced-softmax, and classes with zero count get exactly zero gradient.
pub fn rbsm_loss<T: Real>(z: &Matrix<T>, labels: &[usize], prior: &LabelPrior) -> Result<LossResult<T>> {
    if prior.classes() != z.cols() {
        return Err(Error::shape("rbsm_loss prior", z.cols(), prior.classes()));
    }
    offset_cross_entropy(z, labels, &prior.log_offsets())
}

/// Prior-weighted softmax scores `q_{j,c}`; zero wherever the prior is zero.
pub fn normalized_scores<T: Real>(z: &Matrix<T>, prior: &LabelPrior) -> Result<Matrix<T>> {
    if prior.classes() != z.cols() {
        return Err(Error::shape("normalized_scores prior", z.cols(), prior.classes()));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(offset_softmax(z, &prior.log_offsets())?.0)
}

/// Split of a one-step proxy update into the pull from same-class features
/// and the push from other-class features. Row `c` belongs to proxy `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceDecomposition<T> {
    pub pull: Matrix<T>,
    pub push: Matrix<T>,
}

impl<T: Real> ForceDecomposition<T> {
    /// The proxy update `pull - push`.
    pub fn delta(&self) -> Matrix<T> {
        let mut d = self.pull.clone();
        for (v, &p) in d.as_mut_slice().iter_mut().zip(self.push.as_slice()) {
            *v -= p;
        }
        d
    }
}

/// `pull_c = lr/n * sum_{y_j = c} (1 - q_jc) h_j`,
/// `push_c = lr/n * sum_{y_j != c} q_jc h_j`.
pub fn proxy_force_decomposition<T: Real>(
    h: &Matrix<T>,
    labels: &[usize],
    q: &Matrix<T>,
    lr: f64,
    batch_size: usize,
) -> Result<ForceDecomposition<T>> {
    if q.rows() != h.rows() {
        return Err(Error::shape("proxy_force_decomposition scores", h.rows(), q.rows()));
    }
    check_labels(labels, h.rows(), q.cols())?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let (classes, dim) = (q.cols(), h.cols());
    let scale = T::from_f64(lr / batch_size as f64);
    let mut pull = Matrix::zeros(classes, dim);
    let mut push = Matrix::zeros(classes, dim);
    for (j, &y) in labels.iter().enumerate() {
        let hj = h.row(j);
        for c in 0..classes {
            let (target, w) = if c == y {
                (&mut pull, T::one() - q[(j, c)])
            } else {
                (&mut push, q[(j, c)])
            };
            if w == T::zero() {
                continue;
            }
            for (t, &x) in target.row_mut(c).iter_mut().zip(hj) {
                *t += scale * w * x;
            }
        }
    }
    Ok(ForceDecomposition { pull, push })
}

/// Split of a one-step embedding update into the pull from its own proxy,
/// the push from proxies of locally present classes and the push from
/// proxies of locally missing classes. Row `j` belongs to sample `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureForceDecomposition<T> {
    pub pull: Matrix<T>,
    pub push_present: Matrix<T>,
    pub push_missing: Matrix<T>,
}

impl<T: Real> FeatureForceDecomposition<T> {
    pub fn delta(&self) -> Matrix<T> {
        let mut d = self.pull.clone();
        for ((v, &a), &b) in d
            .as_mut_slice()
            .iter_mut()
            .zip(self.push_present.as_slice())
            .zip(self.push_missing.as_slice())
        {
            *v = *v - a - b;
        }
        d
    }
}

/// Decompose `-lr * dL/dh_j` by proxy. `present[c]` says whether class `c`
/// is in the client's label set.
pub fn feature_force_decomposition<T: Real>(
    phi: &Matrix<T>,
    labels: &[usize],
    q: &Matrix<T>,
    present: &[bool],
    lr: f64,
    batch_size: usize,
) -> Result<FeatureForceDecomposition<T>> {
    let classes = phi.rows();
    if q.cols() != classes || present.len() != classes {
        return Err(Error::shape("feature_force_decomposition classes", classes, q.cols()));
    }
    check_labels(labels, q.rows(), classes)?;
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let scale = T::from_f64(lr / batch_size as f64);
    let (n, dim) = (q.rows(), phi.cols());
    let mut out = FeatureForceDecomposition {
        pull: Matrix::zeros(n, dim),
        push_present: Matrix::zeros(n, dim),
        push_missing: Matrix::zeros(n, dim),
    };
    for (j, &y) in labels.iter().enumerate() {
        for c in 0..classes {
            let (target, w) = if c == y {
                (&mut out.pull, T::one() - q[(j, c)])
            } else if present[c] {
                (&mut out.push_present, q[(j, c)])
            } else {
                (&mut out.push_missing, q[(j, c)])
            };
            for (t, &p) in target.row_mut(j).iter_mut().zip(phi.row(c)) {
                *t += scale * w * p;
            }
        }
    }
    Ok(out)
}

/// Re-target posteriors learned under `source` priors to `target` priors:
/// `score(c) ∝ P_s(c|x) P_t(c) / P_s(c)`, renormalized per row.
pub fn bayes_recalibrate(posteriors: &Matrix<f64>, source_prior: &[f64], target_prior: &[f64]) -> Result<Matrix<f64>> {
    let classes = posteriors.cols();
    if source_prior.len() != classes || target_prior.len() != classes {
        return Err(Error::shape(
            "bayes_recalibrate priors",
            classes,
            format!("{} / {}", source_prior.len(), target_prior.len()),
        ));
    }
    let mut out = Matrix::zeros(posteriors.rows(), classes);
    for j in 0..posteriors.rows() {
        let row = out.row_mut(j);
        for c in 0..classes {
            let post = posteriors[(j, c)];
            if source_prior[c] > 0.0 {
                row[c] = post * target_prior[c] / source_prior[c];
            } else if post > 0.0 {
                return Err(Error::IllConditioned { class: c, mass: post });
            }
        }
        let sum: f64 = row.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::IllConditioned { class: 0, mass: 0.0 });
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}
