use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;

/// Weights of one extractor layer. Dense weights are `inputs x outputs`;
/// convolution weights are `(k * k * c_in) x c_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LayerParams<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

/// Full trainable parameter set: the feature extractor and the classifier
/// proxies. Row `c` of `classifier` is the proxy vector of class `c`.
///
/// The same type carries gradients and model deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ModelParams<T> {
    pub extractor: Vec<LayerParams<T>>,
    pub classifier: Matrix<T>,
    pub classifier_bias: Option<Vec<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            extractor: self
                .extractor
                .iter()
                .map(|l| LayerParams {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![T::zero(); l.bias.len()],
                })
                .collect(),
            classifier: Matrix::zeros(self.classifier.rows(), self.classifier.cols()),
            classifier_bias: self.classifier_bias.as_ref().map(|b| vec![T::zero(); b.len()]),
        }
    }

    pub fn classes(&self) -> usize {
        self.classifier.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.classifier.cols()
    }

    /// Named parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::with_capacity(2 * self.extractor.len() + 2);
        for (i, l) in self.extractor.iter().enumerate() {
            out.push((format!("extractor[{i}].weight"), l.weight.as_slice()));
            out.push((format!("extractor[{i}].bias"), l.bias.as_slice()));
        }
        out.push(("classifier.weight".to_string(), self.classifier.as_slice()));
        if let Some(b) = &self.classifier_bias {
            out.push(("classifier.bias".to_string(), b.as_slice()));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(2 * self.extractor.len() + 2);
        for l in &mut self.extractor {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.classifier.as_mut_slice());
        if let Some(b) = &mut self.classifier_bias {
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|((_, x), (_, y))| x.len() == y.len())
    }

    fn check_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(context, self.num_params(), other.num_params()))
        }
    }

    /// Flattened copy in canonical order, widened to 64 bits.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|x| x.as_f64()))
            .collect()
    }

    /// Overwrite from a flat vector in canonical order.
    pub fn set_from_f64(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::shape("ModelParams::set_from_f64", n, flat.len()));
        }
        let mut it = flat.iter();
        for t in self.tensors_mut() {
            for (dst, src) in t.iter_mut().zip(&mut it) {
                *dst = T::from_f64(*src);
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            extractor: self
                .extractor
                .iter()
                .map(|l| LayerParams {
                    weight: l.weight.cast(),
                    bias: l.bias.iter().map(|x| U::from_f64(x.as_f64())).collect(),
                })
                .collect(),
            classifier: self.classifier.cast(),
            classifier_bias: self
                .classifier_bias
                .as_ref()
                .map(|b| b.iter().map(|x| U::from_f64(x.as_f64())).collect()),
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| name)
    }

    pub fn is_finite(&self) -> bool {
        self.first_non_finite().is_none()
    }

    fn zip_apply(&mut self, other: &Self, context: &'static str, f: impl Fn(&mut T, T)) -> Result<()> {
        self.check_shape(other, context)?;
        let src = other.tensors();
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(src) {
            for (d, &s) in dst.iter_mut().zip(src) {
                f(d, s);
            }
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        self.zip_apply(other, "ModelParams::axpy", |d, s| *d += alpha * s)
    }

    /// `self - other` as a fresh parameter set.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.zip_apply(other, "ModelParams::sub", |d, s| *d -= s)?;
        Ok(out)
    }

    pub fn scale(&mut self, alpha: T) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= alpha;
            }
        }
    }

    /// Squared Euclidean distance over the flattened parameter vector.
    pub fn squared_distance(&self, other: &Self) -> Result<f64> {
        self.check_shape(other, "ModelParams::squared_distance")?;
        let mut acc = 0.0;
        for ((_, a), (_, b)) in self.tensors().iter().zip(other.tensors()) {
            for (&x, &y) in a.iter().zip(b) {
                let d = x.as_f64() - y.as_f64();
                acc += d * d;
            }
        }
        Ok(acc)
    }
}

/// One SGD step with decoupled-from-loss L2 decay:
/// `w <- w - lr * (grad + weight_decay * w)`.
///
/// Gradients are checked for finiteness before any parameter is touched;
/// the error names the offending tensor.
pub fn sgd_step<T: Real>(params: &mut ModelParams<T>, grads: &ModelParams<T>, lr: f64, weight_decay: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::Config(format!("weight decay must be finite and >= 0, got {weight_decay}")));
    }
    params.check_shape(grads, "sgd_step")?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let (lr, wd) = (T::from_f64(lr), T::from_f64(weight_decay));
    params.zip_apply(grads, "sgd_step", |w, g| *w = *w - lr * (g + wd * *w))
}
