//! Feed-forward feature extractor plus linear classifier, with hand-written
//! backpropagation.
//!
//! Every extractor layer is followed by ReLU (and optionally 2x2 max
//! pooling for convolutions); the output of the last extractor layer is the
//! feature embedding `h`. The classifier computes `z_c = phi_c . h + b_c`.

mod conv;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use conv::ConvSpec;
pub use params::{sgd_step, LayerParams, ModelParams};

use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix, Op};
use crate::real::Real;

/// Shape of one input sample, stored height-major with channels innermost.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl SampleShape {
    pub fn image(height: usize, width: usize, channels: usize) -> Self {
        SampleShape {
            height,
            width,
            channels,
        }
    }

    /// A plain feature vector.
    pub fn flat(dim: usize) -> Self {
        SampleShape::image(1, 1, dim)
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv(ConvSpec),
}

impl LayerSpec {
    pub fn input_len(&self) -> usize {
        match self {
            LayerSpec::Dense { inputs, .. } => *inputs,
            LayerSpec::Conv(c) => c.input_len(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            LayerSpec::Dense { outputs, .. } => *outputs,
            LayerSpec::Conv(c) => c.output_len(),
        }
    }

    fn weight_shape(&self) -> (usize, usize) {
        match self {
            LayerSpec::Dense { inputs, outputs } => (*inputs, *outputs),
            LayerSpec::Conv(c) => (c.patch_len(), c.out_channels),
        }
    }
}

/// Named architectures selectable from configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// input -> hidden (ReLU) -> classifier.
    Mlp,
    /// conv5x5(16)+pool, conv5x5(32)+pool, FC-128, classifier.
    FmnistCnn,
    /// As `FmnistCnn` plus a conv3x3(64) (padding 1) before the FC layer.
    CifarCnn,
}

impl std::str::FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ModelChoice::Mlp),
            "fmnist_cnn" => Ok(ModelChoice::FmnistCnn),
            "cifar_cnn" => Ok(ModelChoice::CifarCnn),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected mlp, fmnist_cnn or cifar_cnn)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input: SampleShape,
    layers: Vec<LayerSpec>,
    classes: usize,
    classifier_bias: bool,
}

pub(crate) enum LayerCache<T> {
    Dense {
        input: Matrix<T>,
        pre: Matrix<T>,
    },
    Conv {
        cols: Matrix<T>,
        pre: Matrix<T>,
        pool_index: Option<Vec<u32>>,
    },
}

/// Intermediate values of a forward pass needed by [`Network::backward`].
pub struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    embeddings: Matrix<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn embeddings(&self) -> &Matrix<T> {
        &self.embeddings
    }

    pub fn batch(&self) -> usize {
        self.embeddings.rows()
    }

    /// Distance from the nearest non-differentiable point: the smallest
    /// |pre-activation| over all ReLUs, and the smallest winner/runner-up gap
    /// over pooling windows.
    pub fn kink_margin(&self, network: &Network) -> f64 {
        let mut margin = f64::INFINITY;
        for (cache, spec) in self.layers.iter().zip(&network.layers) {
            let pre = match cache {
                LayerCache::Dense { pre, .. } | LayerCache::Conv { pre, .. } => pre,
            };
            for v in pre.as_slice() {
                margin = margin.min(v.as_f64().abs());
            }
            if let (LayerSpec::Conv(c), LayerCache::Conv { pool_index: Some(_), .. }) = (spec, cache) {
                margin = margin.min(conv::pool_margin(pre, c, self.batch()));
            }
        }
        margin
    }
}

fn relu_mask_inplace<T: Real>(grad: &mut [T], pre: &[T]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
}

/// `Z = H phi^T (+ bias)`.
pub fn forward_logits<T: Real>(classifier: &Matrix<T>, bias: Option<&[T]>, h: &Matrix<T>) -> Result<Matrix<T>> {
    if h.cols() != classifier.cols() {
        return Err(Error::shape("forward_logits", format!("embedding dim {}", classifier.cols()), h.cols()));
    }
    let mut z = h.matmul(Op::N, classifier, Op::T)?;
    if let Some(b) = bias {
        if b.len() != classifier.rows() {
            return Err(Error::shape("forward_logits bias", classifier.rows(), b.len()));
        }
        for j in 0..z.rows() {
            for (v, &bc) in z.row_mut(j).iter_mut().zip(b) {
                *v += bc;
            }
        }
    }
    Ok(z)
}

/// Gradient of the classifier given embeddings and logit gradients.
pub fn classifier_grad<T: Real>(h: &Matrix<T>, dz: &Matrix<T>, with_bias: bool) -> Result<(Matrix<T>, Option<Vec<T>>)> {
    if h.rows() != dz.rows() {
        return Err(Error::shape("classifier_grad", h.rows(), dz.rows()));
    }
    let dw = dz.matmul(Op::T, h, Op::N)?;
    let db = with_bias.then(|| dz.column_sums());
    Ok((dw, db))
}

impl Network {
    pub fn new(input: SampleShape, layers: Vec<LayerSpec>, classes: usize, classifier_bias: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one extractor layer".into()));
        }
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        let mut width = input.len();
        for (i, l) in layers.iter().enumerate() {
            if l.input_len() != width {
                return Err(Error::Config(format!(
                    "layer {i} expects {} inputs but receives {width}",
                    l.input_len()
                )));
            }
            if let LayerSpec::Conv(c) = l {
                if i == 0 && (c.in_height, c.in_width, c.in_channels) != (input.height, input.width, input.channels) {
                    return Err(Error::Config(format!("conv layer 0 does not match input shape {input:?}")));
                }
                if c.conv_height() == 0 || c.out_height() == 0 || c.out_width() == 0 {
                    return Err(Error::Config(format!("conv layer {i} has empty output")));
                }
            }
            width = l.output_len();
            if width == 0 {
                return Err(Error::Config(format!("layer {i} has no outputs")));
            }
        }
        Ok(Network {
            input,
            layers,
            classes,
            classifier_bias,
        })
    }

    pub fn mlp(input: SampleShape, hidden: usize, classes: usize) -> Result<Self> {
        Network::new(
            input,
            vec![LayerSpec::Dense {
                inputs: input.len(),
                outputs: hidden,
            }],
            classes,
            false,
        )
    }

    fn conv_stack(input: SampleShape, stages: &[(usize, usize, usize, bool)], hidden: usize, classes: usize) -> Result<Self> {
        let (mut h, mut w, mut c) = (input.height, input.width, input.channels);
        let mut layers = Vec::new();
        for &(out_channels, kernel, padding, pool) in stages {
            let spec = ConvSpec {
                in_height: h,
                in_width: w,
                in_channels: c,
                out_channels,
                kernel,
                padding,
                pool,
            };
            (h, w, c) = (spec.out_height(), spec.out_width(), out_channels);
            layers.push(LayerSpec::Conv(spec));
        }
        layers.push(LayerSpec::Dense {
            inputs: h * w * c,
            outputs: hidden,
        });
        Network::new(input, layers, classes, false)
    }

    pub fn fmnist_cnn(input: SampleShape, classes: usize) -> Result<Self> {
        Network::conv_stack(input, &[(16, 5, 0, true), (32, 5, 0, true)], 128, classes)
    }

    pub fn cifar_cnn(input: SampleShape, classes: usize) -> Result<Self> {
        Network::conv_stack(input, &[(16, 5, 0, true), (32, 5, 0, true), (64, 3, 1, false)], 128, classes)
    }

    /// Small convolutional stack with a custom hidden width; used for
    /// gradient checks on models with a few hundred parameters.
    pub fn tiny_cnn(input: SampleShape, channels: usize, hidden: usize, classes: usize) -> Result<Self> {
        Network::conv_stack(input, &[(channels, 3, 1, true)], hidden, classes)
    }

    pub fn for_choice(choice: ModelChoice, input: SampleShape, hidden: usize, classes: usize) -> Result<Self> {
        match choice {
            ModelChoice::Mlp => Network::mlp(input, hidden, classes),
            ModelChoice::FmnistCnn => Network::fmnist_cnn(input, classes),
            ModelChoice::CifarCnn => Network::cifar_cnn(input, classes),
        }
    }

    pub fn with_classifier_bias(mut self, enabled: bool) -> Self {
        self.classifier_bias = enabled;
        self
    }

    pub fn input_shape(&self) -> SampleShape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::output_len)
    }

    pub fn has_classifier_bias(&self) -> bool {
        self.classifier_bias
    }

    pub fn zeros<T: Real>(&self) -> ModelParams<T> {
        ModelParams {
            extractor: self
                .layers
                .iter()
                .map(|l| {
                    let (r, c) = l.weight_shape();
                    LayerParams {
                        weight: Matrix::zeros(r, c),
                        bias: vec![T::zero(); c],
                    }
                })
                .collect(),
            classifier: Matrix::zeros(self.classes, self.embed_dim()),
            classifier_bias: self.classifier_bias.then(|| vec![T::zero(); self.classes]),
        }
    }

    /// Uniform fan-in initialization: He-uniform bound `sqrt(6 / fan_in)` for
    /// ReLU layers and `1 / sqrt(d_h)` for the classifier; biases start at 0.
    /// Draws happen in f64 so both precisions see the same values.
    pub fn init<T: Real>(&self, rng: &mut impl Rng) -> ModelParams<T> {
        let mut p = self.zeros::<T>();
        for layer in &mut p.extractor {
            let bound = (6.0 / layer.weight.rows() as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = T::from_f64(rng.random_range(-bound..bound));
            }
        }
        let bound = 1.0 / (self.embed_dim() as f64).sqrt();
        for w in p.classifier.as_mut_slice() {
            *w = T::from_f64(rng.random_range(-bound..bound));
        }
        p
    }

    /// Check that a parameter set has exactly this network's shapes.
    pub fn check_params<T: Real>(&self, params: &ModelParams<T>) -> Result<()> {
        let expect = self.zeros::<T>();
        if !expect.same_shape(params) || expect.classifier.shape() != params.classifier.shape() {
            return Err(Error::shape(
                "Network::check_params",
                format!("{} parameters (C={}, d_h={})", expect.num_params(), self.classes, self.embed_dim()),
                format!("{} parameters (C={}, d_h={})", params.num_params(), params.classes(), params.embed_dim()),
            ));
        }
        for (l, s) in params.extractor.iter().zip(&self.layers) {
            if l.weight.shape() != s.weight_shape() {
                return Err(Error::shape("Network::check_params", format!("{:?}", s.weight_shape()), format!("{:?}", l.weight.shape())));
            }
        }
        Ok(())
    }

    /// Embeddings `H = f_theta(X)` plus the cache for backpropagation.
    pub fn forward_features<T: Real>(&self, params: &ModelParams<T>, x: &Matrix<T>) -> Result<(Matrix<T>, ForwardCache<T>)> {
        if x.cols() != self.input.len() {
            return Err(Error::shape("forward_features input", self.input.len(), x.cols()));
        }
        if params.extractor.len() != self.layers.len() {
            return Err(Error::shape("forward_features layers", self.layers.len(), params.extractor.len()));
        }
        let batch = x.rows();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for (spec, lp) in self.layers.iter().zip(&params.extractor) {
            if lp.weight.shape() != spec.weight_shape() || lp.bias.len() != spec.weight_shape().1 {
                return Err(Error::shape("forward_features weights", format!("{:?}", spec.weight_shape()), format!("{:?}", lp.weight.shape())));
            }
            match spec {
                LayerSpec::Dense { .. } => {
                    let mut pre = act.matmul(Op::N, &lp.weight, Op::N)?;
                    add_row_bias(&mut pre, &lp.bias);
                    let out = pre.map(|v| v.max(T::zero()));
                    caches.push(LayerCache::Dense { input: act, pre });
                    act = out;
                }
                LayerSpec::Conv(c) => {
                    let cols = conv::im2col(&act, c);
                    let mut pre = cols.matmul(Op::N, &lp.weight, Op::N)?;
                    add_row_bias(&mut pre, &lp.bias);
                    let (out, pool_index) = if c.pool {
                        let (o, idx) = conv::relu_max_pool(&pre, c, batch);
                        (o, Some(idx))
                    } else {
                        (pre.map(|v| v.max(T::zero())).reshape(batch, c.output_len())?, None)
                    };
                    caches.push(LayerCache::Conv { cols, pre, pool_index });
                    act = out;
                }
            }
        }
        let cache = ForwardCache {
            layers: caches,
            embeddings: act.clone(),
        };
        Ok((act, cache))
    }

    pub fn forward_logits<T: Real>(&self, params: &ModelParams<T>, h: &Matrix<T>) -> Result<Matrix<T>> {
        if params.classes() != self.classes {
            return Err(Error::shape("forward_logits classes", self.classes, params.classes()));
        }
        forward_logits(&params.classifier, params.classifier_bias.as_deref(), h)
    }

    /// Embeddings, logits and cache in one call.
    pub fn forward<T: Real>(&self, params: &ModelParams<T>, x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>, ForwardCache<T>)> {
        let (h, cache) = self.forward_features(params, x)?;
        let z = self.forward_logits(params, &h)?;
        Ok((h, z, cache))
    }

    /// Gradients of all parameters given `dL/dZ`.
    pub fn backward<T: Real>(&self, params: &ModelParams<T>, cache: &ForwardCache<T>, dz: &Matrix<T>) -> Result<ModelParams<T>> {
        let batch = cache.batch();
        if dz.shape() != (batch, self.classes) {
            return Err(Error::shape("backward dL/dZ", format!("{batch}x{}", self.classes), format!("{}x{}", dz.rows(), dz.cols())));
        }
        if cache.layers.len() != self.layers.len() || params.extractor.len() != self.layers.len() {
            return Err(Error::Internal("forward cache does not belong to this network".into()));
        }
        let mut grads = self.zeros::<T>();
        let (dw, db) = classifier_grad(&cache.embeddings, dz, params.classifier_bias.is_some())?;
        grads.classifier = dw;
        grads.classifier_bias = db;
        let mut d_out = dz.matmul(Op::N, &params.classifier, Op::N)?;

        for i in (0..self.layers.len()).rev() {
            let weight = &params.extractor[i].weight;
            let g = &mut grads.extractor[i];
            let need_input_grad = i > 0;
            d_out = match (&self.layers[i], &cache.layers[i]) {
                (LayerSpec::Dense { .. }, LayerCache::Dense { input, pre }) => {
                    let mut d_pre = d_out;
                    relu_mask_inplace(d_pre.as_mut_slice(), pre.as_slice());
                    gemm(T::one(), input, Op::T, &d_pre, Op::N, T::zero(), &mut g.weight)?;
                    g.bias = d_pre.column_sums();
                    if need_input_grad {
                        d_pre.matmul(Op::N, weight, Op::T)?
                    } else {
                        Matrix::zeros(0, 0)
                    }
                }
                (LayerSpec::Conv(c), LayerCache::Conv { cols, pre, pool_index }) => {
                    let mut d_pre = match pool_index {
                        Some(idx) => {
                            let mut d = Matrix::zeros(pre.rows(), pre.cols());
                            let buf = d.as_mut_slice();
                            for (&k, &v) in idx.iter().zip(d_out.as_slice()) {
                                buf[k as usize] += v;
                            }
                            d
                        }
                        None => d_out.reshape(pre.rows(), pre.cols())?,
                    };
                    relu_mask_inplace(d_pre.as_mut_slice(), pre.as_slice());
                    gemm(T::one(), cols, Op::T, &d_pre, Op::N, T::zero(), &mut g.weight)?;
                    g.bias = d_pre.column_sums();
                    if need_input_grad {
                        let dcols = d_pre.matmul(Op::N, weight, Op::T)?;
                        conv::col2im(&dcols, c, batch)
                    } else {
                        Matrix::zeros(0, 0)
                    }
                }
                _ => return Err(Error::Internal(format!("layer {i} cache kind does not match spec"))),
            };
        }
        Ok(grads)
    }

    /// Predicted class per row: argmax of the logits, ties to the lowest id.
    pub fn predict<T: Real>(&self, params: &ModelParams<T>, x: &Matrix<T>) -> Result<Vec<usize>> {
        let (_, z, _) = self.forward(params, x)?;
        Ok((0..z.rows()).map(|j| argmax(z.row(j))).collect())
    }
}

fn add_row_bias<T: Real>(m: &mut Matrix<T>, bias: &[T]) {
    for j in 0..m.rows() {
        for (v, &b) in m.row_mut(j).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
