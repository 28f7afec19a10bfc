//! Fixed-topology MLP: a tanh feature extractor followed by a linear softmax
//! classifier, with hand-written reverse-mode gradients and an EMA shadow of
//! the feature extractor.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor2D;

/// Fully connected layer; `weights` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weights: Tensor2D<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Tensor2D::zeros(input, output),
            bias: vec![T::zero(); output],
        }
    }

    /// Uniform in `[-s, s]` with `s = 1/sqrt(fan_in)` for weights and bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let s = 1.0 / (input.max(1) as f64).sqrt();
        let mut layer = Self::zeros(input, output);
        for w in layer.weights.data_mut() {
            *w = T::of(rng.random_range(-s..=s));
        }
        for b in &mut layer.bias {
            *b = T::of(rng.random_range(-s..=s));
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    fn affine(&self, x: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("Dense::affine", self.input_dim(), x.cols()));
        }
        let mut z = x.matmul(&self.weights)?;
        z.add_row_vector(&self.bias)?;
        Ok(z)
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.weights.shape() == other.weights.shape() && self.bias.len() == other.bias.len()
    }

    fn param_count(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    fn params(&self) -> impl Iterator<Item = &T> {
        self.weights.data().iter().chain(self.bias.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.weights.data_mut().iter_mut().chain(self.bias.iter_mut())
    }
}

/// Layer widths of a [`Network`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the tanh layers before the feature layer.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
}

impl Architecture {
    fn feature_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend_from_slice(&self.hidden);
        w.push(self.feature_dim);
        w
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs<T> {
    pub features: Tensor2D<T>,
    pub logits: Tensor2D<T>,
    pub probs: Tensor2D<T>,
}

#[derive(Debug, Clone)]
struct ForwardCache<T> {
    /// Input of each feature layer, then the features (classifier input).
    inputs: Vec<Tensor2D<T>>,
    /// tanh output of each feature layer.
    activations: Vec<Tensor2D<T>>,
}

/// Gradient buffers laid out like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub feature: Vec<Dense<T>>,
    pub classifier: Dense<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            feature: net
                .feature
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
            classifier: Dense::zeros(net.classifier.input_dim(), net.classifier.output_dim()),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense<T>> {
        self.feature.iter().chain(std::iter::once(&self.classifier))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<T>> {
        self.feature
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            for (x, &y) in a.params_mut().zip(b.params()) {
                *x += s * y;
            }
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.layers().flat_map(|l| l.params().copied()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.layers().all(|l| l.params().all(|v| *v == T::zero()))
    }

    pub fn all_finite(&self) -> bool {
        self.layers().all(|l| l.params().all(|v| v.is_finite()))
    }
}

/// Upstream gradients entering the network at its outputs. Either or both may
/// be set; feature gradients are added to whatever flows back from the logits.
#[derive(Debug, Clone, Copy)]
pub struct Upstream<'a, T> {
    pub logits: Option<&'a Tensor2D<T>>,
    pub features: Option<&'a Tensor2D<T>>,
}

impl<'a, T> Upstream<'a, T> {
    pub fn logits(g: &'a Tensor2D<T>) -> Self {
        Self {
            logits: Some(g),
            features: None,
        }
    }

    pub fn features(g: &'a Tensor2D<T>) -> Self {
        Self {
            logits: None,
            features: Some(g),
        }
    }
}

/// `h = g ∘ f`: tanh feature extractor `f` and linear softmax classifier `g`.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub feature: Vec<Dense<T>>,
    pub classifier: Dense<T>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        let widths = arch.feature_widths();
        let feature = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        let classifier = Dense::init(arch.feature_dim, arch.classes, rng);
        Self {
            feature,
            classifier,
            cache: None,
        }
    }

    pub fn zeros(arch: &Architecture) -> Self {
        let widths = arch.feature_widths();
        Self {
            feature: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            classifier: Dense::zeros(arch.feature_dim, arch.classes),
            cache: None,
        }
    }

    pub fn from_layers(feature: Vec<Dense<T>>, classifier: Dense<T>) -> Result<Self> {
        if feature.is_empty() {
            return Err(Error::Config("network needs at least one feature layer".into()));
        }
        for pair in feature.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::dim(
                    "Network::from_layers",
                    pair[0].output_dim(),
                    pair[1].input_dim(),
                ));
            }
        }
        let d = feature.last().map(Dense::output_dim).unwrap_or(0);
        if classifier.input_dim() != d {
            return Err(Error::dim("Network::from_layers", d, classifier.input_dim()));
        }
        Ok(Self {
            feature,
            classifier,
            cache: None,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.feature[..self.feature.len() - 1]
                .iter()
                .map(Dense::output_dim)
                .collect(),
            feature_dim: self.feature_dim(),
            classes: self.classes(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn features(&self, x: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        extract_features(&self.feature, x).map(|(f, _)| f)
    }

    /// Pure forward pass; records nothing.
    pub fn forward(&self, x: &Tensor2D<T>) -> Result<Outputs<T>> {
        let features = self.features(x)?;
        let logits = self.classifier.affine(&features)?;
        let probs = softmax_rows(&logits);
        Ok(Outputs {
            features,
            logits,
            probs,
        })
    }

    /// Forward pass that records activations for a following [`Network::backward`].
    pub fn forward_train(&mut self, x: &Tensor2D<T>) -> Result<Outputs<T>> {
        let (features, cache) = extract_features(&self.feature, x)?;
        let logits = self.classifier.affine(&features)?;
        let probs = softmax_rows(&logits);
        self.cache = Some(cache);
        Ok(Outputs {
            features,
            logits,
            probs,
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Backpropagates upstream gradients through the last recorded forward pass.
    pub fn backward(&self, upstream: Upstream<'_, T>) -> Result<Gradients<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let features = cache.inputs.last().expect("cache holds the features");
        let n = features.rows();
        let mut grads = Gradients::zeros_like(self);

        let mut grad_features = Tensor2D::zeros(n, self.feature_dim());
        if let Some(gl) = upstream.logits {
            if gl.shape() != (n, self.classes()) {
                return Err(Error::dim(
                    "Network::backward(logits)",
                    format!("{:?}", (n, self.classes())),
                    format!("{:?}", gl.shape()),
                ));
            }
            grads.classifier.weights = features.t_matmul(gl)?;
            grads.classifier.bias = gl.column_sums();
            grad_features = gl.matmul_t(&self.classifier.weights)?;
        }
        if let Some(gf) = upstream.features {
            if gf.shape() != (n, self.feature_dim()) {
                return Err(Error::dim(
                    "Network::backward(features)",
                    format!("{:?}", (n, self.feature_dim())),
                    format!("{:?}", gf.shape()),
                ));
            }
            grad_features = grad_features.add(gf)?;
        }

        let mut upstream_act = grad_features;
        for l in (0..self.feature.len()).rev() {
            let act = &cache.activations[l];
            // d tanh(z) = 1 - tanh(z)^2
            let mut dz = upstream_act;
            for (g, &a) in dz.data_mut().iter_mut().zip(act.data()) {
                *g *= T::one() - a * a;
            }
            grads.feature[l].weights = cache.inputs[l].t_matmul(&dz)?;
            grads.feature[l].bias = dz.column_sums();
            upstream_act = dz.matmul_t(&self.feature[l].weights)?;
        }
        Ok(grads)
    }

    /// Plain gradient step `θ ← θ − lr·g`.
    pub fn apply_gradients(&mut self, grads: &Gradients<T>, lr: T) {
        for (layer, g) in self.layers_mut().zip(grads.layers()) {
            for (p, &d) in layer.params_mut().zip(g.params()) {
                *p -= lr * d;
            }
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense<T>> {
        self.feature.iter().chain(std::iter::once(&self.classifier))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<T>> {
        self.feature
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn params_flat(&self) -> Vec<T> {
        self.layers().flat_map(|l| l.params().copied()).collect()
    }

    pub fn set_params_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::dim("Network::set_params_flat", self.param_count(), flat.len()));
        }
        let mut it = flat.iter();
        for layer in self.layers_mut() {
            for p in layer.params_mut() {
                *p = *it.next().expect("length checked");
            }
        }
        self.cache = None;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers().all(|l| l.params().all(|v| v.is_finite()))
    }
}

fn extract_features<T: Scalar>(
    layers: &[Dense<T>],
    x: &Tensor2D<T>,
) -> Result<(Tensor2D<T>, ForwardCache<T>)> {
    let expected = layers[0].input_dim();
    if x.cols() != expected {
        return Err(Error::dim("forward", format!("{expected} input columns"), x.cols()));
    }
    let mut inputs = Vec::with_capacity(layers.len() + 1);
    let mut activations = Vec::with_capacity(layers.len());
    let mut h = x.clone();
    for layer in layers {
        let a = layer.affine(&h)?.map(|v| v.tanh());
        inputs.push(h);
        activations.push(a.clone());
        h = a;
    }
    inputs.push(h.clone());
    Ok((
        h,
        ForwardCache {
            inputs,
            activations,
        },
    ))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(logits: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, v| if v > m { v } else { m });
    if max == T::neg_infinity() {
        return;
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Pulls a gradient with respect to softmax outputs back to the logits:
/// `dz_j = p_j (g_j − Σ_k p_k g_k)`.
pub fn softmax_backward<T: Scalar>(probs: &Tensor2D<T>, grad_probs: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if probs.shape() != grad_probs.shape() {
        return Err(Error::dim(
            "softmax_backward",
            format!("{:?}", probs.shape()),
            format!("{:?}", grad_probs.shape()),
        ));
    }
    let mut out = Tensor2D::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let g = grad_probs.row(r);
        let dot = p.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((o, &pj), &gj) in out.row_mut(r).iter_mut().zip(p).zip(g) {
            *o = pj * (gj - dot);
        }
    }
    Ok(out)
}

/// Momentum encoder: an exponential moving average of the feature-extractor
/// parameters. It never produces gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaEncoder<T> {
    layers: Vec<Dense<T>>,
    decay: T,
}

impl<T: Scalar> EmaEncoder<T> {
    pub fn new(net: &Network<T>, decay: T) -> Result<Self> {
        check_decay(decay)?;
        Ok(Self {
            layers: net.feature.clone(),
            decay,
        })
    }

    pub fn decay(&self) -> T {
        self.decay
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    /// Update with the configured decay.
    pub fn update(&mut self, net: &Network<T>) -> Result<()> {
        self.update_with(net, self.decay)
    }

    /// `shadow ← decay·shadow + (1 − decay)·live`
    pub fn update_with(&mut self, net: &Network<T>, decay: T) -> Result<()> {
        check_decay(decay)?;
        if self.layers.len() != net.feature.len()
            || self.layers.iter().zip(&net.feature).any(|(a, b)| !a.same_shape(b))
        {
            return Err(Error::dim(
                "EmaEncoder::update",
                "shadow shapes equal to the live feature extractor",
                "differing layer shapes",
            ));
        }
        let live = T::one() - decay;
        for (shadow, src) in self.layers.iter_mut().zip(&net.feature) {
            for (s, &p) in shadow.params_mut().zip(src.params()) {
                *s = decay * *s + live * p;
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor2D<T>) -> Result<Tensor2D<T>> {
        extract_features(&self.layers, x).map(|(f, _)| f)
    }
}

fn check_decay<T: Scalar>(decay: T) -> Result<()> {
    if !(decay >= T::zero() && decay < T::one()) {
        return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {decay}")));
    }
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "protoadapt-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct LayerShape {
    role: String,
    input: usize,
    output: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    layers: Vec<LayerShape>,
}

/// Writes a single-line JSON header followed by every parameter as a
/// little-endian `f64`, in [`Network::params_flat`] order.
pub fn save_checkpoint<T: Scalar, W: Write>(net: &Network<T>, mut out: W) -> Result<()> {
    let mut layers: Vec<LayerShape> = net
        .feature
        .iter()
        .map(|l| LayerShape {
            role: "feature".into(),
            input: l.input_dim(),
            output: l.output_dim(),
        })
        .collect();
    layers.push(LayerShape {
        role: "classifier".into(),
        input: net.classifier.input_dim(),
        output: net.classifier.output_dim(),
    });
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        layers,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for p in net.params_flat() {
        out.write_all(&p.as_f64().to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar, R: BufRead>(mut input: R) -> Result<Network<T>> {
    let mut line = Vec::new();
    input.read_until(b'\n', &mut line)?;
    let header: CheckpointHeader = serde_json::from_slice(&line)?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    let (cls, feats) = header
        .layers
        .split_last()
        .ok_or_else(|| Error::Schema("checkpoint lists no layers".into()))?;
    if cls.role != "classifier" || feats.iter().any(|l| l.role != "feature") {
        return Err(Error::Schema("layer roles must be feature…, classifier".into()));
    }
    let feature = feats.iter().map(|l| Dense::zeros(l.input, l.output)).collect();
    let mut net = Network::from_layers(feature, Dense::zeros(cls.input, cls.output))?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != net.param_count() * 8 {
        return Err(Error::Schema(format!(
            "expected {} parameter bytes, found {}",
            net.param_count() * 8,
            bytes.len()
        )));
    }
    let flat: Vec<T> = bytes
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
        .collect();
    net.set_params_flat(&flat)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Architecture {
        Architecture {
            input_dim: 2,
            hidden: vec![5],
            feature_dim: 3,
            classes: 4,
        }
    }

    #[test]
    fn zero_network_gives_uniform_probs() {
        let net = Network::<f64>::zeros(&arch());
        let x = Tensor2D::from_f64_rows(&[&[1.0, -3.0], &[0.2, 7.0]]).unwrap();
        let out = net.forward(&x).unwrap();
        for v in out.probs.data() {
            assert_eq!(*v, 0.25);
        }
    }

    #[test]
    fn identity_feature_layer_applies_tanh() {
        let mut layer = Dense::<f64>::zeros(2, 2);
        layer.weights.set(0, 0, 1.0);
        layer.weights.set(1, 1, 1.0);
        let net = Network::from_layers(vec![layer], Dense::zeros(2, 2)).unwrap();
        let x = Tensor2D::from_f64_rows(&[&[1.0, 2.0]]).unwrap();
        let f = net.forward(&x).unwrap().features;
        assert_eq!(f.row(0), &[1.0f64.tanh(), 2.0f64.tanh()]);
    }

    #[test]
    fn empty_batch_keeps_columns() {
        let net = Network::<f64>::new(&arch(), &mut ChaCha8Rng::seed_from_u64(1));
        let out = net.forward(&Tensor2D::zeros(0, 2)).unwrap();
        assert_eq!(out.features.shape(), (0, 3));
        assert_eq!(out.probs.shape(), (0, 4));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Network::<f64>::zeros(&arch());
        assert!(matches!(
            net.forward(&Tensor2D::zeros(1, 3)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let net = Network::<f64>::zeros(&arch());
        let g = Tensor2D::zeros(1, 4);
        assert!(matches!(net.backward(Upstream::logits(&g)), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut net = Network::<f64>::new(&arch(), &mut ChaCha8Rng::seed_from_u64(3));
        let x = Tensor2D::from_f64_rows(&[&[0.3, -0.1], &[1.0, 2.0]]).unwrap();
        net.forward_train(&x).unwrap();
        let g = Tensor2D::zeros(2, 4);
        let gf = Tensor2D::zeros(2, 3);
        let grads = net
            .backward(Upstream {
                logits: Some(&g),
                features: Some(&gf),
            })
            .unwrap();
        assert!(grads.is_zero());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let l = Tensor2D::<f64>::from_f64_rows(&[&[1000.0, -1000.0, 999.0]]).unwrap();
        let p = softmax_rows(&l);
        assert!(p.all_finite());
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = Network::<f64>::new(&arch(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = Network::<f64>::new(&arch(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a.params_flat(), b.params_flat());
        let s = 1.0 / 2f64.sqrt();
        assert!(a.feature[0].weights.data().iter().all(|w| w.abs() <= s));
    }

    #[test]
    fn ema_decay_zero_copies_live() {
        let net = Network::<f64>::new(&arch(), &mut ChaCha8Rng::seed_from_u64(4));
        let mut ema = EmaEncoder::new(&Network::zeros(&arch()), 0.5).unwrap();
        ema.update_with(&net, 0.0).unwrap();
        let x = Tensor2D::from_f64_rows(&[&[0.4, 0.9], &[-2.0, 1.0]]).unwrap();
        assert_eq!(ema.forward(&x).unwrap(), net.features(&x).unwrap());
    }

    #[test]
    fn ema_two_half_steps() {
        let mut live = Network::<f64>::zeros(&arch());
        let n = live.param_count();
        live.set_params_flat(&vec![4.0; n]).unwrap();
        let mut ema = EmaEncoder::new(&Network::zeros(&arch()), 0.5).unwrap();
        ema.update(&live).unwrap();
        ema.update(&live).unwrap();
        for l in ema.layers() {
            assert!(l.params().all(|&v| v == 3.0));
        }
    }

    #[test]
    fn ema_near_one_decay() {
        let eps = 1e-3;
        let mut live = Network::<f64>::zeros(&arch());
        let n = live.param_count();
        live.set_params_flat(&vec![1.0; n]).unwrap();
        let mut ema = EmaEncoder::new(&Network::zeros(&arch()), 1.0 - eps).unwrap();
        ema.update(&live).unwrap();
        for l in ema.layers() {
            assert!(l.params().all(|&v| (v - eps).abs() < 1e-15));
        }
    }

    #[test]
    fn ema_zero_shadow_gives_tanh_bias() {
        let mut shadow = Network::<f64>::zeros(&arch());
        let last = shadow.feature.len() - 1;
        shadow.feature[last].bias = vec![0.5, -1.0, 2.0];
        let ema = EmaEncoder::new(&shadow, 0.9).unwrap();
        let x = Tensor2D::from_f64_rows(&[&[3.0, 4.0], &[-1.0, 0.0]]).unwrap();
        let f = ema.forward(&x).unwrap();
        for r in f.row_iter() {
            assert_eq!(r, &[0.5f64.tanh(), (-1.0f64).tanh(), 2.0f64.tanh()]);
        }
        assert_eq!(ema.forward(&Tensor2D::zeros(0, 2)).unwrap().shape(), (0, 3));
    }

    #[test]
    fn ema_rejects_bad_decay_and_shape() {
        let net = Network::<f64>::zeros(&arch());
        assert!(EmaEncoder::new(&net, 1.0).is_err());
        let mut ema = EmaEncoder::new(&net, 0.5).unwrap();
        let other = Network::<f64>::zeros(&Architecture {
            hidden: vec![6],
            ..arch()
        });
        assert!(matches!(ema.update(&other), Err(Error::Dimension { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = Network::<f64>::new(&arch(), &mut ChaCha8Rng::seed_from_u64(5));
        let mut buf = Vec::new();
        save_checkpoint(&net, &mut buf).unwrap();
        let header_end = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&buf[..header_end]).unwrap();
        assert_eq!(header["version"], 1);
        assert_eq!(buf.len() - header_end - 1, net.param_count() * 8);
        let back: Network<f64> = load_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.params_flat(), net.params_flat());
        assert_eq!(back.architecture(), arch());
    }

    #[test]
    fn checkpoint_rejects_truncation() {
        let net = Network::<f64>::zeros(&arch());
        let mut buf = Vec::new();
        save_checkpoint(&net, &mut buf).unwrap();
        buf.pop();
        assert!(load_checkpoint::<f64, _>(&buf[..]).is_err());
    }
}
