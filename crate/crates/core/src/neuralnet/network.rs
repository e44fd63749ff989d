use rand::RngExt;

use super::layers::{self, sigmoid, Activation};
use super::{NnError, Tensor};
use crate::rng;

/// Input shape of every classifier: one channel, a 64×128 segment.
pub const INPUT_SHAPE: [usize; 3] = [1, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    Relu,
    MaxPool2,
    Flatten,
    Dense,
    Sigmoid,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Conv2d => 0,
            LayerKind::Relu => 1,
            LayerKind::MaxPool2 => 2,
            LayerKind::Flatten => 3,
            LayerKind::Dense => 4,
            LayerKind::Sigmoid => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => LayerKind::Conv2d,
            1 => LayerKind::Relu,
            2 => LayerKind::MaxPool2,
            3 => LayerKind::Flatten,
            4 => LayerKind::Dense,
            5 => LayerKind::Sigmoid,
            _ => return None,
        })
    }

    /// Number of parameter tensors the layer owns.
    pub fn param_count(self) -> usize {
        match self {
            LayerKind::Conv2d | LayerKind::Dense => 2,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// Kernels `[out, in, 3, 3]`, bias `[out]`.
    Conv2d { kernels: Tensor, bias: Tensor },
    Relu,
    MaxPool2,
    Flatten,
    /// Weights `[out, in]`, bias `[out]`.
    Dense { weights: Tensor, bias: Tensor },
    Sigmoid,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2 => LayerKind::MaxPool2,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Sigmoid => LayerKind::Sigmoid,
        }
    }

    /// Rebuilds a layer from its kind and parameter tensors (in `params()` order).
    pub fn from_parts(kind: LayerKind, mut params: Vec<Tensor>) -> Result<Layer, NnError> {
        if params.len() != kind.param_count() {
            return Err(NnError::ShapeMismatch(format!(
                "{kind:?} takes {} parameter tensors, got {}",
                kind.param_count(),
                params.len()
            )));
        }
        Ok(match kind {
            LayerKind::Conv2d => {
                let bias = params.pop().unwrap();
                let kernels = params.pop().unwrap();
                Layer::Conv2d { kernels, bias }
            }
            LayerKind::Dense => {
                let bias = params.pop().unwrap();
                let weights = params.pop().unwrap();
                Layer::Dense { weights, bias }
            }
            LayerKind::Relu => Layer::Relu,
            LayerKind::MaxPool2 => Layer::MaxPool2,
            LayerKind::Flatten => Layer::Flatten,
            LayerKind::Sigmoid => Layer::Sigmoid,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d { kernels, bias } => vec![kernels, bias],
            Layer::Dense { weights, bias } => vec![weights, bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d { kernels, bias } => vec![kernels, bias],
            Layer::Dense { weights, bias } => vec![weights, bias],
            _ => Vec::new(),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let mismatch = |msg: String| Err(NnError::ShapeMismatch(msg));
        match self {
            Layer::Conv2d { kernels, bias } => {
                let ks = kernels.shape();
                if input.len() != 3 || ks.len() != 4 || ks[1] != input[0] || ks[2..] != [3, 3] || bias.shape() != [ks[0]] {
                    return mismatch(format!("conv2d {ks:?} cannot consume {input:?}"));
                }
                Ok(vec![ks[0], input[1], input[2]])
            }
            Layer::MaxPool2 => {
                if input.len() != 3 || input[1] % 2 != 0 || input[2] % 2 != 0 {
                    return mismatch(format!("maxpool2 cannot consume {input:?}"));
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Dense { weights, bias } => {
                let ws = weights.shape();
                if input.len() != 1 || ws.len() != 2 || ws[1] != input[0] || bias.shape() != [ws[0]] {
                    return mismatch(format!("dense {ws:?} cannot consume {input:?}"));
                }
                Ok(vec![ws[0]])
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
        }
    }
}

/// Intermediates kept by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    /// Input to each layer, in layer order.
    inputs: Vec<Tensor>,
    /// Pooling winners for each max-pool layer.
    argmax: Vec<Option<Vec<usize>>>,
    probability: f64,
}

impl ForwardCache {
    pub fn probability(&self) -> f64 {
        self.probability
    }

    pub fn layer_input(&self, layer: usize) -> Option<&Tensor> {
        self.inputs.get(layer)
    }
}

/// Piecewise-linear region a forward pass landed in.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActivationPattern {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<usize>>,
}

/// Gradients for every parameter tensor, in [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            tensors: net.params().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Feed-forward stack ending in a single sigmoid probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
}

impl Network {
    /// Validates that the layer shapes compose and end in one sigmoid unit.
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>) -> Result<Self, NnError> {
        let net = Network { layers, input_shape };
        let shapes = net.shapes()?;
        if net.layers.last().map(Layer::kind) != Some(LayerKind::Sigmoid) {
            return Err(NnError::ShapeMismatch("network must end with a sigmoid".into()));
        }
        if shapes.last().map(Vec::as_slice) != Some(&[1]) {
            return Err(NnError::ShapeMismatch(format!(
                "network must produce one probability, produces {:?}",
                shapes.last()
            )));
        }
        for t in net.params() {
            if !t.is_finite() {
                return Err(NnError::ShapeMismatch("non-finite parameter".into()));
            }
        }
        Ok(net)
    }

    /// conv(w) → relu → pool → conv(2w) → relu → pool → flatten → dense(64)
    /// → relu → dense(1) → sigmoid, with Glorot-uniform weights and zero biases.
    pub fn default_architecture(base_filters: usize, seed: u64) -> Network {
        let mut rng = rng::seeded(seed);
        let mut uniform = |shape: &[usize], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches count")
        };
        let [c, h, w] = INPUT_SHAPE;
        let f1 = base_filters;
        let f2 = 2 * base_filters;
        let flat = f2 * (h / 4) * (w / 4);
        let hidden = 64;
        let layers = vec![
            Layer::Conv2d {
                kernels: uniform(&[f1, c, 3, 3], c * 9, f1 * 9),
                bias: Tensor::zeros(&[f1]),
            },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Conv2d {
                kernels: uniform(&[f2, f1, 3, 3], f1 * 9, f2 * 9),
                bias: Tensor::zeros(&[f2]),
            },
            Layer::Relu,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Dense {
                weights: uniform(&[hidden, flat], flat, hidden),
                bias: Tensor::zeros(&[hidden]),
            },
            Layer::Relu,
            Layer::Dense {
                weights: uniform(&[1, hidden], hidden, 1),
                bias: Tensor::zeros(&[1]),
            },
            Layer::Sigmoid,
        ];
        Network::new(layers, INPUT_SHAPE.to_vec()).expect("default architecture composes")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Output shape of each layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            cur = layer.output_shape(&cur)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Number of filters in the first convolution, if any.
    pub fn first_conv_filters(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Conv2d { kernels, .. } => Some(kernels.shape()[0]),
            _ => None,
        })
    }

    /// Copy with every parameter set to zero.
    pub fn zeroed(&self) -> Network {
        self.map_params(|_| 0.0)
    }

    /// Copy with every parameter rounded through `f32`, the on-disk precision.
    pub fn quantized(&self) -> Network {
        self.map_params(|v| v as f32 as f64)
    }

    fn map_params(&self, f: impl Fn(f64) -> f64) -> Network {
        let mut net = self.clone();
        for t in net.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        }
        net
    }

    pub fn forward(&self, input: &Tensor) -> Result<(f64, ForwardCache), NnError> {
        input.expect_shape(&self.input_shape, "network input")?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut argmax = Vec::with_capacity(self.layers.len());
        let mut cur = input.clone();
        for layer in &self.layers {
            let (next, idx) = apply(layer, &cur)?;
            inputs.push(cur);
            argmax.push(idx);
            cur = next;
        }
        let probability = cur.data()[0];
        Ok((
            probability,
            ForwardCache {
                inputs,
                argmax,
                probability,
            },
        ))
    }

    /// Forward pass without retaining intermediates.
    pub fn probability(&self, input: &Tensor) -> Result<f64, NnError> {
        input.expect_shape(&self.input_shape, "network input")?;
        let mut cur = input.clone();
        for layer in &self.layers {
            cur = apply(layer, &cur)?.0;
        }
        Ok(cur.data()[0])
    }

    /// Forward pass that also reports which side of every ReLU and which
    /// pooling winner each activation landed on.
    pub fn probability_with_pattern(&self, input: &Tensor) -> Result<(f64, ActivationPattern), NnError> {
        input.expect_shape(&self.input_shape, "network input")?;
        let mut pattern = ActivationPattern::default();
        let mut cur = input.clone();
        for layer in &self.layers {
            if let Layer::Relu = layer {
                pattern.relu.push(cur.data().iter().map(|&v| v > 0.0).collect());
            }
            let (next, idx) = apply(layer, &cur)?;
            if let Some(idx) = idx {
                pattern.pool.push(idx);
            }
            cur = next;
        }
        Ok((cur.data()[0], pattern))
    }

    pub fn loss(&self, input: &Tensor, label: u8) -> Result<f64, NnError> {
        Ok(layers::bce_loss(self.probability(input)?, label))
    }

    /// Exact gradients of the clamped binary cross-entropy w.r.t. every parameter.
    pub fn backward(&self, cache: &ForwardCache, label: u8) -> Result<Gradients, NnError> {
        let n = self.layers.len();
        if cache.inputs.len() != n || cache.argmax.len() != n {
            return Err(NnError::StaleCache(format!(
                "cache holds {} layers, network has {n}",
                cache.inputs.len()
            )));
        }
        for ((layer, shape), input) in self.layers.iter().zip(self.layer_input_shapes()?).zip(&cache.inputs) {
            if input.shape() != shape.as_slice() {
                return Err(NnError::StaleCache(format!(
                    "{:?} input cached as {:?}, expected {shape:?}",
                    layer.kind(),
                    input.shape()
                )));
            }
        }

        // Final sigmoid fused with the loss: dL/dz = p - y, zero where the clamp is active.
        let p = cache.probability;
        let y = f64::from(label);
        let dz = if (layers::BCE_EPSILON..=1.0 - layers::BCE_EPSILON).contains(&p) {
            p - y
        } else {
            0.0
        };
        let mut grad = Tensor::from_vec(vec![dz]);
        let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); n];

        for i in (0..n - 1).rev() {
            let input = &cache.inputs[i];
            grad = match &self.layers[i] {
                Layer::Conv2d { kernels, bias } => {
                    let g = layers::conv2d_backward(input, kernels, bias, &grad, i > 0)?;
                    per_layer[i] = vec![g.kernels, g.bias];
                    g.input.unwrap_or_else(|| Tensor::zeros(input.shape()))
                }
                Layer::Dense { weights, bias } => {
                    let g = layers::dense_backward(input, weights, bias, &grad)?;
                    per_layer[i] = vec![g.weights, g.bias];
                    g.input
                }
                Layer::Relu => {
                    let mut g = grad;
                    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    g.reshape(input.shape())?
                }
                Layer::Sigmoid => {
                    let mut g = grad;
                    for (d, &x) in g.data_mut().iter_mut().zip(input.data()) {
                        let s = sigmoid(x);
                        *d *= s * (1.0 - s);
                    }
                    g
                }
                Layer::MaxPool2 => {
                    let idx = cache.argmax[i]
                        .as_ref()
                        .ok_or_else(|| NnError::StaleCache("missing pooling indices".into()))?;
                    layers::maxpool2_backward(input.shape(), idx, &grad)?
                }
                Layer::Flatten => grad.reshape(input.shape())?,
            };
        }
        Ok(Gradients {
            tensors: per_layer.into_iter().flatten().collect(),
        })
    }

    fn layer_input_shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        let mut shapes = vec![self.input_shape.clone()];
        shapes.extend(self.shapes()?);
        shapes.pop();
        Ok(shapes)
    }
}

fn apply(layer: &Layer, input: &Tensor) -> Result<(Tensor, Option<Vec<usize>>), NnError> {
    Ok(match layer {
        Layer::Conv2d { kernels, bias } => (layers::conv2d(input, kernels, bias)?, None),
        Layer::Relu => (layers::activation(input, Activation::Relu), None),
        Layer::Sigmoid => (layers::activation(input, Activation::Sigmoid), None),
        Layer::MaxPool2 => {
            let (out, idx) = layers::maxpool2(input)?;
            (out, Some(idx))
        }
        Layer::Flatten => (input.clone().reshape(&[input.len()])?, None),
        Layer::Dense { weights, bias } => (layers::dense(input, weights, bias)?, None),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fixture_input(seed: u64) -> Tensor {
        let mut rng = rng::seeded(seed);
        let data = (0..64 * 128).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(INPUT_SHAPE.to_vec(), data).unwrap()
    }

    #[test]
    fn default_shape_algebra() {
        let net = Network::default_architecture(8, 1);
        let shapes = net.shapes().unwrap();
        let expected: Vec<Vec<usize>> = vec![
            vec![8, 64, 128],
            vec![8, 64, 128],
            vec![8, 32, 64],
            vec![16, 32, 64],
            vec![16, 32, 64],
            vec![16, 16, 32],
            vec![8192],
            vec![64],
            vec![64],
            vec![1],
            vec![1],
        ];
        assert_eq!(shapes, expected);
        let wide = Network::default_architecture(16, 1);
        assert_eq!(wide.shapes().unwrap()[6], vec![16384]);
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let net = Network::default_architecture(8, 3);
        let params = net.params();
        let limit = (6.0f64 / (9.0 + 72.0)).sqrt();
        assert!(params[0].data().iter().all(|v| v.abs() <= limit));
        assert!(params[0].data().iter().any(|v| v.abs() > limit * 0.9));
        assert!(params[1].data().iter().all(|&v| v == 0.0));
        assert_eq!(params.len(), 8);
    }

    #[test]
    fn zero_network_is_half() {
        let net = Network::default_architecture(8, 5).zeroed();
        for seed in 0..3 {
            assert_eq!(net.probability(&fixture_input(seed)).unwrap(), 0.5);
        }
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let net = Network::default_architecture(8, 42);
        let input = fixture_input(9);
        let (p1, c1) = net.forward(&input).unwrap();
        let (p2, c2) = net.forward(&input).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(c1, c2);
        assert!(p1 > 0.0 && p1 < 1.0);
        assert_eq!(net.probability(&input).unwrap(), p1);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let net = Network::default_architecture(8, 42);
        let full = Tensor::zeros(&[1, 128, 128]);
        assert!(matches!(net.forward(&full), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn output_bias_gradient_is_p_minus_y() {
        let net = Network::default_architecture(8, 11);
        let (p, cache) = net.forward(&fixture_input(2)).unwrap();
        for y in [0u8, 1] {
            let g = net.backward(&cache, y).unwrap();
            let last = g.tensors().last().unwrap();
            assert!((last.data()[0] - (p - f64::from(y))).abs() < 1e-15);
        }
    }

    #[test]
    fn perfect_prediction_has_vanishing_gradient() {
        // a saturated output bias drives p to the clamp, where the loss is flat
        let mut net = Network::default_architecture(8, 11).zeroed();
        if let Some(Layer::Dense { bias, .. }) = net.layers.get_mut(9) {
            bias.data_mut()[0] = 40.0;
        }
        let (p, cache) = net.forward(&fixture_input(1)).unwrap();
        assert!(p > 1.0 - 1e-12);
        assert!(net.backward(&cache, 1).unwrap().max_abs() < 1e-7);
    }

    #[test]
    fn stale_cache_is_detected() {
        let small = Network::default_architecture(8, 1);
        let large = Network::default_architecture(16, 1);
        let (_, cache) = small.forward(&fixture_input(0)).unwrap();
        assert!(matches!(large.backward(&cache, 1), Err(NnError::StaleCache(_))));
    }

    #[test]
    fn invalid_stacks_rejected() {
        let no_sigmoid = vec![Layer::Flatten, Layer::Dense { weights: Tensor::zeros(&[1, 8192]), bias: Tensor::zeros(&[1]) }];
        assert!(Network::new(no_sigmoid, INPUT_SHAPE.to_vec()).is_err());
        let bad_dense = vec![
            Layer::Flatten,
            Layer::Dense { weights: Tensor::zeros(&[1, 10]), bias: Tensor::zeros(&[1]) },
            Layer::Sigmoid,
        ];
        assert!(Network::new(bad_dense, INPUT_SHAPE.to_vec()).is_err());
    }

    #[test]
    fn quantization_rounds_through_f32() {
        let net = Network::default_architecture(8, 4);
        let q = net.quantized();
        for (a, b) in net.params().iter().zip(q.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, *x as f32 as f64);
            }
        }
        assert_eq!(q.quantized(), q);
    }
}
