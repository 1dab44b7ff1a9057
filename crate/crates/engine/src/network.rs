use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{EngineError, Result};
use crate::layer::{Layer, LayerKind, Padding, BATCH_NORM_EPSILON, BATCH_NORM_MOMENTUM};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch-norm uses batch statistics, caches kept for backward.
    Training,
    /// Dropout is the identity, batch-norm uses moving statistics, no caching.
    Inference,
}

/// Which parameter gradients `backward` computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    /// Every layer with weights, frozen or not.
    All,
    /// Skip weight gradients of frozen layers; input gradients still flow
    /// through them.
    TrainableOnly,
}

/// Gradients for one layer. `params` is empty for weightless layers and for
/// frozen layers skipped under [`GradScope::TrainableOnly`].
#[derive(Clone, Debug)]
pub struct LayerGrads<T: Real = f32> {
    pub params: Vec<Tensor<T>>,
    /// False for frozen layers: the gradient exists for inspection only.
    pub apply: bool,
}

#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f32> {
    pub layers: Vec<LayerGrads<T>>,
    /// Gradient with respect to the network input.
    pub input: Tensor<T>,
}

/// An ordered stack of layers with a fixed per-sample input shape.
#[derive(Clone, Debug)]
pub struct Network<T: Real = f32> {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    rng: ChaCha8Rng,
}

impl<T: Real> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.input_shape == other.input_shape && self.layers == other.layers
    }
}

const DROPOUT_STREAM: u64 = 0x6f62_666e_6574;

impl<T: Real> Network<T> {
    /// Assembles a network from prebuilt layers, checking that each layer's
    /// input shape equals its predecessor's output shape.
    pub fn from_layers(name: impl Into<String>, input_shape: &[usize], layers: Vec<Layer<T>>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(EngineError::InvalidShape(input_shape.to_vec()));
        }
        let mut shape = input_shape.to_vec();
        for (index, layer) in layers.iter().enumerate() {
            if layer.input_shape() != shape.as_slice() {
                return Err(EngineError::LayerShape {
                    index,
                    kind: layer.kind().name(),
                    reason: format!("input shape {:?} does not follow {:?}", layer.input_shape(), shape),
                });
            }
            shape = layer.output_shape().to_vec();
        }
        Ok(Network {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            layers,
            rng: ChaCha8Rng::seed_from_u64(DROPOUT_STREAM),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers.last().map_or(&self.input_shape, |l| l.output_shape())
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer_mut(&mut self, index: usize) -> &mut Layer<T> {
        &mut self.layers[index]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Marks every layer frozen (or trainable).
    pub fn set_trainable(&mut self, trainable: bool) {
        for l in &mut self.layers {
            l.set_trainable(trainable);
        }
    }

    /// Re-seeds the dropout mask stream.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_STREAM);
    }

    /// Number of weight elements, trainable and frozen, excluding batch-norm
    /// moving statistics.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Weight elements plus non-trainable state.
    pub fn total_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count() + l.buffer_count()).sum()
    }

    /// All weights flattened in layer order.
    pub fn flat_params(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.params().iter().flat_map(|t| t.data().iter().copied()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
            rng: self.rng.clone(),
        }
    }

    /// True if every weight and state value is finite.
    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.params().iter().chain(l.buffers()).all(Tensor::is_finite))
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        if batch.rank() < 2 || batch.sample_shape() != self.input_shape.as_slice() {
            return Err(EngineError::InputShape {
                expected: self.input_shape.clone(),
                actual: batch.shape().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        Ok(())
    }

    /// Runs a batch through the network. Training mode caches activations
    /// for [`Network::backward`] and may update batch-norm statistics.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Inference => {
                for l in &mut self.layers {
                    l.clear_cache();
                }
                self.predict(batch)
            }
            Mode::Training => {
                self.check_input(batch)?;
                let mut x = batch.clone();
                for layer in &mut self.layers {
                    x = layer.forward_training(x, &mut self.rng);
                }
                Ok(x)
            }
        }
    }

    /// Inference-mode forward pass through a shared reference.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut layers = self.layers.iter();
        let Some(first) = layers.next() else {
            return Ok(batch.clone());
        };
        let mut x = first.forward_inference(batch);
        for layer in layers {
            x = layer.forward_inference(&x);
        }
        Ok(x)
    }

    /// Backpropagates a gradient with respect to the network output.
    pub fn backward(&mut self, output_grad: &Tensor<T>, scope: GradScope) -> Result<Gradients<T>> {
        self.backward_from(self.layers.len(), output_grad.clone(), scope)
    }

    /// Backpropagates a gradient with respect to the pre-softmax logits,
    /// skipping the terminal softmax layer. Pair with [`crate::cross_entropy`].
    pub fn backward_logits(&mut self, logits_grad: &Tensor<T>, scope: GradScope) -> Result<Gradients<T>> {
        let n = self.layers.len();
        match self.layers.last() {
            Some(l) if matches!(l.kind(), LayerKind::Softmax) => {}
            _ => {
                return Err(EngineError::LayerShape {
                    index: n.saturating_sub(1),
                    kind: self.layers.last().map_or("none", |l| l.kind().name()),
                    reason: "fused softmax gradient needs a terminal softmax layer".into(),
                })
            }
        }
        if !self.layers[n - 1].has_cache() {
            return Err(EngineError::NoForwardCache(n - 1));
        }
        self.layers[n - 1].clear_cache();
        self.backward_from(n - 1, logits_grad.clone(), scope)
    }

    fn backward_from(&mut self, end: usize, grad: Tensor<T>, scope: GradScope) -> Result<Gradients<T>> {
        let expected = if end == 0 {
            self.input_shape.clone()
        } else {
            self.layers[end - 1].output_shape().to_vec()
        };
        if grad.rank() < 2 || grad.sample_shape() != expected.as_slice() {
            return Err(EngineError::InputShape {
                expected,
                actual: grad.shape().get(1..).unwrap_or(&[]).to_vec(),
            });
        }
        let mut grads: Vec<LayerGrads<T>> = self
            .layers
            .iter()
            .map(|l| LayerGrads {
                params: Vec::new(),
                apply: l.trainable() && l.kind().has_weights(),
            })
            .collect();
        let mut g = grad;
        for index in (0..end).rev() {
            let layer = &mut self.layers[index];
            let want = layer.kind().has_weights() && (scope == GradScope::All || layer.trainable());
            let (params, dx) = layer.backward(index, g, want)?;
            grads[index].params = params;
            g = dx;
        }
        Ok(Gradients { layers: grads, input: g })
    }
}

/// Fluent construction that infers each layer's input size from the
/// running shape.
#[derive(Clone, Debug)]
pub struct NetworkBuilder {
    name: String,
    input_shape: Vec<usize>,
    kinds: Vec<LayerKind>,
    shape: std::result::Result<Vec<usize>, EngineError>,
}

impl NetworkBuilder {
    pub fn new(name: impl Into<String>, input_shape: &[usize]) -> Self {
        NetworkBuilder {
            name: name.into(),
            input_shape: input_shape.to_vec(),
            kinds: Vec::new(),
            shape: Ok(input_shape.to_vec()),
        }
    }

    /// Appends an explicit layer kind.
    pub fn layer(mut self, kind: LayerKind) -> Self {
        if let Ok(shape) = &self.shape {
            let index = self.kinds.len();
            self.shape = kind.output_shape(shape).map_err(|reason| EngineError::LayerShape {
                index,
                kind: kind.name(),
                reason,
            });
        }
        self.kinds.push(kind);
        self
    }

    fn current_dim(&self, axis: usize) -> usize {
        match &self.shape {
            Ok(s) => s.get(axis).copied().unwrap_or(0),
            Err(_) => 0,
        }
    }

    fn current_rank(&self) -> usize {
        self.shape.as_ref().map_or(0, Vec::len)
    }

    pub fn dense(self, outputs: usize) -> Self {
        // a rank != 1 input is reported by the shape check of the kind itself
        let inputs = if self.current_rank() == 1 {
            self.current_dim(0)
        } else {
            self.shape.as_ref().map_or(0, |s| s.iter().product())
        };
        self.layer(LayerKind::Dense { inputs, outputs })
    }

    pub fn conv2d(self, out_channels: usize, kernel: (usize, usize), stride: usize, padding: Padding) -> Self {
        let in_channels = self.current_dim(0);
        self.layer(LayerKind::Conv2D {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn max_pool(self, pool: (usize, usize), stride: usize, padding: Padding) -> Self {
        self.layer(LayerKind::MaxPool2D { pool, stride, padding })
    }

    /// Batch normalization over the leading (channel) axis with default
    /// momentum 0.99 and epsilon 1e-3.
    pub fn batch_norm(self) -> Self {
        let channels = self.current_dim(0);
        self.layer(LayerKind::BatchNorm {
            channels,
            momentum: BATCH_NORM_MOMENTUM,
            epsilon: BATCH_NORM_EPSILON,
        })
    }

    pub fn dropout(self, rate: f32) -> Self {
        self.layer(LayerKind::Dropout { rate })
    }

    pub fn relu(self) -> Self {
        self.layer(LayerKind::ReLU)
    }

    pub fn softmax(self) -> Self {
        self.layer(LayerKind::Softmax)
    }

    pub fn flatten(self) -> Self {
        self.layer(LayerKind::Flatten)
    }

    pub fn reshape(self, target: &[usize]) -> Self {
        self.layer(LayerKind::Reshape { target: target.to_vec() })
    }

    /// Instantiates the layers with seeded initial weights. The dropout
    /// stream is seeded from the same seed.
    pub fn build<T: Real>(self, seed: u64) -> Result<Network<T>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(EngineError::InvalidShape(self.input_shape));
        }
        self.shape?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::with_capacity(self.kinds.len());
        for (index, kind) in self.kinds.into_iter().enumerate() {
            let name = kind.name();
            let layer = Layer::new(kind, &shape, &mut rng).map_err(|reason| EngineError::LayerShape {
                index,
                kind: name,
                reason,
            })?;
            shape = layer.output_shape().to_vec();
            layers.push(layer);
        }
        let mut net = Network::from_layers(self.name, &self.input_shape, layers)?;
        net.reseed(seed);
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Network<f64> {
        NetworkBuilder::new("mlp", &[4])
            .dense(6)
            .relu()
            .dropout(0.5)
            .dense(3)
            .softmax()
            .build(11)
            .unwrap()
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let err = NetworkBuilder::new("bad", &[4])
            .dense(3)
            .reshape(&[2, 2])
            .build::<f32>(0)
            .unwrap_err();
        match err {
            EngineError::LayerShape { index, kind, .. } => {
                assert_eq!(index, 1);
                assert_eq!(kind, "reshape");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = NetworkBuilder::new("bad", &[2, 3]).dense(3).build::<f32>(0).unwrap_err();
        assert!(matches!(err, EngineError::LayerShape { index: 0, kind: "dense", .. }));
    }

    #[test]
    fn input_mismatch_is_reported() {
        let net = mlp();
        let err = net.predict(&Tensor::zeros(&[2, 5])).unwrap_err();
        assert!(matches!(err, EngineError::InputShape { .. }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let net = mlp();
        let x = Tensor::from_f64(vec![3, 4], &[0.5, -1., 2., 3., 0., 0., 0., 0., 9., -9., 1., 1.]).unwrap();
        let y = net.predict(&x).unwrap();
        for row in y.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn inference_mode_disables_dropout() {
        let mut net = mlp();
        let x = Tensor::from_f64(vec![1, 4], &[0.3, 0.1, -0.2, 0.9]).unwrap();
        let a = net.forward(&x, Mode::Inference).unwrap();
        let b = net.forward(&x, Mode::Inference).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, net.predict(&x).unwrap());
    }

    #[test]
    fn backward_requires_training_forward() {
        let mut net = mlp();
        let g = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            net.backward_logits(&g, GradScope::All),
            Err(EngineError::NoForwardCache(_))
        ));
        let x = Tensor::zeros(&[1, 4]);
        net.forward(&x, Mode::Inference).unwrap();
        assert!(net.backward(&g, GradScope::All).is_err());
    }

    #[test]
    fn frozen_layers_flagged_and_skippable() {
        let mut net = mlp();
        net.layer_mut(0).set_trainable(false);
        let x = Tensor::from_f64(vec![2, 4], &[1., 2., 3., 4., -1., 0., 1., 2.]).unwrap();
        net.forward(&x, Mode::Training).unwrap();
        let g = net.backward_logits(&Tensor::full(&[2, 3], 0.1), GradScope::All).unwrap();
        assert!(!g.layers[0].apply);
        assert_eq!(g.layers[0].params.len(), 2);
        assert!(g.layers[3].apply);
        net.forward(&x, Mode::Training).unwrap();
        let g = net
            .backward_logits(&Tensor::full(&[2, 3], 0.1), GradScope::TrainableOnly)
            .unwrap();
        assert!(g.layers[0].params.is_empty());
        assert_eq!(g.input.shape(), &[2, 4]);
    }

    #[test]
    fn empty_network_is_identity() {
        let net = NetworkBuilder::new("empty", &[3]).build::<f32>(0).unwrap();
        assert_eq!(net.param_count(), 0);
        let x = Tensor::new(vec![1, 3], vec![1., 2., 3.]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), x);
        assert_eq!(net.output_shape(), &[3]);
    }

    #[test]
    fn same_seed_same_weights() {
        assert_eq!(mlp(), mlp());
        let other = NetworkBuilder::new("mlp", &[4])
            .dense(6)
            .relu()
            .dropout(0.5)
            .dense(3)
            .softmax()
            .build::<f64>(12)
            .unwrap();
        assert_ne!(mlp(), other);
    }
}
