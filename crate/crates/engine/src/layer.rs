//! Layer kinds, their shape rules, and forward/backward kernels.
//!
//! Batches are row-major with the batch dimension first. Image-like samples
//! are `[channels, height, width]`; dense layers take rank-1 samples.

use rand::Rng;

use crate::gemm::{gemm, Op};
use crate::init::glorot_uniform;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// No padding; windows must fit entirely inside the input.
    Valid,
    /// Zero padding so that `out = ceil(in / stride)`; the extra padding
    /// goes to the bottom/right when the total is odd.
    Same,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    },
    MaxPool2D {
        pool: (usize, usize),
        stride: usize,
        padding: Padding,
    },
    BatchNorm {
        channels: usize,
        momentum: f32,
        epsilon: f32,
    },
    Dropout {
        rate: f32,
    },
    ReLU,
    Softmax,
    Flatten,
    Reshape {
        target: Vec<usize>,
    },
}

pub const BATCH_NORM_MOMENTUM: f32 = 0.99;
pub const BATCH_NORM_EPSILON: f32 = 1e-3;

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2D { .. } => "conv2d",
            LayerKind::MaxPool2D { .. } => "maxpool2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::ReLU => "relu",
            LayerKind::Softmax => "softmax",
            LayerKind::Flatten => "flatten",
            LayerKind::Reshape { .. } => "reshape",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerKind::Dense { .. } | LayerKind::Conv2D { .. } | LayerKind::BatchNorm { .. }
        )
    }

    /// Shapes of the trainable tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            LayerKind::Conv2D {
                in_channels,
                out_channels,
                kernel: (kh, kw),
                ..
            } => vec![vec![out_channels, in_channels, kh, kw], vec![out_channels]],
            LayerKind::BatchNorm { channels, .. } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }

    /// Shapes of the non-trainable state tensors (batch-norm moving statistics).
    pub fn buffer_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::BatchNorm { channels, .. } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            LayerKind::Dense { inputs, outputs } if *inputs == 0 || *outputs == 0 => {
                Err("dense dimensions must be positive".into())
            }
            LayerKind::Conv2D {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } if *in_channels == 0
                || *out_channels == 0
                || kernel.0 == 0
                || kernel.1 == 0
                || *stride == 0 =>
            {
                Err("conv2d channels, kernel and stride must be positive".into())
            }
            LayerKind::MaxPool2D { pool, stride, .. } if pool.0 == 0 || pool.1 == 0 || *stride == 0 => {
                Err("pool size and stride must be positive".into())
            }
            LayerKind::BatchNorm {
                channels,
                momentum,
                epsilon,
            } => {
                if *channels == 0 {
                    Err("batchnorm channels must be positive".into())
                } else if !(0.0..=1.0).contains(momentum) {
                    Err(format!("batchnorm momentum {momentum} outside [0, 1]"))
                } else if !(*epsilon > 0.0) {
                    Err(format!("batchnorm epsilon {epsilon} must be positive"))
                } else {
                    Ok(())
                }
            }
            LayerKind::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                Err(format!("dropout rate {rate} outside [0, 1)"))
            }
            LayerKind::Reshape { target } if target.is_empty() || target.contains(&0) => {
                Err(format!("invalid reshape target {target:?}"))
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        self.validate()?;
        match self {
            LayerKind::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return Err(format!("expects input [{inputs}], got {input:?}"));
                }
                Ok(vec![*outputs])
            }
            LayerKind::Conv2D {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = image_dims(input)?;
                if c != *in_channels {
                    return Err(format!("expects {in_channels} input channels, got {c}"));
                }
                let g = WindowGeom::new(c, h, w, *kernel, *stride, *padding)?;
                Ok(vec![*out_channels, g.oh, g.ow])
            }
            LayerKind::MaxPool2D {
                pool,
                stride,
                padding,
            } => {
                let [c, h, w] = image_dims(input)?;
                let g = WindowGeom::new(c, h, w, *pool, *stride, *padding)?;
                Ok(vec![c, g.oh, g.ow])
            }
            LayerKind::BatchNorm { channels, .. } => {
                if input.first() != Some(channels) {
                    return Err(format!("expects {channels} channels first, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerKind::Dropout { .. } | LayerKind::ReLU => Ok(input.to_vec()),
            LayerKind::Softmax => {
                if input.len() != 1 {
                    return Err(format!("expects rank-1 samples, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Reshape { target } => {
                let a: usize = input.iter().product();
                let b: usize = target.iter().product();
                if a != b {
                    return Err(format!("cannot reshape {input:?} into {target:?}"));
                }
                Ok(target.clone())
            }
        }
    }
}

fn image_dims(input: &[usize]) -> Result<[usize; 3], String> {
    match *input {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(format!("expects [channels, height, width], got {input:?}")),
    }
}

/// Sliding-window geometry shared by convolution and pooling.
#[derive(Clone, Copy, Debug)]
struct WindowGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl WindowGeom {
    fn new(
        c: usize,
        h: usize,
        w: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Self, String> {
        let (oh, pad_top) = window_out(h, kh, stride, padding)?;
        let (ow, pad_left) = window_out(w, kw, stride, padding)?;
        Ok(WindowGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            oh,
            ow,
        })
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate for output index `o` and kernel offset `k`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
        let pos = o * stride + k;
        if pos < pad || pos - pad >= size {
            None
        } else {
            Some(pos - pad)
        }
    }
}

fn window_out(size: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize), String> {
    match padding {
        Padding::Valid => {
            if size < k {
                return Err(format!("window {k} larger than input {size} with valid padding"));
            }
            Ok(((size - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(size);
            Ok((out, total / 2))
        }
    }
}

#[derive(Clone, Debug)]
enum Cache<T> {
    Dense { input: Vec<T> },
    Conv { cols: Vec<T> },
    Pool { argmax: Vec<usize> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, frozen: bool },
    Dropout { mask: Option<Vec<T>> },
    Relu { active: Vec<bool> },
    Softmax { output: Vec<T> },
    Shape,
}

/// One layer with its weights, non-trainable state, and forward cache.
#[derive(Clone, Debug)]
pub struct Layer<T: Real = f32> {
    kind: LayerKind,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    params: Vec<Tensor<T>>,
    buffers: Vec<Tensor<T>>,
    trainable: bool,
    cache: Option<Cache<T>>,
}

impl<T: Real> PartialEq for Layer<T> {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.input_shape == other.input_shape
            && self.params == other.params
            && self.buffers == other.buffers
            && self.trainable == other.trainable
    }
}

impl<T: Real> Layer<T> {
    /// Creates a layer with freshly initialized weights: Glorot-uniform
    /// kernels, zero biases, unit gamma, zero beta, zero/unit moving stats.
    pub fn new<R: Rng + ?Sized>(kind: LayerKind, input_shape: &[usize], rng: &mut R) -> Result<Self, String> {
        let output_shape = kind.output_shape(input_shape)?;
        let (params, buffers) = match kind {
            LayerKind::Dense { inputs, outputs } => (
                vec![
                    glorot_uniform(&[inputs, outputs], inputs, outputs, rng),
                    Tensor::zeros(&[outputs]),
                ],
                Vec::new(),
            ),
            LayerKind::Conv2D {
                in_channels,
                out_channels,
                kernel: (kh, kw),
                ..
            } => (
                vec![
                    glorot_uniform(
                        &[out_channels, in_channels, kh, kw],
                        in_channels * kh * kw,
                        out_channels * kh * kw,
                        rng,
                    ),
                    Tensor::zeros(&[out_channels]),
                ],
                Vec::new(),
            ),
            LayerKind::BatchNorm { channels, .. } => (
                vec![Tensor::full(&[channels], T::one()), Tensor::zeros(&[channels])],
                vec![Tensor::zeros(&[channels]), Tensor::full(&[channels], T::one())],
            ),
            _ => (Vec::new(), Vec::new()),
        };
        Ok(Layer {
            kind,
            input_shape: input_shape.to_vec(),
            output_shape,
            params,
            buffers,
            trainable: true,
            cache: None,
        })
    }

    /// Reassembles a layer from stored tensors, checking every shape.
    pub fn from_parts(
        kind: LayerKind,
        input_shape: &[usize],
        params: Vec<Tensor<T>>,
        buffers: Vec<Tensor<T>>,
        trainable: bool,
    ) -> Result<Self, String> {
        let output_shape = kind.output_shape(input_shape)?;
        let want_p = kind.param_shapes();
        let want_b = kind.buffer_shapes();
        let got_p: Vec<_> = params.iter().map(|t| t.shape().to_vec()).collect();
        let got_b: Vec<_> = buffers.iter().map(|t| t.shape().to_vec()).collect();
        if want_p != got_p {
            return Err(format!("parameter shapes {got_p:?}, expected {want_p:?}"));
        }
        if want_b != got_b {
            return Err(format!("buffer shapes {got_b:?}, expected {want_b:?}"));
        }
        Ok(Layer {
            kind,
            input_shape: input_shape.to_vec(),
            output_shape,
            params,
            buffers,
            trainable,
            cache: None,
        })
    }

    pub fn kind(&self) -> &LayerKind {
        &self.kind
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    /// Only meaningful for layers with weights.
    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn buffer_count(&self) -> usize {
        self.buffers.iter().map(Tensor::len).sum()
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub(crate) fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub(crate) fn cast<U: Real>(&self) -> Layer<U> {
        Layer {
            kind: self.kind.clone(),
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            trainable: self.trainable,
            cache: None,
        }
    }

    fn batch_shape(&self, n: usize, sample: &[usize]) -> Vec<usize> {
        let mut s = Vec::with_capacity(sample.len() + 1);
        s.push(n);
        s.extend_from_slice(sample);
        s
    }

    fn out_tensor(&self, n: usize, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.batch_shape(n, &self.output_shape), data).expect("layer output shape")
    }

    fn geom(&self) -> WindowGeom {
        let [c, h, w] = image_dims(&self.input_shape).expect("validated at construction");
        match self.kind {
            LayerKind::Conv2D {
                kernel,
                stride,
                padding,
                ..
            } => WindowGeom::new(c, h, w, kernel, stride, padding),
            LayerKind::MaxPool2D {
                pool,
                stride,
                padding,
            } => WindowGeom::new(c, h, w, pool, stride, padding),
            _ => unreachable!("geom on a non-window layer"),
        }
        .expect("validated at construction")
    }

    /// Inference-mode forward pass. Never touches the cache or state.
    pub fn forward_inference(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch_size();
        match &self.kind {
            LayerKind::Dense { .. } => self.out_tensor(n, self.dense_forward(x.data(), n)),
            LayerKind::Conv2D { .. } => self.out_tensor(n, self.conv_forward(x.data(), n, None)),
            LayerKind::MaxPool2D { .. } => self.out_tensor(n, self.pool_forward(x.data(), n, None)),
            LayerKind::BatchNorm { .. } => {
                let (y, _, _) = self.batchnorm_moving(x.data(), n);
                self.out_tensor(n, y)
            }
            LayerKind::Dropout { .. } => x.clone(),
            LayerKind::ReLU => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            LayerKind::Softmax => self.out_tensor(n, softmax_rows(x.data(), self.output_shape[0])),
            LayerKind::Flatten | LayerKind::Reshape { .. } => {
                x.clone().reshape(self.batch_shape(n, &self.output_shape)).expect("reshape")
            }
        }
    }

    /// Training-mode forward pass; caches what backward needs.
    pub fn forward_training<R: Rng + ?Sized>(&mut self, x: Tensor<T>, rng: &mut R) -> Tensor<T> {
        let n = x.batch_size();
        match self.kind.clone() {
            LayerKind::Dense { .. } => {
                let y = self.dense_forward(x.data(), n);
                self.cache = Some(Cache::Dense { input: x.into_data() });
                self.out_tensor(n, y)
            }
            LayerKind::Conv2D { .. } => {
                let g = self.geom();
                let mut cols = vec![T::zero(); n * g.c * g.kh * g.kw * g.positions()];
                let y = self.conv_forward(x.data(), n, Some(&mut cols));
                self.cache = Some(Cache::Conv { cols });
                self.out_tensor(n, y)
            }
            LayerKind::MaxPool2D { .. } => {
                let mut argmax = Vec::new();
                let y = self.pool_forward(x.data(), n, Some(&mut argmax));
                self.cache = Some(Cache::Pool { argmax });
                self.out_tensor(n, y)
            }
            LayerKind::BatchNorm { momentum, .. } => {
                let frozen = !self.trainable;
                let (y, xhat, inv_std) = if frozen {
                    self.batchnorm_moving(x.data(), n)
                } else {
                    self.batchnorm_batch_stats(x.data(), n, T::from_f64(momentum as f64))
                };
                self.cache = Some(Cache::BatchNorm { xhat, inv_std, frozen });
                self.out_tensor(n, y)
            }
            LayerKind::Dropout { rate } => {
                if rate == 0.0 {
                    self.cache = Some(Cache::Dropout { mask: None });
                    return x;
                }
                let keep = 1.0 - rate as f64;
                let scale = T::from_f64(1.0 / keep);
                let mask: Vec<T> = (0..x.len())
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let mut y = x;
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v *= *m;
                }
                self.cache = Some(Cache::Dropout { mask: Some(mask) });
                y
            }
            LayerKind::ReLU => {
                let mut y = x;
                let mut active = Vec::with_capacity(y.len());
                for v in y.data_mut() {
                    let on = *v > T::zero();
                    if !on {
                        *v = T::zero();
                    }
                    active.push(on);
                }
                self.cache = Some(Cache::Relu { active });
                y
            }
            LayerKind::Softmax => {
                let y = softmax_rows(x.data(), self.output_shape[0]);
                self.cache = Some(Cache::Softmax { output: y.clone() });
                self.out_tensor(n, y)
            }
            LayerKind::Flatten | LayerKind::Reshape { .. } => {
                self.cache = Some(Cache::Shape);
                x.reshape(self.batch_shape(n, &self.output_shape)).expect("reshape")
            }
        }
    }

    /// Consumes the cache. Returns parameter gradients (empty when
    /// `param_grads` is false or the layer has no weights) and the gradient
    /// with respect to the layer input.
    pub(crate) fn backward(
        &mut self,
        index: usize,
        dy: Tensor<T>,
        param_grads: bool,
    ) -> crate::Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let cache = self.cache.take().ok_or(crate::EngineError::NoForwardCache(index))?;
        let n = dy.batch_size();
        let in_shape = self.batch_shape(n, &self.input_shape);
        let mk = |data: Vec<T>| Tensor::new(in_shape.clone(), data).expect("input grad shape");
        let out = match (&self.kind, cache) {
            (LayerKind::Dense { inputs, outputs }, Cache::Dense { input }) => {
                let (i, o) = (*inputs, *outputs);
                let w = self.params[0].data();
                let mut dx = vec![T::zero(); n * i];
                gemm(n, o, i, T::one(), dy.data(), Op::N, w, Op::T, T::zero(), &mut dx);
                let grads = if param_grads {
                    let mut dw = vec![T::zero(); i * o];
                    gemm(i, n, o, T::one(), &input, Op::T, dy.data(), Op::N, T::zero(), &mut dw);
                    let mut db = vec![T::zero(); o];
                    for row in dy.data().chunks(o) {
                        for (b, &g) in db.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                    vec![
                        Tensor::new(vec![i, o], dw).expect("dw"),
                        Tensor::new(vec![o], db).expect("db"),
                    ]
                } else {
                    Vec::new()
                };
                (grads, mk(dx))
            }
            (LayerKind::Conv2D { out_channels, .. }, Cache::Conv { cols }) => {
                let g = self.geom();
                let oc = *out_channels;
                let ckk = g.c * g.kh * g.kw;
                let p = g.positions();
                let k = self.params[0].data();
                let mut dx = vec![T::zero(); n * g.c * g.h * g.w];
                let mut dcols = vec![T::zero(); ckk * p];
                let mut dk = if param_grads { vec![T::zero(); oc * ckk] } else { Vec::new() };
                let mut db = if param_grads { vec![T::zero(); oc] } else { Vec::new() };
                for s in 0..n {
                    let dys = &dy.data()[s * oc * p..(s + 1) * oc * p];
                    if param_grads {
                        let cs = &cols[s * ckk * p..(s + 1) * ckk * p];
                        gemm(oc, p, ckk, T::one(), dys, Op::N, cs, Op::T, T::one(), &mut dk);
                        for (b, row) in db.iter_mut().zip(dys.chunks(p)) {
                            *b += row.iter().copied().sum::<T>();
                        }
                    }
                    gemm(ckk, oc, p, T::one(), k, Op::T, dys, Op::N, T::zero(), &mut dcols);
                    col2im(&dcols, &g, &mut dx[s * g.c * g.h * g.w..(s + 1) * g.c * g.h * g.w]);
                }
                let grads = if param_grads {
                    vec![
                        Tensor::new(self.params[0].shape().to_vec(), dk).expect("dk"),
                        Tensor::new(vec![oc], db).expect("db"),
                    ]
                } else {
                    Vec::new()
                };
                (grads, mk(dx))
            }
            (LayerKind::MaxPool2D { .. }, Cache::Pool { argmax }) => {
                let in_len: usize = self.input_shape.iter().product();
                let out_len: usize = self.output_shape.iter().product();
                let mut dx = vec![T::zero(); n * in_len];
                for s in 0..n {
                    let dys = &dy.data()[s * out_len..(s + 1) * out_len];
                    let am = &argmax[s * out_len..(s + 1) * out_len];
                    let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                    for (&g, &src) in dys.iter().zip(am) {
                        dxs[src] += g;
                    }
                }
                (Vec::new(), mk(dx))
            }
            (LayerKind::BatchNorm { channels, .. }, Cache::BatchNorm { xhat, inv_std, frozen }) => {
                let c = *channels;
                let spatial = self.input_shape[1..].iter().product::<usize>();
                let gamma = self.params[0].data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        for j in base..base + spatial {
                            dbeta[ch] += dy.data()[j];
                            dgamma[ch] += dy.data()[j] * xhat[j];
                        }
                    }
                }
                let mut dx = vec![T::zero(); n * c * spatial];
                let m = T::from_f64((n * spatial) as f64);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * spatial;
                        let scale = gamma[ch] * inv_std[ch];
                        for j in base..base + spatial {
                            dx[j] = if frozen {
                                dy.data()[j] * scale
                            } else {
                                scale / m * (m * dy.data()[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                            };
                        }
                    }
                }
                let grads = if param_grads {
                    vec![
                        Tensor::new(vec![c], dgamma).expect("dgamma"),
                        Tensor::new(vec![c], dbeta).expect("dbeta"),
                    ]
                } else {
                    Vec::new()
                };
                (grads, mk(dx))
            }
            (LayerKind::Dropout { .. }, Cache::Dropout { mask }) => {
                let mut dx = dy.into_data();
                if let Some(mask) = mask {
                    for (g, m) in dx.iter_mut().zip(&mask) {
                        *g *= *m;
                    }
                }
                (Vec::new(), mk(dx))
            }
            (LayerKind::ReLU, Cache::Relu { active }) => {
                let mut dx = dy.into_data();
                for (g, &on) in dx.iter_mut().zip(&active) {
                    if !on {
                        *g = T::zero();
                    }
                }
                (Vec::new(), mk(dx))
            }
            (LayerKind::Softmax, Cache::Softmax { output }) => {
                let k = self.output_shape[0];
                let mut dx = vec![T::zero(); output.len()];
                for ((y, g), d) in output.chunks(k).zip(dy.data().chunks(k)).zip(dx.chunks_mut(k)) {
                    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                (Vec::new(), mk(dx))
            }
            (LayerKind::Flatten | LayerKind::Reshape { .. }, Cache::Shape) => (Vec::new(), mk(dy.into_data())),
            _ => unreachable!("cache variant does not match layer kind"),
        };
        Ok(out)
    }

    fn dense_forward(&self, x: &[T], n: usize) -> Vec<T> {
        let LayerKind::Dense { inputs, outputs } = self.kind else {
            unreachable!()
        };
        let mut y = Vec::with_capacity(n * outputs);
        let bias = self.params[1].data();
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        gemm(n, inputs, outputs, T::one(), x, Op::N, self.params[0].data(), Op::N, T::one(), &mut y);
        y
    }

    fn conv_forward(&self, x: &[T], n: usize, mut cache: Option<&mut Vec<T>>) -> Vec<T> {
        let LayerKind::Conv2D { out_channels, .. } = self.kind else {
            unreachable!()
        };
        let g = self.geom();
        let ckk = g.c * g.kh * g.kw;
        let p = g.positions();
        let in_len = g.c * g.h * g.w;
        let oc = out_channels;
        let bias = self.params[1].data();
        let mut y = vec![T::zero(); n * oc * p];
        let mut scratch = if cache.is_none() { vec![T::zero(); ckk * p] } else { Vec::new() };
        for s in 0..n {
            let cols: &mut [T] = match cache.as_deref_mut() {
                Some(all) => &mut all[s * ckk * p..(s + 1) * ckk * p],
                None => &mut scratch,
            };
            im2col(&x[s * in_len..(s + 1) * in_len], &g, cols);
            let ys = &mut y[s * oc * p..(s + 1) * oc * p];
            for (row, &b) in ys.chunks_mut(p).zip(bias) {
                row.fill(b);
            }
            gemm(oc, ckk, p, T::one(), self.params[0].data(), Op::N, cols, Op::N, T::one(), ys);
        }
        y
    }

    fn pool_forward(&self, x: &[T], n: usize, mut argmax: Option<&mut Vec<usize>>) -> Vec<T> {
        let g = self.geom();
        let in_len = g.c * g.h * g.w;
        let mut y = Vec::with_capacity(n * g.c * g.positions());
        if let Some(am) = argmax.as_deref_mut() {
            am.reserve(n * g.c * g.positions());
        }
        for s in 0..n {
            let xs = &x[s * in_len..(s + 1) * in_len];
            for ch in 0..g.c {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut best = T::neg_infinity();
                        let mut best_at = usize::MAX;
                        for ki in 0..g.kh {
                            let Some(iy) = WindowGeom::src(oy, ki, g.stride, g.pad_top, g.h) else {
                                continue;
                            };
                            for kj in 0..g.kw {
                                let Some(ix) = WindowGeom::src(ox, kj, g.stride, g.pad_left, g.w) else {
                                    continue;
                                };
                                let at = (ch * g.h + iy) * g.w + ix;
                                if best_at == usize::MAX || xs[at] > best {
                                    best = xs[at];
                                    best_at = at;
                                }
                            }
                        }
                        y.push(best);
                        if let Some(am) = argmax.as_deref_mut() {
                            am.push(best_at);
                        }
                    }
                }
            }
        }
        y
    }

    fn bn_layout(&self) -> (usize, usize, T) {
        let LayerKind::BatchNorm { channels, epsilon, .. } = self.kind else {
            unreachable!()
        };
        let spatial = self.input_shape[1..].iter().product::<usize>();
        (channels, spatial, T::from_f64(epsilon as f64))
    }

    /// Normalizes with the moving statistics. Returns output, normalized
    /// input and per-channel `1/sqrt(var + eps)`.
    fn batchnorm_moving(&self, x: &[T], n: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (c, spatial, eps) = self.bn_layout();
        let (gamma, beta) = (self.params[0].data(), self.params[1].data());
        let (mean, var) = (self.buffers[0].data(), self.buffers[1].data());
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                for j in base..base + spatial {
                    xhat[j] = (x[j] - mean[ch]) * inv_std[ch];
                    y[j] = gamma[ch] * xhat[j] + beta[ch];
                }
            }
        }
        (y, xhat, inv_std)
    }

    fn batchnorm_batch_stats(&mut self, x: &[T], n: usize, momentum: T) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (c, spatial, eps) = self.bn_layout();
        let m = T::from_f64((n * spatial) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                mean[ch] += x[base..base + spatial].iter().copied().sum::<T>();
            }
        }
        for v in &mut mean {
            *v /= m;
        }
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                for &v in &x[base..base + spatial] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        for v in &mut var {
            *v /= m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gamma, beta) = (self.params[0].data(), self.params[1].data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * spatial;
                for j in base..base + spatial {
                    xhat[j] = (x[j] - mean[ch]) * inv_std[ch];
                    y[j] = gamma[ch] * xhat[j] + beta[ch];
                }
            }
        }
        let keep = momentum;
        let blend = T::one() - momentum;
        let moving_mean = self.buffers[0].data_mut();
        for (mm, &bm) in moving_mean.iter_mut().zip(&mean) {
            *mm = keep * *mm + blend * bm;
        }
        let moving_var = self.buffers[1].data_mut();
        for (mv, &bv) in moving_var.iter_mut().zip(&var) {
            *mv = keep * *mv + blend * bv;
        }
        (y, xhat, inv_std)
    }
}

fn im2col<T: Real>(x: &[T], g: &WindowGeom, cols: &mut [T]) {
    let p = g.positions();
    for ch in 0..g.c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = WindowGeom::src(oy, ki, g.stride, g.pad_top, g.h) else {
                        out_row.fill(T::zero());
                        continue;
                    };
                    let src_row = &plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        *v = match WindowGeom::src(ox, kj, g.stride, g.pad_left, g.w) {
                            Some(ix) => src_row[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &WindowGeom, dx: &mut [T]) {
    let p = g.positions();
    for ch in 0..g.c {
        let plane = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = WindowGeom::src(oy, ki, g.stride, g.pad_top, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(ix) = WindowGeom::src(ox, kj, g.stride, g.pad_left, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<T: Real>(x: &[T], classes: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = y.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            y.push(e);
        }
        for v in &mut y[start..] {
            *v /= sum;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn relu_rectifies_negatives() {
        let layer = Layer::<f64>::new(LayerKind::ReLU, &[3], &mut rng()).unwrap();
        let y = layer.forward_inference(&t(&[1, 3], &[-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let layer = Layer::<f64>::new(LayerKind::Softmax, &[2], &mut rng()).unwrap();
        let y = layer.forward_inference(&t(&[1, 2], &[0.0, 0.0]));
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let y = softmax_rows(&[1000.0f32, 1000.0, -1000.0], 3);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn dense_affine_identity_case() {
        let mut layer = Layer::<f64>::new(LayerKind::Dense { inputs: 1, outputs: 1 }, &[1], &mut rng()).unwrap();
        layer.params_mut()[0] = t(&[1, 1], &[2.0]);
        layer.params_mut()[1] = t(&[1], &[3.0]);
        assert_eq!(layer.forward_inference(&t(&[1, 1], &[5.0])).data(), &[13.0]);
    }

    #[test]
    fn dense_scalar_chain_rule() {
        let mut layer = Layer::<f64>::new(LayerKind::Dense { inputs: 1, outputs: 1 }, &[1], &mut rng()).unwrap();
        layer.params_mut()[0] = t(&[1, 1], &[2.0]);
        layer.params_mut()[1] = t(&[1], &[0.0]);
        let y = layer.forward_training(t(&[1, 1], &[3.0]), &mut rng());
        assert_eq!(y.data(), &[6.0]);
        let (grads, dx) = layer.backward(0, t(&[1, 1], &[1.0]), true).unwrap();
        assert_eq!(grads[0].data(), &[3.0]);
        assert_eq!(grads[1].data(), &[1.0]);
        assert_eq!(dx.data(), &[2.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let kind = LayerKind::MaxPool2D {
            pool: (2, 2),
            stride: 2,
            padding: Padding::Valid,
        };
        let mut layer = Layer::<f64>::new(kind, &[1, 2, 2], &mut rng()).unwrap();
        let y = layer.forward_training(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), &mut rng());
        assert_eq!(y.data(), &[4.0]);
        let (_, dx) = layer.backward(0, t(&[1, 1, 1, 1], &[1.0]), true).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn same_padding_shapes_follow_ceil_rule() {
        let pool = LayerKind::MaxPool2D {
            pool: (2, 2),
            stride: 2,
            padding: Padding::Same,
        };
        assert_eq!(pool.output_shape(&[5, 20, 45]).unwrap(), vec![5, 10, 23]);
        let conv = LayerKind::Conv2D {
            in_channels: 1,
            out_channels: 3,
            kernel: (2, 4),
            stride: 1,
            padding: Padding::Same,
        };
        assert_eq!(conv.output_shape(&[1, 20, 45]).unwrap(), vec![3, 20, 45]);
        let valid = LayerKind::Conv2D {
            in_channels: 1,
            out_channels: 32,
            kernel: (3, 3),
            stride: 1,
            padding: Padding::Valid,
        };
        assert_eq!(valid.output_shape(&[1, 28, 28]).unwrap(), vec![32, 26, 26]);
    }

    #[test]
    fn same_padding_puts_extra_on_bottom_right() {
        // 1x1x3 input, 2-wide window, stride 1, same padding: total pad 1 on the right
        let kind = LayerKind::MaxPool2D {
            pool: (1, 2),
            stride: 1,
            padding: Padding::Same,
        };
        let layer = Layer::<f64>::new(kind, &[1, 1, 3], &mut rng()).unwrap();
        let y = layer.forward_inference(&t(&[1, 1, 1, 3], &[1.0, 5.0, 2.0]));
        assert_eq!(y.data(), &[5.0, 5.0, 2.0]);
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let kind = LayerKind::Conv2D {
            in_channels: 2,
            out_channels: 3,
            kernel: (2, 3),
            stride: 2,
            padding: Padding::Same,
        };
        let mut r = rng();
        let layer = Layer::<f64>::new(kind, &[2, 5, 6], &mut r).unwrap();
        let x: Vec<f64> = (0..2 * 2 * 5 * 6).map(|v| ((v * 37 % 11) as f64) - 5.0).collect();
        let y = layer.forward_inference(&t(&[2, 2, 5, 6], &x));
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
        // direct: pad_top = ((3-1)*2+2-5)/2 = 0, pad_left = ((3-1)*2+3-6)/2 = 0
        let k = layer.params()[0].data();
        let b = layer.params()[1].data();
        for s in 0..2 {
            for o in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = b[o];
                        for c in 0..2 {
                            for i in 0..2 {
                                for j in 0..3 {
                                    let (iy, ix) = (oy * 2 + i, ox * 2 + j);
                                    if iy < 5 && ix < 6 {
                                        acc += k[((o * 2 + c) * 2 + i) * 3 + j] * x[((s * 2 + c) * 5 + iy) * 6 + ix];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((s * 3 + o) * 3 + oy) * 3 + ox];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn batchnorm_on_constant_batch_outputs_beta() {
        let kind = LayerKind::BatchNorm {
            channels: 2,
            momentum: BATCH_NORM_MOMENTUM,
            epsilon: BATCH_NORM_EPSILON,
        };
        let mut layer = Layer::<f64>::new(kind, &[2, 2, 2], &mut rng()).unwrap();
        layer.params_mut()[1] = t(&[2], &[0.25, -3.0]);
        let x = Tensor::full(&[4, 2, 2, 2], 7.5);
        let y = layer.forward_training(x, &mut rng());
        for (i, v) in y.data().iter().enumerate() {
            let beta = if (i / 4) % 2 == 0 { 0.25 } else { -3.0 };
            assert!((v - beta).abs() < 1e-9);
        }
        // moving mean moved towards 7.5 by (1 - momentum); momentum is stored as f32
        assert!((layer.buffers()[0].data()[0] - 0.075).abs() < 1e-6);
    }

    #[test]
    fn frozen_batchnorm_keeps_moving_statistics() {
        let kind = LayerKind::BatchNorm {
            channels: 3,
            momentum: 0.9,
            epsilon: 1e-3,
        };
        let mut layer = Layer::<f64>::new(kind, &[3], &mut rng()).unwrap();
        layer.set_trainable(false);
        let before = layer.buffers().to_vec();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = layer.forward_training(x.clone(), &mut rng());
        assert_eq!(layer.buffers(), &before[..]);
        assert_eq!(y, layer.forward_inference(&x));
    }

    #[test]
    fn dropout_rate_zero_is_identity_in_training() {
        let mut layer = Layer::<f32>::new(LayerKind::Dropout { rate: 0.0 }, &[4], &mut rng()).unwrap();
        let x = Tensor::new(vec![1, 4], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(layer.forward_training(x.clone(), &mut rng()), x);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(LayerKind::Dropout { rate: 1.0 }.output_shape(&[3]).is_err());
        assert!(LayerKind::Dense { inputs: 3, outputs: 0 }.output_shape(&[3]).is_err());
        assert!(LayerKind::Reshape { target: vec![2, 2] }.output_shape(&[3]).is_err());
        assert!(LayerKind::Softmax.output_shape(&[2, 2]).is_err());
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut layer = Layer::<f32>::new(LayerKind::ReLU, &[2], &mut rng()).unwrap();
        let err = layer.backward(3, Tensor::zeros(&[1, 2]), true).unwrap_err();
        assert_eq!(err, crate::EngineError::NoForwardCache(3));
    }
}
