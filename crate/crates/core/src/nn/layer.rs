use crate::error::{Error, Result};
use crate::nn::functional::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, fc_backward, fc_forward,
    relu_backward, relu_forward, softmax, BatchNormCache,
};
use crate::ops::conv::{conv2d_backward_with, conv2d_forward, ConvParams};
use crate::ops::lrn::{lrn_backward, lrn_forward, LrnParams};
use crate::ops::pool::{maxpool_backward, maxpool_forward};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Relu,
    MaxPool,
    Lrn,
    Fc,
    SoftmaxXent,
    Flatten,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Lrn => "lrn",
            LayerKind::Fc => "fc",
            LayerKind::SoftmaxXent => "softmax_xent",
            LayerKind::Flatten => "flatten",
        }
    }
}

pub const BATCHNORM_EPSILON: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    /// Biased batch variance, averaged.
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
    /// Number of train-mode batches folded into the running statistics.
    pub updates: u64,
    /// Train-mode batches that held a single sample.
    pub single_sample_batches: u64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            epsilon: BATCHNORM_EPSILON,
            momentum: BATCHNORM_MOMENTUM,
            updates: 0,
            single_sample_batches: 0,
        }
    }

    fn fold(&mut self, cache: &BatchNormCache<f32>) {
        let m = self.momentum as f32;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&cache.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.var) {
            let next = (1.0 - m) * *r + m * b;
            *r = if next < 0.0 { 0.0 } else { next };
        }
        self.updates += 1;
    }
}

#[derive(Debug, Clone)]
enum Op {
    Conv {
        params: ConvParams,
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm(BatchNormState),
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Lrn(LrnParams),
    Fc {
        weight: Tensor,
        bias: Tensor,
    },
    SoftmaxXent,
    Flatten,
}

#[derive(Debug, Clone)]
enum Cache {
    Input(Tensor),
    BatchNorm(BatchNormCache<f32>),
    Pool {
        argmax: Vec<Vec<usize>>,
        input_shape: Vec<usize>,
    },
    Shape(Vec<usize>),
}

/// A trainable (or parameter-free) layer operating on batches whose leading
/// axis is the sample index.
#[derive(Debug, Clone)]
pub struct Layer {
    name: String,
    op: Op,
    grads: Vec<Tensor>,
    cache: Option<Cache>,
    trainable: bool,
    input_grad: bool,
}

impl Layer {
    fn with_op(name: impl Into<String>, op: Op) -> Self {
        Self {
            name: name.into(),
            op,
            grads: Vec::new(),
            cache: None,
            trainable: true,
            input_grad: true,
        }
    }

    pub fn conv(name: &str, params: ConvParams, weight: Tensor, bias: Tensor) -> Self {
        Self::with_op(
            name,
            Op::Conv {
                params,
                weight,
                bias,
            },
        )
    }

    pub fn batchnorm(name: &str, state: BatchNormState) -> Self {
        Self::with_op(name, Op::BatchNorm(state))
    }

    pub fn relu(name: &str) -> Self {
        Self::with_op(name, Op::Relu)
    }

    pub fn maxpool(name: &str, window: usize, stride: usize) -> Self {
        Self::with_op(name, Op::MaxPool { window, stride })
    }

    pub fn lrn(name: &str, params: LrnParams) -> Self {
        Self::with_op(name, Op::Lrn(params))
    }

    pub fn fc(name: &str, weight: Tensor, bias: Tensor) -> Self {
        Self::with_op(name, Op::Fc { weight, bias })
    }

    pub fn softmax_xent(name: &str) -> Self {
        Self::with_op(name, Op::SoftmaxXent)
    }

    pub fn flatten(name: &str) -> Self {
        Self::with_op(name, Op::Flatten)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        match self.op {
            Op::Conv { .. } => LayerKind::Conv,
            Op::BatchNorm(_) => LayerKind::BatchNorm,
            Op::Relu => LayerKind::Relu,
            Op::MaxPool { .. } => LayerKind::MaxPool,
            Op::Lrn(_) => LayerKind::Lrn,
            Op::Fc { .. } => LayerKind::Fc,
            Op::SoftmaxXent => LayerKind::SoftmaxXent,
            Op::Flatten => LayerKind::Flatten,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Skip computing the input gradient (the layer sits on raw images).
    pub fn set_input_grad(&mut self, enabled: bool) {
        self.input_grad = enabled;
    }

    pub fn batchnorm_state(&self) -> Option<&BatchNormState> {
        match &self.op {
            Op::BatchNorm(s) => Some(s),
            _ => None,
        }
    }

    pub fn batchnorm_state_mut(&mut self) -> Option<&mut BatchNormState> {
        match &mut self.op {
            Op::BatchNorm(s) => Some(s),
            _ => None,
        }
    }

    /// Parameter names, sorted; `params()` and `grads()` follow this order.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self.op {
            Op::Conv { .. } | Op::Fc { .. } => &["bias", "weight"],
            Op::BatchNorm(_) => &["beta", "gamma"],
            _ => &[],
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match &self.op {
            Op::Conv { weight, bias, .. } | Op::Fc { weight, bias } => vec![bias, weight],
            Op::BatchNorm(s) => vec![&s.beta, &s.gamma],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.op {
            Op::Conv { weight, bias, .. } | Op::Fc { weight, bias } => vec![bias, weight],
            Op::BatchNorm(s) => vec![&mut s.beta, &mut s.gamma],
            _ => Vec::new(),
        }
    }

    /// Gradients from the latest backward pass, mirroring `params()`. Empty
    /// until the first backward.
    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Parameters paired with their gradients, for the optimizer.
    pub fn params_and_grads(&mut self) -> Vec<(&mut Tensor, &Tensor)> {
        let grads = &self.grads;
        if grads.is_empty() {
            return Vec::new();
        }
        let params: Vec<&mut Tensor> = match &mut self.op {
            Op::Conv { weight, bias, .. } | Op::Fc { weight, bias } => vec![bias, weight],
            Op::BatchNorm(s) => vec![&mut s.beta, &mut s.gamma],
            _ => Vec::new(),
        };
        params.into_iter().zip(grads.iter()).collect()
    }

    /// Forward pass without touching any cached state.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match &self.op {
            Op::BatchNorm(s) => {
                if s.updates == 0 {
                    return Err(Error::UninitializedStatistics(self.name.clone()));
                }
                batchnorm_forward_infer(
                    x,
                    &s.gamma,
                    &s.beta,
                    &s.running_mean,
                    &s.running_var,
                    s.epsilon,
                )
            }
            _ => self.stateless_forward(x).map(|(y, _)| y),
        }
    }

    fn stateless_forward(&self, x: &Tensor) -> Result<(Tensor, Option<Cache>)> {
        match &self.op {
            Op::Conv {
                params,
                weight,
                bias,
            } => {
                let images = per_sample(x, |img| conv2d_forward(img, weight, bias, params))?;
                Ok((images, Some(Cache::Input(x.clone()))))
            }
            Op::Relu => Ok((relu_forward(x), Some(Cache::Input(x.clone())))),
            Op::MaxPool { window, stride } => {
                let mut argmax = Vec::with_capacity(batch_len(x)?);
                let y = per_sample(x, |img| {
                    let p = maxpool_forward(img, *window, *stride)?;
                    argmax.push(p.argmax);
                    Ok(p.output)
                })?;
                Ok((
                    y,
                    Some(Cache::Pool {
                        argmax,
                        input_shape: x.shape().to_vec(),
                    }),
                ))
            }
            Op::Lrn(p) => Ok((lrn_forward(x, p)?, Some(Cache::Input(x.clone())))),
            Op::Fc { weight, bias } => {
                Ok((fc_forward(x, weight, bias)?, Some(Cache::Input(x.clone()))))
            }
            Op::SoftmaxXent => Ok((softmax(x)?, None)),
            Op::Flatten => {
                let n = batch_len(x)?;
                let d = x.len() / n;
                Ok((
                    x.clone().reshape(&[n, d])?,
                    Some(Cache::Shape(x.shape().to_vec())),
                ))
            }
            Op::BatchNorm(_) => unreachable!("batch norm handled by caller"),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Infer {
            self.cache = None;
            return self.infer(x);
        }
        let (y, cache) = match &mut self.op {
            Op::BatchNorm(s) => {
                if batch_len(x)? == 1 {
                    s.single_sample_batches += 1;
                }
                let (y, cache) = batchnorm_forward_train(x, &s.gamma, &s.beta, s.epsilon)?;
                s.fold(&cache);
                (y, Some(Cache::BatchNorm(cache)))
            }
            _ => self.stateless_forward(x)?,
        };
        self.cache = cache;
        Ok(y)
    }

    /// Back-propagates `grad` through the most recent train-mode forward,
    /// storing parameter gradients and returning the input gradient (empty
    /// when input gradients are disabled).
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| Error::LayerState {
            layer: self.name.clone(),
            message: "backward called without a preceding train-mode forward".into(),
        })?;
        let want_input = self.input_grad;
        let (dx, grads) = match (&self.op, &cache) {
            (
                Op::Conv {
                    params,
                    weight,
                    bias,
                },
                Cache::Input(x),
            ) => {
                let n = batch_len(x)?;
                let mut gw = Tensor::zeros(weight.shape());
                let mut gb = Tensor::zeros(bias.shape());
                let mut dx = Vec::with_capacity(if want_input { x.len() } else { 0 });
                let mut out_shape = grad.shape().to_vec();
                out_shape.remove(0);
                for i in 0..n {
                    let g = grad_slice(grad, i, &out_shape)?;
                    let r = conv2d_backward_with(&x.outer(i), weight, &g, params, want_input)?;
                    add_into(&mut gw, &r.kernels);
                    add_into(&mut gb, &r.bias);
                    if let Some(gi) = r.input {
                        dx.extend_from_slice(gi.data());
                    }
                }
                let dx = if want_input {
                    Tensor::from_vec(x.shape(), dx)?
                } else {
                    Tensor::zeros(&[0])
                };
                (dx, vec![gb, gw])
            }
            (Op::BatchNorm(s), Cache::BatchNorm(c)) => {
                let g = batchnorm_backward(c, &s.gamma, grad)?;
                (g.input, vec![g.beta, g.gamma])
            }
            (Op::Relu, Cache::Input(x)) => (relu_backward(x, grad)?, Vec::new()),
            (
                Op::MaxPool { .. },
                Cache::Pool {
                    argmax,
                    input_shape,
                },
            ) => {
                let mut out_shape = grad.shape().to_vec();
                out_shape.remove(0);
                let mut dx = Vec::with_capacity(input_shape.iter().product());
                for (i, am) in argmax.iter().enumerate() {
                    let g = grad_slice(grad, i, &out_shape)?;
                    dx.extend_from_slice(maxpool_backward(am, &input_shape[1..], &g)?.data());
                }
                (Tensor::from_vec(input_shape, dx)?, Vec::new())
            }
            (Op::Lrn(p), Cache::Input(x)) => (lrn_backward(x, p, grad)?, Vec::new()),
            (Op::Fc { weight, .. }, Cache::Input(x)) => {
                let g = fc_backward(x, weight, grad)?;
                (g.input, vec![g.bias, g.weights])
            }
            (Op::Flatten, Cache::Shape(shape)) => (grad.clone().reshape(shape)?, Vec::new()),
            _ => {
                return Err(Error::LayerState {
                    layer: self.name.clone(),
                    message: "layer has no backward pass of its own".into(),
                })
            }
        };
        self.grads = grads;
        Ok(dx)
    }
}

fn batch_len(x: &Tensor) -> Result<usize> {
    match x.shape().first() {
        Some(&n) if x.rank() >= 2 => Ok(n),
        _ => Err(Error::invalid(format!(
            "expected a batch with a leading sample axis, got {:?}",
            x.shape()
        ))),
    }
}

fn grad_slice(grad: &Tensor, i: usize, shape: &[usize]) -> Result<Tensor> {
    let inner: usize = shape.iter().product();
    Tensor::from_vec(shape, grad.data()[i * inner..(i + 1) * inner].to_vec())
}

fn per_sample(x: &Tensor, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = batch_len(x)?;
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for i in 0..n {
        let y = f(&x.outer(i))?;
        if i == 0 {
            data.reserve(y.len() * n);
            shape = y.shape().to_vec();
        }
        data.extend_from_slice(y.data());
    }
    shape.insert(0, n);
    Tensor::from_vec(&shape, data)
}

fn add_into(acc: &mut Tensor, x: &Tensor) {
    for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}
