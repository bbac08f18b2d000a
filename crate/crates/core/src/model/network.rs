use crate::error::{Error, Result};
use crate::model::spec::{LayerSpec, ModelSpec};
use crate::nn::functional::{softmax, softmax_xent_backward, softmax_xent_forward};
use crate::nn::layer::{BatchNormState, Layer, LayerKind, Mode};
use crate::ops::init::glorot_uniform;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// An instantiated [`ModelSpec`]: layers with live parameters.
#[derive(Debug, Clone)]
pub struct Network {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

/// Glorot fans for a layer's weight tensor: `(fan_in, fan_out)`.
fn fans(layer: &LayerSpec, weight_shape: &[usize]) -> (usize, usize) {
    match (layer, weight_shape) {
        (LayerSpec::Conv { .. }, [k, _, c, f]) => {
            let groups = layer.conv_params().map_or(1, |p| p.groups);
            (k * k * c, k * k * f / groups)
        }
        (_, [d_in, d_out]) => (*d_in, *d_out),
        _ => unreachable!("weight shapes come from param_shapes"),
    }
}

pub(crate) fn build_layer(spec: &LayerSpec, input: &[usize], rng: &mut SeededRng) -> Result<Layer> {
    let weight = |rng: &mut SeededRng| -> Result<Tensor> {
        let shapes = spec.param_shapes(input);
        let (_, w) = shapes
            .iter()
            .find(|(n, _)| *n == "weight")
            .expect("weight slot");
        let (fan_in, fan_out) = fans(spec, w);
        glorot_uniform(fan_in, fan_out, w, rng)
    };
    Ok(match spec {
        LayerSpec::Conv { name, filters, .. } => Layer::conv(
            name,
            spec.conv_params().unwrap(),
            weight(rng)?,
            Tensor::zeros(&[*filters]),
        ),
        LayerSpec::BatchNorm { name } => {
            Layer::batchnorm(name, BatchNormState::new(*input.last().unwrap()))
        }
        LayerSpec::Relu { name } => Layer::relu(name),
        LayerSpec::MaxPool {
            name,
            window,
            stride,
        } => Layer::maxpool(name, *window, *stride),
        LayerSpec::Lrn { name, params } => Layer::lrn(name, *params),
        LayerSpec::Flatten { name } => Layer::flatten(name),
        LayerSpec::Fc { name, units } => Layer::fc(name, weight(rng)?, Tensor::zeros(&[*units])),
        LayerSpec::SoftmaxXent { name } => Layer::softmax_xent(name),
    })
}

impl Network {
    /// Validates `spec` and initializes its parameters: Glorot-uniform
    /// weights drawn in layer order, zero biases, unit BN scales.
    pub fn new(spec: ModelSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.shapes()?;
        let mut layers = spec
            .layers
            .iter()
            .zip(&shapes)
            .map(|(l, s)| build_layer(l, s, rng))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = layers.first_mut() {
            first.set_input_grad(false);
        }
        Ok(Self { spec, layers })
    }

    pub(crate) fn from_parts(spec: ModelSpec, layers: Vec<Layer>) -> Self {
        Self { spec, layers }
    }

    pub(crate) fn into_parts(self) -> (ModelSpec, Vec<Layer>) {
        (self.spec, self.layers)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 4 || batch.shape()[1..] != self.spec.input_shape {
            return Err(Error::invalid(format!(
                "model `{}` expects batches of {:?}, got {:?}",
                self.spec.name,
                self.spec.input_shape,
                batch.shape()
            )));
        }
        Ok(())
    }

    fn body(&self) -> usize {
        if self.spec.has_loss_layer() {
            self.layers.len() - 1
        } else {
            self.layers.len()
        }
    }

    /// Logits for an `N x H x W x C` batch (everything before the loss layer).
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_batch(batch)?;
        let body = self.body();
        let mut x = batch.clone();
        for layer in &mut self.layers[..body] {
            x = layer.forward(&x, mode)?;
        }
        Ok(x)
    }

    /// Inference-mode logits; does not touch layer caches, so a frozen network
    /// can be shared across threads.
    pub fn infer(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        for layer in &self.layers[..self.body()] {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    /// Inference-mode class probabilities, `N x num_classes`.
    pub fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        softmax(&self.infer(batch)?)
    }

    /// Forward in train mode, mean cross-entropy against `labels`, and a full
    /// backward pass leaving gradients on every layer. Returns the loss.
    pub fn train_batch(&mut self, batch: &Tensor, labels: &[usize]) -> Result<f64> {
        if !self.spec.has_loss_layer() {
            return Err(Error::InvalidArchitecture(format!(
                "model `{}` has no softmax_xent loss layer",
                self.spec.name
            )));
        }
        let logits = self.forward(batch, Mode::Train)?;
        let (loss, probs) = softmax_xent_forward(&logits, labels)?;
        let mut grad = softmax_xent_backward(&probs, labels)?;
        let body = self.body();
        for layer in self.layers[..body].iter_mut().rev() {
            grad = layer.backward(&grad)?;
        }
        Ok(loss)
    }

    /// `(qualified name, tensor)` in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .flat_map(|l| {
                l.param_names()
                    .iter()
                    .zip(l.params())
                    .map(move |(p, t)| (format!("{}.{p}", l.name()), t))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// BN running statistics of layers that have seen at least one
    /// train-mode batch, as `(name, tensor)`.
    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(s) = l.batchnorm_state().filter(|s| s.updates > 0) {
                out.push((format!("{}.running_mean", l.name()), s.running_mean.clone()));
                out.push((format!("{}.running_var", l.name()), s.running_var.clone()));
            }
        }
        out
    }

    /// Replaces every parameter (and optionally BN statistics) at once. All
    /// names and shapes are checked before anything is written.
    pub fn assign(
        &mut self,
        params: Vec<(String, Tensor)>,
        buffers: Vec<(String, Tensor)>,
    ) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut by_name: std::collections::HashMap<String, Tensor> = params.into_iter().collect();
        for (name, shape) in &expected {
            match by_name.get(name) {
                None => return Err(Error::MissingTensor(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::TensorShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = by_name
            .keys()
            .find(|k| !expected.iter().any(|(n, _)| n == *k))
        {
            return Err(Error::ExtraTensor(extra.clone()));
        }
        let mut buffers: std::collections::HashMap<String, Tensor> = buffers.into_iter().collect();
        for l in &self.layers {
            if let Some(s) = l.batchnorm_state() {
                for key in ["running_mean", "running_var"] {
                    let name = format!("{}.{key}", l.name());
                    if let Some(t) = buffers.get(&name) {
                        if t.shape() != s.gamma.shape() {
                            return Err(Error::TensorShape {
                                name,
                                expected: s.gamma.shape().to_vec(),
                                found: t.shape().to_vec(),
                            });
                        }
                    }
                }
            }
        }
        for l in &mut self.layers {
            let lname = l.name().to_string();
            let names = l.param_names();
            for (p, slot) in names.iter().zip(l.params_mut()) {
                *slot = by_name
                    .remove(&format!("{lname}.{p}"))
                    .expect("checked above");
            }
            if let Some(s) = l.batchnorm_state_mut() {
                let mean = buffers.remove(&format!("{lname}.running_mean"));
                let var = buffers.remove(&format!("{lname}.running_var"));
                if let (Some(m), Some(v)) = (mean, var) {
                    s.running_mean = m;
                    s.running_var = v;
                    s.updates = s.updates.max(1);
                }
            }
        }
        Ok(())
    }

    /// Marks layers up to and including `name` as not trainable.
    pub fn freeze_up_to(&mut self, name: &str) -> Result<()> {
        let idx = self
            .spec
            .layer_index(name)
            .ok_or_else(|| Error::invalid(format!("no layer named `{name}`")))?;
        for l in &mut self.layers[..=idx] {
            l.set_trainable(false);
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name() == name)
    }

    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.kind() == kind).count()
    }
}
