//! The two architectures: the single-convolution CNN trained from scratch and
//! the AlexNet backbone used for transfer learning, plus the head-replacement
//! surgery.

use crate::error::{Error, Result};
use crate::model::network::{build_layer, Network};
use crate::model::spec::{LayerSpec, ModelSpec};
use crate::ops::conv::Padding;
use crate::ops::lrn::LrnParams;
use crate::rng::SeededRng;

pub const PROPOSED_CNN_INPUT: usize = 224;
pub const PROPOSED_CNN_FILTERS: usize = 16;
pub const PROPOSED_CNN_KERNEL: usize = 5;
pub const DEFAULT_FC_HIDDEN: usize = 32;
pub const ALEXNET_INPUT: usize = 227;
pub const ALEXNET_CLASSES: usize = 1000;

/// `224x224x3 -> conv 16@5x5 (same) -> batchnorm -> relu -> flatten -> fc(hidden) -> fc(2) -> softmax_xent`.
pub fn build_proposed_cnn(fc_hidden: usize) -> Result<ModelSpec> {
    build_proposed_cnn_sized(PROPOSED_CNN_INPUT, fc_hidden)
}

/// The same layer stack for a square input of another side length.
pub fn build_proposed_cnn_sized(side: usize, fc_hidden: usize) -> Result<ModelSpec> {
    if fc_hidden < 2 {
        return Err(Error::invalid(format!(
            "fc_hidden must be >= 2, got {fc_hidden}"
        )));
    }
    let spec = ModelSpec {
        name: "proposed_cnn".into(),
        input_shape: [side, side, 3],
        layers: vec![
            LayerSpec::conv(
                "conv1",
                PROPOSED_CNN_FILTERS,
                PROPOSED_CNN_KERNEL,
                1,
                Padding::Same,
                1,
            ),
            LayerSpec::BatchNorm { name: "bn1".into() },
            LayerSpec::relu("relu1"),
            LayerSpec::Flatten {
                name: "flatten".into(),
            },
            LayerSpec::fc("fc1", fc_hidden),
            LayerSpec::fc("fc2", 2),
            LayerSpec::SoftmaxXent {
                name: "softmax".into(),
            },
        ],
        num_classes: 2,
    };
    spec.validate()?;
    Ok(spec)
}

/// Canonical AlexNet (grouped conv2/4/5, LRN after conv1/conv2), without
/// dropout, ending in the 1000-way `fc8`.
pub fn build_alexnet() -> ModelSpec {
    let lrn = |name: &str| LayerSpec::Lrn {
        name: name.into(),
        params: LrnParams::default(),
    };
    let pool = |name: &str| LayerSpec::MaxPool {
        name: name.into(),
        window: 3,
        stride: 2,
    };
    let spec = ModelSpec {
        name: "alexnet".into(),
        input_shape: [ALEXNET_INPUT, ALEXNET_INPUT, 3],
        layers: vec![
            LayerSpec::conv("conv1", 96, 11, 4, Padding::Valid, 1),
            LayerSpec::relu("relu1"),
            lrn("norm1"),
            pool("pool1"),
            LayerSpec::conv("conv2", 256, 5, 1, Padding::Explicit(2), 2),
            LayerSpec::relu("relu2"),
            lrn("norm2"),
            pool("pool2"),
            LayerSpec::conv("conv3", 384, 3, 1, Padding::Explicit(1), 1),
            LayerSpec::relu("relu3"),
            LayerSpec::conv("conv4", 384, 3, 1, Padding::Explicit(1), 2),
            LayerSpec::relu("relu4"),
            LayerSpec::conv("conv5", 256, 3, 1, Padding::Explicit(1), 2),
            LayerSpec::relu("relu5"),
            pool("pool5"),
            LayerSpec::Flatten {
                name: "flatten".into(),
            },
            LayerSpec::fc("fc6", 4096),
            LayerSpec::relu("relu6"),
            LayerSpec::fc("fc7", 4096),
            LayerSpec::relu("relu7"),
            LayerSpec::fc("fc8", ALEXNET_CLASSES),
        ],
        num_classes: ALEXNET_CLASSES,
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

/// Spec-level head replacement: drops the trailing fc layer and appends a
/// `num_classes`-wide fc under the same name followed by `softmax_xent`.
pub fn replace_last_layers_spec(spec: &ModelSpec, num_classes: usize) -> Result<ModelSpec> {
    let name = match spec.layers.last() {
        Some(LayerSpec::Fc { name, .. }) => name.clone(),
        _ => {
            return Err(Error::InvalidArchitecture(format!(
                "model `{}` does not end in a fully connected layer",
                spec.name
            )))
        }
    };
    if num_classes < 2 {
        return Err(Error::invalid("num_classes must be >= 2"));
    }
    let mut out = spec.clone();
    out.layers.pop();
    out.layers.push(LayerSpec::fc(&name, num_classes));
    out.layers.push(LayerSpec::SoftmaxXent {
        name: "softmax".into(),
    });
    out.num_classes = num_classes;
    out.validate()?;
    Ok(out)
}

/// Transfer-learning surgery on a live network: the trailing fc layer is
/// re-created with `num_classes` outputs (Glorot weights from `rng`, zero
/// bias); every other layer keeps its tensors untouched.
pub fn replace_last_layers(
    net: Network,
    num_classes: usize,
    rng: &mut SeededRng,
) -> Result<Network> {
    let new_spec = replace_last_layers_spec(net.spec(), num_classes)?;
    let shapes = new_spec.shapes()?;
    let (_, mut layers) = net.into_parts();
    layers.pop();
    let head_index = layers.len();
    layers.push(build_layer(
        &new_spec.layers[head_index],
        &shapes[head_index],
        rng,
    )?);
    layers.push(build_layer(
        &new_spec.layers[head_index + 1],
        &shapes[head_index + 1],
        rng,
    )?);
    Ok(Network::from_parts(new_spec, layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn proposed_shapes() {
        let spec = build_proposed_cnn(DEFAULT_FC_HIDDEN).unwrap();
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[1], vec![224, 224, 16]);
        assert_eq!(shapes[4], vec![802_816]);
        assert_eq!(shapes.last().unwrap(), &vec![2]);
        assert!(build_proposed_cnn(1).is_err());
    }

    #[test]
    fn proposed_param_count_by_enumeration() {
        let spec = build_proposed_cnn(32).unwrap();
        let by_slot: Vec<(String, usize)> = spec
            .param_slots()
            .unwrap()
            .into_iter()
            .map(|s| (s.name, s.shape.iter().product()))
            .collect();
        let expect = [
            ("conv1.bias", 16),
            ("conv1.weight", 5 * 5 * 3 * 16),
            ("bn1.beta", 16),
            ("bn1.gamma", 16),
            ("fc1.bias", 32),
            ("fc1.weight", 802_816 * 32),
            ("fc2.bias", 2),
            ("fc2.weight", 32 * 2),
        ];
        for ((n, c), (en, ec)) in by_slot.iter().zip(expect) {
            assert_eq!((n.as_str(), *c), (en, ec));
        }
        assert_eq!(spec.param_count().unwrap(), 25_691_458);
    }

    #[test]
    fn alexnet_shapes() {
        let spec = build_alexnet();
        spec.validate().unwrap();
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[1], vec![55, 55, 96]);
        let flat = spec.layer_index("flatten").unwrap();
        assert_eq!(shapes[flat + 1], vec![9216]);
        assert_eq!(shapes.last().unwrap(), &vec![1000]);
        let slots = spec.param_slots().unwrap();
        assert_eq!(slots.len(), 16);
        let conv1 = slots.iter().find(|s| s.name == "conv1.weight").unwrap();
        assert_eq!(conv1.shape, vec![11, 11, 3, 96]);
        let conv2 = slots.iter().find(|s| s.name == "conv2.weight").unwrap();
        assert_eq!(conv2.shape, vec![5, 5, 48, 256]);
        assert_eq!(spec.param_count().unwrap(), 60_965_224);
    }

    #[test]
    fn replace_requires_trailing_fc() {
        let spec = build_proposed_cnn(4).unwrap();
        assert!(matches!(
            replace_last_layers_spec(&spec, 2),
            Err(Error::InvalidArchitecture(_))
        ));
    }

    fn toy_backbone() -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            input_shape: [5, 5, 1],
            layers: vec![
                LayerSpec::conv("conv1", 2, 3, 1, Padding::Same, 1),
                LayerSpec::relu("relu1"),
                LayerSpec::Flatten {
                    name: "flatten".into(),
                },
                LayerSpec::fc("fc7", 6),
                LayerSpec::relu("relu7"),
                LayerSpec::fc("fc8", 10),
            ],
            num_classes: 10,
        }
    }

    #[test]
    fn surgery_keeps_backbone() {
        let net = Network::new(toy_backbone(), &mut SeededRng::new(1)).unwrap();
        let before: Vec<(String, Tensor)> = net
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let out = replace_last_layers(net, 2, &mut SeededRng::new(99)).unwrap();
        let after: Vec<(String, Tensor)> = out
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert_eq!(before.len(), after.len());
        for (b, a) in before.iter().zip(&after) {
            if b.0.starts_with("fc8") {
                assert_ne!(b.1.shape(), a.1.shape());
            } else {
                assert_eq!(b, a);
            }
        }
        let mut out = out;
        let logits = out
            .forward(&Tensor::zeros(&[1, 5, 5, 1]), Mode::Train)
            .unwrap();
        assert_eq!(logits.shape(), &[1, 2]);
    }

    #[test]
    fn surgery_with_same_draws_reproduces_forward() {
        let spec = toy_backbone();
        let mut rng = SeededRng::new(4);
        let mut original = Network::new(spec.clone(), &mut rng).unwrap();
        // rng positioned where fc8's weights were drawn
        let mut replay = SeededRng::new(4);
        let before_fc8: usize = spec
            .param_slots()
            .unwrap()
            .iter()
            .filter(|s| s.name.ends_with(".weight") && !s.name.starts_with("fc8"))
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        for _ in 0..before_fc8 {
            replay.next_u64();
        }
        let copy = Network::new(spec, &mut SeededRng::new(4)).unwrap();
        let mut surgered = replace_last_layers(copy, 10, &mut replay).unwrap();
        let mut r = SeededRng::new(8);
        let x = Tensor::from_fn(&[2, 5, 5, 1], |_| r.next_f64() as f32);
        let a = original.forward(&x, Mode::Train).unwrap();
        let b = surgered.forward(&x, Mode::Train).unwrap();
        assert_eq!(a, b);
        let mut other = replace_last_layers(original.clone(), 10, &mut SeededRng::new(77)).unwrap();
        assert_ne!(other.forward(&x, Mode::Train).unwrap(), a);
    }
}
