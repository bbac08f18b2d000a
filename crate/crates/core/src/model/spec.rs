//! Declarative network descriptions and shape-chain validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv::{ConvGeometry, ConvParams, Padding};
use crate::ops::lrn::LrnParams;
use crate::ops::pool::pooled_size;

/// Output classes of the two-class task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum ClassLabel {
    /// Normal / non-COVID-19 image.
    Normal = 0,
    /// COVID-19 positive image.
    Covid = 1,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(ClassLabel::Normal),
            1 => Some(ClassLabel::Covid),
            _ => None,
        }
    }
}

impl From<ClassLabel> for u8 {
    fn from(l: ClassLabel) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for ClassLabel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        ClassLabel::from_index(v as usize)
            .ok_or_else(|| Error::invalid(format!("label {v} is not 0 or 1")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        name: String,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        #[serde(default = "one")]
        groups: usize,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        name: String,
    },
    Relu {
        name: String,
    },
    #[serde(rename = "maxpool")]
    MaxPool {
        name: String,
        window: usize,
        stride: usize,
    },
    Lrn {
        name: String,
        #[serde(flatten)]
        params: LrnParams,
    },
    Flatten {
        name: String,
    },
    Fc {
        name: String,
        units: usize,
    },
    SoftmaxXent {
        name: String,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv { name, .. }
            | LayerSpec::BatchNorm { name }
            | LayerSpec::Relu { name }
            | LayerSpec::MaxPool { name, .. }
            | LayerSpec::Lrn { name, .. }
            | LayerSpec::Flatten { name }
            | LayerSpec::Fc { name, .. }
            | LayerSpec::SoftmaxXent { name } => name,
        }
    }

    pub fn conv(
        name: &str,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        groups: usize,
    ) -> Self {
        LayerSpec::Conv {
            name: name.into(),
            filters,
            kernel,
            stride,
            padding,
            groups,
        }
    }

    pub fn fc(name: &str, units: usize) -> Self {
        LayerSpec::Fc {
            name: name.into(),
            units,
        }
    }

    pub fn relu(name: &str) -> Self {
        LayerSpec::Relu { name: name.into() }
    }

    pub fn conv_params(&self) -> Option<ConvParams> {
        match *self {
            LayerSpec::Conv {
                stride,
                padding,
                groups,
                ..
            } => Some(ConvParams {
                stride,
                padding,
                groups,
            }),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let arch =
            |msg: String| Error::InvalidArchitecture(format!("layer `{}`: {msg}", self.name()));
        let rank3 = || -> Result<[usize; 3]> {
            match *input {
                [h, w, c] => Ok([h, w, c]),
                _ => Err(arch(format!("expects an HxWxC input, got {input:?}"))),
            }
        };
        match self {
            LayerSpec::Conv {
                filters,
                kernel,
                groups,
                ..
            } => {
                let [h, w, c] = rank3()?;
                if *groups == 0 || c % groups != 0 {
                    return Err(arch(format!(
                        "{c} channels not divisible into {groups} groups"
                    )));
                }
                let g = ConvGeometry::new(
                    [h, w, c],
                    [*kernel, *kernel, c / groups, *filters],
                    &self.conv_params().unwrap(),
                )
                .map_err(|e| arch(e.to_string()))?;
                Ok(g.output_shape().to_vec())
            }
            LayerSpec::BatchNorm { .. } | LayerSpec::Relu { .. } | LayerSpec::Lrn { .. } => {
                if input.is_empty() {
                    return Err(arch("needs a channel axis".into()));
                }
                Ok(input.to_vec())
            }
            LayerSpec::MaxPool { window, stride, .. } => {
                let [h, w, c] = rank3()?;
                if *window == 0 || *stride == 0 || *window > h || *window > w {
                    return Err(arch(format!(
                        "window {window}/stride {stride} does not fit {h}x{w}"
                    )));
                }
                Ok(vec![
                    pooled_size(h, *window, *stride),
                    pooled_size(w, *window, *stride),
                    c,
                ])
            }
            LayerSpec::Flatten { .. } => Ok(vec![input.iter().product()]),
            LayerSpec::Fc { units, .. } => match *input {
                [_] if *units > 0 => Ok(vec![*units]),
                _ => Err(arch(format!(
                    "expects a flat input and positive width, got {input:?}"
                ))),
            },
            LayerSpec::SoftmaxXent { .. } => match *input {
                [_] => Ok(input.to_vec()),
                _ => Err(arch(format!("expects logits, got {input:?}"))),
            },
        }
    }

    /// `(parameter name, shape)` pairs, sorted by name, for this layer given
    /// its per-sample input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            LayerSpec::Conv {
                filters,
                kernel,
                groups,
                ..
            } => {
                let c = input.last().copied().unwrap_or(0);
                vec![
                    ("bias", vec![*filters]),
                    (
                        "weight",
                        vec![*kernel, *kernel, c / groups.max(&1), *filters],
                    ),
                ]
            }
            LayerSpec::BatchNorm { .. } => {
                let c = input.last().copied().unwrap_or(0);
                vec![("beta", vec![c]), ("gamma", vec![c])]
            }
            LayerSpec::Fc { units, .. } => {
                vec![("bias", vec![*units]), ("weight", vec![input[0], *units])]
            }
            _ => Vec::new(),
        }
    }
}

/// Fully qualified parameter slot, e.g. `conv1.weight`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub layer_index: usize,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

impl ModelSpec {
    /// Per-sample activation shapes: entry 0 is the input, entry `i + 1` the
    /// output of layer `i`. Fails on any inconsistent link in the chain.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.to_vec()];
        if self.input_shape.contains(&0) {
            return Err(Error::InvalidArchitecture(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::SoftmaxXent { .. }) && i + 1 != self.layers.len() {
                return Err(Error::InvalidArchitecture(
                    "softmax_xent must be the final layer".into(),
                ));
            }
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let mut names: Vec<&str> = self.layers.iter().map(LayerSpec::name).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArchitecture(format!(
                "duplicate layer name `{}`",
                w[0]
            )));
        }
        let logits = shapes.last().unwrap();
        if logits.as_slice() != [self.num_classes] {
            return Err(Error::InvalidArchitecture(format!(
                "network emits {logits:?}, expected [{}] class logits",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Every parameter slot in canonical order: layer order, then parameter
    /// name.
    pub fn param_slots(&self) -> Result<Vec<ParamSlot>> {
        let shapes = self.shapes()?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (p, shape) in layer.param_shapes(&shapes[i]) {
                out.push(ParamSlot {
                    layer_index: i,
                    name: format!("{}.{p}", layer.name()),
                    shape,
                });
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_slots()?
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum())
    }

    pub fn has_loss_layer(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::SoftmaxXent { .. }))
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name() == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        ModelSpec {
            name: "tiny".into(),
            input_shape: [4, 4, 1],
            layers: vec![
                LayerSpec::conv("c", 2, 3, 1, Padding::Same, 1),
                LayerSpec::Flatten { name: "f".into() },
                LayerSpec::fc("fc", 2),
                LayerSpec::SoftmaxXent { name: "s".into() },
            ],
            num_classes: 2,
        }
    }

    #[test]
    fn chain_and_slots() {
        let s = tiny();
        s.validate().unwrap();
        assert_eq!(s.shapes().unwrap()[2], vec![32]);
        let names: Vec<String> = s
            .param_slots()
            .unwrap()
            .into_iter()
            .map(|p| p.name)
            .collect();
        assert_eq!(names, ["c.bias", "c.weight", "fc.bias", "fc.weight"]);
        assert_eq!(s.param_count().unwrap(), 2 + 18 + 2 + 64);
    }

    #[test]
    fn rejects_inconsistent_chain() {
        let mut s = tiny();
        s.layers.remove(1); // fc on an HxWxC input
        assert!(matches!(s.validate(), Err(Error::InvalidArchitecture(_))));
        let mut s = tiny();
        s.num_classes = 3;
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.layers.insert(
            0,
            LayerSpec::Fc {
                name: "c".into(),
                units: 2,
            },
        );
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.layers[0] = LayerSpec::conv("c", 2, 7, 1, Padding::Valid, 1);
        assert!(s.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = tiny();
        let back = ModelSpec::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        let json = s.to_json().unwrap();
        assert!(json.contains("\"kind\": \"conv\""));
        assert!(json.contains("\"padding\": \"same\""));
    }

    #[test]
    fn class_labels() {
        assert_eq!(ClassLabel::try_from(1u8).unwrap(), ClassLabel::Covid);
        assert_eq!(ClassLabel::Normal.index(), 0);
        assert!(ClassLabel::try_from(2u8).is_err());
    }
}
