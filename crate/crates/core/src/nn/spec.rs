use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a single example's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureShape {
    Flat {
        dim: usize,
    },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        match *self {
            FeatureShape::Flat { dim } => dim,
            FeatureShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    MaxPool2x2,
    Relu,
    Flatten,
    Dropout {
        rate: f64,
    },
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::MaxPool2x2 => "max-pool-2x2",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::Dropout { .. } => "dropout",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    pub fn has_bias(&self) -> bool {
        matches!(
            self,
            Layer::Dense { bias: true, .. } | Layer::Conv2d { bias: true, .. }
        )
    }

    /// Shape of the weight tensor and the fan-in used for initialization.
    pub(crate) fn weight_shape(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            Layer::Dense {
                inputs, outputs, ..
            } => Some((vec![outputs, inputs], inputs)),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
            )),
            _ => None,
        }
    }

    pub(crate) fn bias_len(&self) -> Option<usize> {
        match *self {
            Layer::Dense {
                outputs,
                bias: true,
                ..
            } => Some(outputs),
            Layer::Conv2d {
                out_channels,
                bias: true,
                ..
            } => Some(out_channels),
            _ => None,
        }
    }
}

/// Architecture description shared by every member of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: FeatureShape,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    /// Builds and validates a spec.
    pub fn new(input: FeatureShape, num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let spec = NetworkSpec {
            input,
            num_classes,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Fully connected ReLU network with the given hidden widths.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize, bias: bool) -> Self {
        Self::mlp_with_dropout(input_dim, hidden, num_classes, bias, 0.0)
    }

    /// Like [`NetworkSpec::mlp`], with a dropout layer after every hidden
    /// activation when `dropout > 0`.
    pub fn mlp_with_dropout(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        bias: bool,
        dropout: f64,
    ) -> Self {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense {
                inputs: width,
                outputs: h,
                bias,
            });
            layers.push(Layer::Relu);
            if dropout > 0.0 {
                layers.push(Layer::Dropout { rate: dropout });
            }
            width = h;
        }
        layers.push(Layer::Dense {
            inputs: width,
            outputs: num_classes,
            bias,
        });
        NetworkSpec {
            input: FeatureShape::Flat { dim: input_dim },
            num_classes,
            layers,
        }
    }

    /// Two 5x5 conv layers (6 and 16 channels) with max pooling, followed by
    /// dense layers of width 120 and 84.
    pub fn small_cnn(
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
        bias: bool,
        dropout: f64,
    ) -> Self {
        let h = ((height - 4) / 2 - 4) / 2;
        let w = ((width - 4) / 2 - 4) / 2;
        let mut layers = vec![
            Layer::Conv2d {
                in_channels: channels,
                out_channels: 6,
                kernel: 5,
                bias,
            },
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Conv2d {
                in_channels: 6,
                out_channels: 16,
                kernel: 5,
                bias,
            },
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Flatten,
            Layer::Dense {
                inputs: 16 * h * w,
                outputs: 120,
                bias,
            },
            Layer::Relu,
        ];
        if dropout > 0.0 {
            layers.push(Layer::Dropout { rate: dropout });
        }
        layers.push(Layer::Dense {
            inputs: 120,
            outputs: 84,
            bias,
        });
        layers.push(Layer::Relu);
        if dropout > 0.0 {
            layers.push(Layer::Dropout { rate: dropout });
        }
        layers.push(Layer::Dense {
            inputs: 84,
            outputs: num_classes,
            bias,
        });
        NetworkSpec {
            input: FeatureShape::Image {
                channels,
                height,
                width,
            },
            num_classes,
            layers,
        }
    }

    /// Activation shape after each layer; `shapes()[i]` is the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<FeatureShape>> {
        let mut cur = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |detail: String| Error::Shape {
                layer: i,
                kind: layer.name(),
                detail,
            };
            cur = match (*layer, cur) {
                (
                    Layer::Dense {
                        inputs, outputs, ..
                    },
                    FeatureShape::Flat { dim },
                ) => {
                    if dim != inputs {
                        return Err(fail(format!("expects {inputs} inputs, got {dim}")));
                    }
                    FeatureShape::Flat { dim: outputs }
                }
                (Layer::Dense { .. }, s) => {
                    return Err(fail(format!("expects flat input, got {s:?}")));
                }
                (
                    Layer::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    },
                    FeatureShape::Image {
                        channels,
                        height,
                        width,
                    },
                ) => {
                    if channels != in_channels {
                        return Err(fail(format!(
                            "expects {in_channels} channels, got {channels}"
                        )));
                    }
                    if kernel == 0 || height < kernel || width < kernel {
                        return Err(fail(format!(
                            "kernel {kernel} does not fit {height}x{width} input"
                        )));
                    }
                    FeatureShape::Image {
                        channels: out_channels,
                        height: height - kernel + 1,
                        width: width - kernel + 1,
                    }
                }
                (Layer::Conv2d { .. }, s) => {
                    return Err(fail(format!("expects image input, got {s:?}")));
                }
                (
                    Layer::MaxPool2x2,
                    FeatureShape::Image {
                        channels,
                        height,
                        width,
                    },
                ) => {
                    if height < 2 || width < 2 {
                        return Err(fail(format!("cannot pool a {height}x{width} input")));
                    }
                    FeatureShape::Image {
                        channels,
                        height: height / 2,
                        width: width / 2,
                    }
                }
                (Layer::MaxPool2x2, s) => {
                    return Err(fail(format!("expects image input, got {s:?}")));
                }
                (Layer::Flatten, s) => FeatureShape::Flat { dim: s.len() },
                (Layer::Dropout { rate }, s) => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(fail(format!("rate {rate} outside [0, 1)")));
                    }
                    s
                }
                (Layer::Relu, s) => s,
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("a network needs at least 2 classes"));
        }
        let shapes = self.shapes()?;
        match shapes.last() {
            Some(FeatureShape::Flat { dim }) if *dim == self.num_classes => Ok(()),
            Some(s) => Err(Error::Shape {
                layer: self.layers.len() - 1,
                kind: self.layers[self.layers.len() - 1].name(),
                detail: format!("final output {s:?} is not {} logits", self.num_classes),
            }),
            None => Err(Error::invalid("network has no layers")),
        }
    }

    /// Bias-free and built only from positively homogeneous pieces.
    pub fn is_homogeneous(&self) -> bool {
        self.layers.iter().all(|l| !l.has_bias())
    }

    /// Homogeneity degree: the number of parametric layers.
    pub fn degree(&self) -> usize {
        self.layers.iter().filter(|l| l.has_params()).count()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight_shape()
                    .map(|(s, _)| s.iter().product::<usize>())
                    .unwrap_or(0)
                    + l.bias_len().unwrap_or(0)
            })
            .sum()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Dropout { .. }))
    }

    /// Rate of the first dropout layer, if any.
    pub fn dropout_rate(&self) -> Option<f64> {
        self.layers.iter().find_map(|l| match l {
            Layer::Dropout { rate } => Some(*rate),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_shapes_compose() {
        let spec = NetworkSpec::mlp(2, &[16, 32, 16], 5, false);
        spec.validate().unwrap();
        assert!(spec.is_homogeneous());
        assert_eq!(spec.degree(), 4);
        assert_eq!(spec.num_params(), 2 * 16 + 16 * 32 + 32 * 16 + 16 * 5);
    }

    #[test]
    fn small_cnn_on_28x28() {
        let spec = NetworkSpec::small_cnn(1, 28, 28, 10, false, 0.0);
        spec.validate().unwrap();
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[6], FeatureShape::Flat { dim: 256 });
        assert_eq!(spec.degree(), 5);
    }

    #[test]
    fn mismatch_names_layer() {
        let spec = NetworkSpec {
            input: FeatureShape::Flat { dim: 3 },
            num_classes: 2,
            layers: vec![
                Layer::Dense {
                    inputs: 3,
                    outputs: 4,
                    bias: true,
                },
                Layer::Relu,
                Layer::Dense {
                    inputs: 5,
                    outputs: 2,
                    bias: true,
                },
            ],
        };
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("layer 2"), "{err}");
        assert!(err.contains("dense"), "{err}");
        assert!(!spec.is_homogeneous());
    }
}
