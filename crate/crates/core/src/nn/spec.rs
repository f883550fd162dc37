use serde::{Deserialize, Serialize};

use crate::conv::{Conv2dConfig, ConvGeometry};
use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// One layer of a sequential model. Input widths are inferred by chaining.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    /// `groups: None` picks 8 groups for 16+ channels, else one group per channel.
    GroupNorm {
        #[serde(default)]
        groups: Option<usize>,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
    #[serde(rename = "fc")]
    Linear {
        out_features: usize,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
        }
    }

    pub fn fc(out_features: usize) -> Self {
        LayerSpec::Linear { out_features }
    }

    pub fn group_norm() -> Self {
        LayerSpec::GroupNorm { groups: None }
    }
}

/// Input shape plus the layer list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[channels, height, width]` for images or `[features]` for flat input.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// conv(16,k5)-GN-ReLU-pool2, conv(32,k5)-GN-ReLU-pool2, fc, for 1x28x28 input.
    pub fn mnist_cnn(class_count: usize) -> Self {
        ModelSpec {
            input: vec![1, 28, 28],
            layers: vec![
                LayerSpec::conv(16, 5),
                LayerSpec::group_norm(),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::conv(32, 5),
                LayerSpec::group_norm(),
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::fc(class_count),
            ],
        }
    }

    /// Same layer sequence as [`ModelSpec::mnist_cnn`] for an arbitrary
    /// `channels x side x side` input with narrower convolutions.
    pub fn tiny_cnn(channels: usize, side: usize, class_count: usize) -> Self {
        ModelSpec {
            input: vec![channels, side, side],
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::GroupNorm { groups: Some(2) },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::fc(class_count),
            ],
        }
    }
}

/// Activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub(crate) fn len(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub(crate) fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial { c, h, w } => vec![c, h, w],
            ActShape::Flat(n) => vec![n],
        }
    }
}

/// A layer with every size resolved against its input.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Conv(ConvGeometry),
    GroupNorm {
        channels: usize,
        groups: usize,
        spatial: usize,
    },
    Relu,
    MaxPool {
        channels: usize,
        in_h: usize,
        in_w: usize,
        size: usize,
        out_h: usize,
        out_w: usize,
    },
    Flatten,
    Linear {
        inputs: usize,
        outputs: usize,
    },
}

pub(crate) fn default_groups(channels: usize) -> usize {
    if channels >= 16 {
        8
    } else {
        channels
    }
}

/// Resolves every layer and returns them with the final activation shape.
pub(crate) fn resolve(spec: &ModelSpec) -> Result<(Vec<Layer>, ActShape)> {
    if spec.layers.is_empty() {
        return Err(Error::config("model spec has no layers"));
    }
    let mut shape = match *spec.input.as_slice() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => ActShape::Spatial { c, h, w },
        [n] if n > 0 => ActShape::Flat(n),
        _ => {
            return Err(Error::config(format!(
                "model input must be [C, H, W] or [N] with positive sizes, got {:?}",
                spec.input
            )))
        }
    };
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, ls) in spec.layers.iter().enumerate() {
        let unchainable =
            |what: &str| Error::config(format!("layer {i} ({ls:?}) {what}; input is {shape:?}"));
        let (layer, next) = match (ls, shape) {
            (
                &LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                },
                ActShape::Spatial { c, h, w },
            ) => {
                if out_channels == 0 {
                    return Err(unchainable("has zero output channels"));
                }
                let g = ConvGeometry::new(c, out_channels, kernel, Conv2dConfig { stride, padding }, h, w)
                    .map_err(|_| unchainable("does not fit its input"))?;
                let next = ActShape::Spatial {
                    c: out_channels,
                    h: g.out_h,
                    w: g.out_w,
                };
                (Layer::Conv(g), next)
            }
            (&LayerSpec::GroupNorm { groups }, ActShape::Spatial { c, h, w }) => {
                let groups = groups.unwrap_or_else(|| default_groups(c));
                if groups == 0 || c % groups != 0 {
                    return Err(unchainable("group count must divide the channel count"));
                }
                (
                    Layer::GroupNorm {
                        channels: c,
                        groups,
                        spatial: h * w,
                    },
                    shape,
                )
            }
            (LayerSpec::Relu, _) => (Layer::Relu, shape),
            (&LayerSpec::MaxPool { size }, ActShape::Spatial { c, h, w }) => {
                if size == 0 || size > h || size > w {
                    return Err(unchainable("pool window does not fit"));
                }
                let (oh, ow) = (h / size, w / size);
                (
                    Layer::MaxPool {
                        channels: c,
                        in_h: h,
                        in_w: w,
                        size,
                        out_h: oh,
                        out_w: ow,
                    },
                    ActShape::Spatial { c, h: oh, w: ow },
                )
            }
            (LayerSpec::Flatten, s) => (Layer::Flatten, ActShape::Flat(s.len())),
            (&LayerSpec::Linear { out_features }, ActShape::Flat(n)) => {
                if out_features == 0 {
                    return Err(unchainable("has zero outputs"));
                }
                (
                    Layer::Linear {
                        inputs: n,
                        outputs: out_features,
                    },
                    ActShape::Flat(out_features),
                )
            }
            (LayerSpec::Linear { .. }, _) => return Err(unchainable("needs flat input (add a flatten layer)")),
            _ => return Err(unchainable("needs spatial input")),
        };
        layers.push(layer);
        shape = next;
    }
    Ok((layers, shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_spec_chains_to_ten_logits() {
        let (layers, out) = resolve(&ModelSpec::mnist_cnn(10)).unwrap();
        assert_eq!(layers.len(), 10);
        assert_eq!(out, ActShape::Flat(10));
        assert_eq!(
            layers[8..],
            [Layer::Flatten, Layer::Linear { inputs: 512, outputs: 10 }]
        );
    }

    #[test]
    fn rejects_empty_and_unchainable() {
        let empty = ModelSpec { input: vec![1, 4, 4], layers: vec![] };
        assert!(matches!(resolve(&empty), Err(Error::Config(_))));
        let fc_on_image = ModelSpec { input: vec![1, 4, 4], layers: vec![LayerSpec::fc(2)] };
        assert!(matches!(resolve(&fc_on_image), Err(Error::Config(_))));
        let big_kernel = ModelSpec { input: vec![1, 4, 4], layers: vec![LayerSpec::conv(2, 5)] };
        assert!(matches!(resolve(&big_kernel), Err(Error::Config(_))));
        let bad_groups = ModelSpec {
            input: vec![6, 4, 4],
            layers: vec![LayerSpec::GroupNorm { groups: Some(4) }],
        };
        assert!(matches!(resolve(&bad_groups), Err(Error::Config(_))));
    }

    #[test]
    fn default_group_rule() {
        assert_eq!(default_groups(32), 8);
        assert_eq!(default_groups(16), 8);
        assert_eq!(default_groups(4), 4);
    }

    #[test]
    fn spec_json_shape() {
        let json = r#"{"input":[1,28,28],"layers":[
            {"kind":"conv2d","out_channels":16,"kernel":5},
            {"kind":"group_norm"},{"kind":"relu"},{"kind":"max_pool","size":2},
            {"kind":"flatten"},{"kind":"fc","out_features":10}]}"#;
        let spec: ModelSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.layers[0], LayerSpec::conv(16, 5));
        assert_eq!(spec.layers[5], LayerSpec::fc(10));
    }
}
