use std::ops::Range;

use crate::tensor::Shape;

use super::spec::Layer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    /// Group-norm scale.
    Scale,
    /// Group-norm shift.
    Shift,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Scale => "scale",
            ParamRole::Shift => "shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    /// `"<layer>.<role>"`, e.g. `"0.weight"`.
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Shape,
    /// Start of this tensor in the global flat enumeration.
    pub offset: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    /// Conv and fc weight matrices.
    pub fn is_weight(&self) -> bool {
        self.role == ParamRole::Weight
    }
}

/// Global flat enumeration of all parameters: layer order, then parameter
/// name in lexicographic order, then row-major within the tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamInfo>,
    total: usize,
    /// For each layer, indices into `entries` by role.
    by_layer: Vec<LayerParams>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct LayerParams {
    pub weight: Option<usize>,
    pub bias: Option<usize>,
    pub scale: Option<usize>,
    pub shift: Option<usize>,
}

impl ParamLayout {
    pub(crate) fn for_layers(layers: &[Layer]) -> Self {
        let mut entries = Vec::new();
        let mut by_layer = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for (li, layer) in layers.iter().enumerate() {
            let mut roles: Vec<(ParamRole, Vec<usize>)> = match *layer {
                Layer::Conv(g) => vec![
                    (ParamRole::Weight, vec![g.out_channels, g.in_channels, g.kernel, g.kernel]),
                    (ParamRole::Bias, vec![g.out_channels]),
                ],
                Layer::Linear { inputs, outputs } => vec![
                    (ParamRole::Weight, vec![outputs, inputs]),
                    (ParamRole::Bias, vec![outputs]),
                ],
                Layer::GroupNorm { channels, .. } => vec![
                    (ParamRole::Scale, vec![channels]),
                    (ParamRole::Shift, vec![channels]),
                ],
                _ => vec![],
            };
            roles.sort_by_key(|(r, _)| r.as_str());
            let mut lp = LayerParams::default();
            for (role, dims) in roles {
                let shape = Shape::new(dims).expect("resolved layers have positive sizes");
                let idx = entries.len();
                match role {
                    ParamRole::Weight => lp.weight = Some(idx),
                    ParamRole::Bias => lp.bias = Some(idx),
                    ParamRole::Scale => lp.scale = Some(idx),
                    ParamRole::Shift => lp.shift = Some(idx),
                }
                let len = shape.numel();
                entries.push(ParamInfo {
                    name: format!("{li}.{}", role.as_str()),
                    layer: li,
                    role,
                    shape,
                    offset,
                });
                offset += len;
            }
            by_layer.push(lp);
        }
        ParamLayout {
            entries,
            total: offset,
            by_layer,
        }
    }

    pub fn entries(&self) -> &[ParamInfo] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> Option<&ParamInfo> {
        self.entries.get(i)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub(crate) fn layer(&self, li: usize) -> LayerParams {
        self.by_layer[li]
    }
}
