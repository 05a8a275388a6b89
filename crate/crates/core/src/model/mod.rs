//! Network description, on-disk container and synthetic model generator.

mod io;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_expanded, load_model, save_expanded, save_model, FORMAT_VERSION};
pub use synth::{generate_synthetic_model, parse_layer_list, LayerShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(LayerKind::Dense),
            "conv2d" => Ok(LayerKind::Conv2d),
            other => Err(Error::UnknownLayerKind(other.to_string())),
        }
    }
}

/// Pointwise activation applied after a layer.
///
/// Only `relu` and `none` are certified by the bounds module and supported
/// by the integer engine; the sigmoid family runs in the float engines only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::None => "none",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::None => x,
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Whether the activation is 1-Lipschitz and fixes zero.
    pub fn is_certified(self) -> bool {
        matches!(self, Activation::Relu | Activation::None)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "none" => Ok(Activation::None),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Manifest(format!("unknown activation `{other}`"))),
        }
    }
}

/// Shape of a layer, independent of its parameters.
///
/// Convolutions are unpadded ("valid"). Every inter-layer tensor is a flat
/// vector in channel-major (CHW) order, so a dense layer following a
/// convolution sees `out_channels * out_spatial^2` inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub spatial: usize,
    pub activation: Activation,
}

impl LayerGeometry {
    pub fn dense(name: impl Into<String>, n_i: usize, n_o: usize, activation: Activation) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Dense,
            in_channels: n_i,
            out_channels: n_o,
            kernel: 1,
            stride: 1,
            spatial: 1,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidShape(format!("layer `{}`: {msg}", self.name)));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.kernel == 0 || self.stride == 0 || self.spatial == 0 {
            return bad("kernel, stride and spatial size must be positive".into());
        }
        match self.kind {
            LayerKind::Dense => {
                if self.kernel != 1 || self.stride != 1 || self.spatial != 1 {
                    return bad("dense layers use kernel = stride = spatial = 1".into());
                }
            }
            LayerKind::Conv2d => {
                if self.kernel > self.spatial {
                    return bad(format!(
                        "kernel {} exceeds input side {}",
                        self.kernel, self.spatial
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense => vec![self.out_channels, self.in_channels],
            LayerKind::Conv2d => vec![
                self.out_channels,
                self.in_channels,
                self.kernel,
                self.kernel,
            ],
        }
    }

    /// Side of the output feature map.
    pub fn out_spatial(&self) -> usize {
        (self.spatial - self.kernel) / self.stride + 1
    }

    /// Output positions per channel.
    pub fn positions(&self) -> usize {
        self.out_spatial() * self.out_spatial()
    }

    /// Columns of the weight matrix (`n_i * d^2`).
    pub fn cols(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.spatial * self.spatial
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.positions()
    }

    /// Upper bound on how many output positions read any single input value.
    pub fn overlap(&self) -> usize {
        match self.kind {
            LayerKind::Dense => 1,
            LayerKind::Conv2d => {
                let per_axis = self.kernel.div_ceil(self.stride);
                per_axis * per_axis
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub geometry: LayerGeometry,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LayerSpec {
    pub fn new(geometry: LayerGeometry, weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let layer = Self {
            geometry,
            weight,
            bias,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn name(&self) -> &str {
        &self.geometry.name
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        g.validate()?;
        if self.weight.shape() != g.weight_shape().as_slice() {
            return Err(Error::InvalidShape(format!(
                "layer `{}`: weight shape {:?}, expected {:?}",
                g.name,
                self.weight.shape(),
                g.weight_shape()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != g.out_channels {
                return Err(Error::InvalidShape(format!(
                    "layer `{}`: bias holds {} values for {} channels",
                    g.name,
                    b.len(),
                    g.out_channels
                )));
            }
        }
        for (tensor, what) in [(Some(&self.weight), "weight"), (self.bias.as_ref(), "bias")] {
            if let Some(index) = tensor.and_then(Tensor::first_non_finite) {
                return Err(Error::NonFinite {
                    name: format!("{}.{what}", g.name),
                    index,
                });
            }
        }
        Ok(())
    }

    pub fn bias_values(&self) -> Option<&[f64]> {
        self.bias.as_ref().map(Tensor::data)
    }
}

/// A sequential network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Model {
    pub layers: Vec<LayerSpec>,
    pub metadata: BTreeMap<String, String>,
}

impl Model {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let model = Self {
            layers,
            metadata: BTreeMap::new(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        for layer in &self.layers {
            layer.validate()?;
        }
        check_chain(self.layers.iter().map(|l| &l.geometry))
    }

    pub fn input_len(&self) -> Option<usize> {
        self.layers.first().map(|l| l.geometry.input_len())
    }

    pub fn output_len(&self) -> Option<usize> {
        self.layers.last().map(|l| l.geometry.output_len())
    }
}

/// Checks that consecutive layers agree on the flat size of the tensor
/// passed between them.
pub(crate) fn check_chain<'a>(geoms: impl Iterator<Item = &'a LayerGeometry>) -> Result<()> {
    let mut prev: Option<&LayerGeometry> = None;
    for g in geoms {
        if let Some(p) = prev {
            if p.output_len() != g.input_len() {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{}` emits {} values but `{}` expects {}",
                    p.name,
                    p.output_len(),
                    g.name,
                    g.input_len()
                )));
            }
        }
        prev = Some(g);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry() {
        let g = LayerGeometry {
            name: "c".into(),
            kind: LayerKind::Conv2d,
            in_channels: 3,
            out_channels: 4,
            kernel: 3,
            stride: 2,
            spatial: 7,
            activation: Activation::Relu,
        };
        g.validate().unwrap();
        assert_eq!(g.out_spatial(), 3);
        assert_eq!(g.output_len(), 36);
        assert_eq!(g.cols(), 27);
        assert_eq!(g.overlap(), 4);
    }

    #[test]
    fn chain_mismatch_is_rejected() {
        let a = LayerSpec::new(
            LayerGeometry::dense("a", 2, 3, Activation::Relu),
            Tensor::zeros(vec![3, 2]),
            None,
        )
        .unwrap();
        let b = LayerSpec::new(
            LayerGeometry::dense("b", 4, 1, Activation::None),
            Tensor::zeros(vec![1, 4]),
            None,
        )
        .unwrap();
        assert!(matches!(
            Model::new(vec![a, b]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn bias_length_checked() {
        let r = LayerSpec::new(
            LayerGeometry::dense("a", 2, 3, Activation::Relu),
            Tensor::zeros(vec![3, 2]),
            Some(Tensor::zeros(vec![2])),
        );
        assert!(matches!(r, Err(Error::InvalidShape(_))));
    }
}
