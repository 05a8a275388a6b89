//! Seeded synthetic models.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Activation, LayerGeometry, LayerKind, LayerSpec, Model};
use crate::bounds::spectral_norm_of;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of generated biases.
const BIAS_STD: f64 = 0.05;

/// One entry of a layer list such as `dense:16:16:relu`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub geometry: LayerGeometry,
    pub bias: bool,
}

/// Parses a comma-separated layer list.
///
/// Grammar per entry: `dense:IN:OUT[:ACT][:bias]` or
/// `conv2d:IN:OUT:KERNEL:STRIDE:SIDE[:ACT][:bias]`. An empty string yields
/// no layers.
pub fn parse_layer_list(text: &str) -> Result<Vec<LayerShape>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .enumerate()
        .map(|(i, entry)| parse_entry(i, entry.trim()))
        .collect()
}

fn parse_entry(index: usize, entry: &str) -> Result<LayerShape> {
    let bad = |msg: &str| Error::InvalidConfig(format!("layer `{entry}`: {msg}"));
    let parts: Vec<&str> = entry.split(':').collect();
    let kind: LayerKind = parts[0]
        .parse()
        .map_err(|_| bad("kind must be `dense` or `conv2d`"))?;
    let dims = match kind {
        LayerKind::Dense => 2,
        LayerKind::Conv2d => 5,
    };
    if parts.len() < 1 + dims {
        return Err(bad(&format!("expected {dims} integer fields")));
    }
    let nums = parts[1..=dims]
        .iter()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| bad(&format!("`{p}` is not a size")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut activation = Activation::None;
    let mut bias = false;
    let mut seen_activation = false;
    for extra in &parts[1 + dims..] {
        if *extra == "bias" && !bias {
            bias = true;
        } else if !seen_activation && !bias {
            activation = extra
                .parse()
                .map_err(|_| bad(&format!("unknown activation `{extra}`")))?;
            seen_activation = true;
        } else {
            return Err(bad(&format!("unexpected field `{extra}`")));
        }
    }
    let name = format!("layer{index}");
    let geometry = match kind {
        LayerKind::Dense => LayerGeometry::dense(name, nums[0], nums[1], activation),
        LayerKind::Conv2d => LayerGeometry {
            name,
            kind,
            in_channels: nums[0],
            out_channels: nums[1],
            kernel: nums[2],
            stride: nums[3],
            spatial: nums[4],
            activation,
        },
    };
    geometry
        .validate()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(LayerShape { geometry, bias })
}

/// Draws i.i.d. Gaussian weights and rescales each layer so the spectral
/// norm of its `[n_o, n_i * d^2]` matrix is 1. Values are rounded to f32 so
/// the model survives a save/load cycle unchanged.
pub fn generate_synthetic_model(shapes: &[LayerShape], seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let g = shape.geometry.clone();
        g.validate()?;
        let dims = g.weight_shape();
        let count: usize = dims.iter().product();
        let mut data: Vec<f64> = (0..count)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let sigma = spectral_norm_of(&data, g.out_channels, g.cols()).value;
        if sigma > 0.0 {
            // Tiny headroom keeps the rounded matrix at or below norm 1.
            let k = 1.0 / (sigma * (1.0 + 1e-7));
            for v in &mut data {
                *v = (*v * k) as f32 as f64;
            }
        }
        let bias = if shape.bias {
            let b: Vec<f64> = (0..g.out_channels)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * BIAS_STD) as f32 as f64
                })
                .collect();
            Some(Tensor::vector(b)?)
        } else {
            None
        };
        layers.push(LayerSpec::new(g, Tensor::new(dims, data)?, bias)?);
    }
    let mut metadata = BTreeMap::new();
    metadata.insert("generator".to_string(), "synthetic-gaussian".to_string());
    metadata.insert("seed".to_string(), seed.to_string());
    let model = Model { layers, metadata };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dense_and_conv() {
        let l = parse_layer_list("dense:16:16:relu, conv2d:1:4:3:1:8:relu:bias,dense:4:2:bias")
            .unwrap();
        assert_eq!(l.len(), 3);
        assert_eq!(l[0].geometry.activation, Activation::Relu);
        assert!(!l[0].bias);
        assert_eq!(l[1].geometry.kind, LayerKind::Conv2d);
        assert_eq!((l[1].geometry.kernel, l[1].geometry.spatial), (3, 8));
        assert!(l[1].bias && l[2].bias);
        assert_eq!(l[2].geometry.activation, Activation::None);
        assert!(parse_layer_list("").unwrap().is_empty());
    }

    #[test]
    fn rejects_malformed_entries() {
        for bad in [
            "dense:4",
            "dense:4:x",
            "lstm:4:4",
            "dense:4:4:swish",
            "dense:0:4",
            "conv2d:1:1:5:1:3",
        ] {
            assert!(parse_layer_list(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let shapes = parse_layer_list("dense:4:4:relu,dense:4:2").unwrap();
        let a = generate_synthetic_model(&shapes, 7).unwrap();
        assert_eq!(a, generate_synthetic_model(&shapes, 7).unwrap());
        assert_ne!(a, generate_synthetic_model(&shapes, 8).unwrap());
        assert_eq!(a.layers.len(), 2);
        assert!(generate_synthetic_model(&[], 7).unwrap().layers.is_empty());
    }
}
