//! Directory containers for float and expanded models.
//!
//! A float model is `model.json` plus `weights.bin` (concatenated
//! little-endian f32 tensors addressed by byte offset). An expanded model
//! is `expansion.json`, `codes.bin` (one signed byte per code),
//! `scales.bin` (f32 scales, biases and activation scales) and
//! `masks.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, LayerGeometry, LayerKind, LayerSpec, Model};
use crate::error::{Error, Result};
use crate::expansion::{ActivationQuant, ExpandedLayer, ExpandedModel, Residue};
use crate::quant::{Grid, QuantizedTensor};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const MODEL_MANIFEST: &str = "model.json";
const WEIGHTS: &str = "weights.bin";
const EXPANSION_MANIFEST: &str = "expansion.json";
const CODES: &str = "codes.bin";
const SCALES: &str = "scales.bin";
const MASKS: &str = "masks.json";

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    version: u32,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct GeometryEntry {
    name: String,
    kind: String,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    spatial: usize,
    activation: String,
}

impl GeometryEntry {
    fn from_geometry(g: &LayerGeometry) -> Self {
        Self {
            name: g.name.clone(),
            kind: g.kind.as_str().to_string(),
            in_channels: g.in_channels,
            out_channels: g.out_channels,
            kernel: g.kernel,
            stride: g.stride,
            spatial: g.spatial,
            activation: g.activation.as_str().to_string(),
        }
    }

    fn to_geometry(&self) -> Result<LayerGeometry> {
        let g = LayerGeometry {
            name: self.name.clone(),
            kind: self.kind.parse::<LayerKind>()?,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            spatial: self.spatial,
            activation: self.activation.parse::<Activation>()?,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    #[serde(flatten)]
    geometry: GeometryEntry,
    weight_offset: usize,
    weight_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_len: Option<usize>,
}

/// Byte slice of `blob` described by a manifest entry.
fn slice<'a>(blob: &'a [u8], name: &str, offset: usize, len: usize) -> Result<&'a [u8]> {
    match offset.checked_add(len) {
        Some(end) if end <= blob.len() => Ok(&blob[offset..end]),
        _ => Err(Error::LengthMismatch {
            name: name.to_string(),
            declared: len,
            available: blob.len().saturating_sub(offset),
        }),
    }
}

fn decode_f32(bytes: &[u8], name: &str, expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 4 {
        return Err(Error::InvalidShape(format!(
            "tensor `{name}` spans {} bytes, its shape needs {}",
            bytes.len(),
            expected * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: name.to_string(),
            index,
        });
    }
    Ok(values)
}

fn push_f32(blob: &mut Vec<u8>, values: &[f64]) -> (usize, usize) {
    let offset = blob.len();
    for &v in values {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    (offset, blob.len() - offset)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    write(path, text.as_bytes())
}

fn check_version(found: u32, what: &str) -> Result<()> {
    if found == FORMAT_VERSION {
        Ok(())
    } else {
        Err(Error::Manifest(format!(
            "{what} has version {found}, this build reads version {FORMAT_VERSION}"
        )))
    }
}

pub fn save_model(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let (weight_offset, weight_len) = push_f32(&mut blob, layer.weight.data());
        let (bias_offset, bias_len) = match layer.bias_values() {
            Some(b) => {
                let (o, l) = push_f32(&mut blob, b);
                (Some(o), Some(l))
            }
            None => (None, None),
        };
        layers.push(LayerEntry {
            geometry: GeometryEntry::from_geometry(&layer.geometry),
            weight_offset,
            weight_len,
            bias_offset,
            bias_len,
        });
    }
    let manifest = ModelManifest {
        version: FORMAT_VERSION,
        metadata: model.metadata.clone(),
        layers,
    };
    write(&dir.join(WEIGHTS), &blob)?;
    write_json(&dir.join(MODEL_MANIFEST), &manifest)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let manifest: ModelManifest = read_json(&dir.join(MODEL_MANIFEST))?;
    check_version(manifest.version, MODEL_MANIFEST)?;
    let blob = read(&dir.join(WEIGHTS))?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let g = entry.geometry.to_geometry()?;
        let wname = format!("{}.weight", g.name);
        let shape = g.weight_shape();
        let count = shape.iter().product();
        let bytes = slice(&blob, &wname, entry.weight_offset, entry.weight_len)?;
        let weight = Tensor::new(shape, decode_f32(bytes, &wname, count)?)?;
        let bias = match (entry.bias_offset, entry.bias_len) {
            (Some(offset), Some(len)) => {
                let bname = format!("{}.bias", g.name);
                let bytes = slice(&blob, &bname, offset, len)?;
                Some(Tensor::vector(decode_f32(bytes, &bname, g.out_channels)?)?)
            }
            (None, None) => None,
            _ => {
                return Err(Error::Manifest(format!(
                    "layer `{}` declares only one of bias_offset / bias_len",
                    g.name
                )))
            }
        };
        layers.push(LayerSpec::new(g, weight, bias)?);
    }
    let model = Model {
        layers,
        metadata: manifest.metadata,
    };
    model.validate()?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct ExpansionManifest {
    version: u32,
    bits: u8,
    order: usize,
    operator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    outlier_fraction: Option<f64>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<ActivationEntry>,
    layers: Vec<ExpandedLayerEntry>,
}

/// Layer input scales followed by the output scale.
#[derive(Serialize, Deserialize)]
struct ActivationEntry {
    bits: u8,
    scales_offset: usize,
    scales_len: usize,
}

#[derive(Serialize, Deserialize)]
struct ExpandedLayerEntry {
    #[serde(flatten)]
    geometry: GeometryEntry,
    gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_offset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_len: Option<usize>,
    residues: Vec<ResidueEntry>,
}

#[derive(Serialize, Deserialize)]
struct ResidueEntry {
    order: usize,
    grid: String,
    bits: u8,
    shape: Vec<usize>,
    codes_offset: usize,
    codes_len: usize,
    scales_offset: usize,
    scales_len: usize,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    version: u32,
    /// Per layer, per residue: kept channel indices; `[]` means dense.
    layers: Vec<Vec<Vec<usize>>>,
}

pub fn save_expanded(em: &ExpandedModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    em.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut codes = Vec::new();
    let mut scales = Vec::new();
    let mut masks = Vec::with_capacity(em.layers.len());
    let mut layers = Vec::with_capacity(em.layers.len());
    for layer in &em.layers {
        let mut entries = Vec::with_capacity(layer.residues.len());
        let mut layer_masks = Vec::with_capacity(layer.residues.len());
        for r in &layer.residues {
            let codes_offset = codes.len();
            codes.extend(r.q.codes.iter().map(|&c| c as u8));
            let (scales_offset, scales_len) = push_f32(&mut scales, &r.q.scales);
            entries.push(ResidueEntry {
                order: r.order,
                grid: r.q.grid.as_str().to_string(),
                bits: r.q.bits,
                shape: r.q.shape.clone(),
                codes_offset,
                codes_len: r.q.codes.len(),
                scales_offset,
                scales_len,
            });
            layer_masks.push(r.mask.clone().unwrap_or_default());
        }
        let (bias_offset, bias_len) = match &layer.bias {
            Some(b) => {
                let (o, l) = push_f32(&mut scales, b);
                (Some(o), Some(l))
            }
            None => (None, None),
        };
        layers.push(ExpandedLayerEntry {
            geometry: GeometryEntry::from_geometry(&layer.geometry),
            gamma: layer.gamma,
            bias_offset,
            bias_len,
            residues: entries,
        });
        masks.push(layer_masks);
    }
    let activation = em.activation.as_ref().map(|a| {
        let mut all = a.input_scales.clone();
        all.push(a.output_scale);
        let (scales_offset, scales_len) = push_f32(&mut scales, &all);
        ActivationEntry {
            bits: a.bits,
            scales_offset,
            scales_len,
        }
    });
    let manifest = ExpansionManifest {
        version: FORMAT_VERSION,
        bits: em.bits,
        order: em.order,
        operator: em.operator.clone(),
        outlier_fraction: em.outlier_fraction,
        metadata: em.metadata.clone(),
        activation,
        layers,
    };
    write(&dir.join(CODES), &codes)?;
    write(&dir.join(SCALES), &scales)?;
    write_json(
        &dir.join(MASKS),
        &MaskFile {
            version: FORMAT_VERSION,
            layers: masks,
        },
    )?;
    write_json(&dir.join(EXPANSION_MANIFEST), &manifest)
}

pub fn load_expanded(dir: impl AsRef<Path>) -> Result<ExpandedModel> {
    let dir = dir.as_ref();
    let manifest: ExpansionManifest = read_json(&dir.join(EXPANSION_MANIFEST))?;
    check_version(manifest.version, EXPANSION_MANIFEST)?;
    let masks: MaskFile = read_json(&dir.join(MASKS))?;
    check_version(masks.version, MASKS)?;
    let codes = read(&dir.join(CODES))?;
    let scales = read(&dir.join(SCALES))?;
    if masks.layers.len() != manifest.layers.len() {
        return Err(Error::Manifest(format!(
            "{MASKS} lists {} layers, {EXPANSION_MANIFEST} {}",
            masks.layers.len(),
            manifest.layers.len()
        )));
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (entry, layer_masks) in manifest.layers.iter().zip(&masks.layers) {
        let g = entry.geometry.to_geometry()?;
        if layer_masks.len() != entry.residues.len() {
            return Err(Error::Manifest(format!(
                "layer `{}`: {} masks for {} residues",
                g.name,
                layer_masks.len(),
                entry.residues.len()
            )));
        }
        let mut residues = Vec::with_capacity(entry.residues.len());
        for (r, mask) in entry.residues.iter().zip(layer_masks) {
            let name = format!("{}.residue{}", g.name, r.order);
            let grid = match r.grid.as_str() {
                "uniform" => Grid::Uniform,
                "binary" => Grid::Binary,
                other => return Err(Error::Manifest(format!("unknown grid `{other}`"))),
            };
            let count: usize = r.shape.iter().product();
            let raw = slice(&codes, &name, r.codes_offset, r.codes_len)?;
            if raw.len() != count {
                return Err(Error::InvalidShape(format!(
                    "`{name}` stores {} codes, its shape needs {count}",
                    raw.len()
                )));
            }
            let scale_count = r.scales_len / 4;
            let q = QuantizedTensor {
                shape: r.shape.clone(),
                codes: raw.iter().map(|&c| c as i8).collect(),
                scales: decode_f32(
                    slice(&scales, &name, r.scales_offset, r.scales_len)?,
                    &name,
                    scale_count,
                )?,
                bits: r.bits,
                grid,
            };
            q.validate()?;
            let mask = if mask.is_empty() {
                None
            } else {
                let n_o = q.channels();
                if mask.windows(2).any(|w| w[0] >= w[1]) || mask.iter().any(|&i| i >= n_o) {
                    return Err(Error::Manifest(format!(
                        "mask of `{name}` must be sorted, unique and below {n_o}"
                    )));
                }
                Some(mask.clone())
            };
            residues.push(Residue {
                order: r.order,
                q,
                mask,
            });
        }
        let bias = match (entry.bias_offset, entry.bias_len) {
            (Some(offset), Some(len)) => {
                let bname = format!("{}.bias", g.name);
                let bytes = slice(&scales, &bname, offset, len)?;
                Some(decode_f32(bytes, &bname, g.out_channels)?)
            }
            (None, None) => None,
            _ => {
                return Err(Error::Manifest(format!(
                    "layer `{}` declares only one of bias_offset / bias_len",
                    g.name
                )))
            }
        };
        layers.push(ExpandedLayer {
            geometry: g,
            bias,
            residues,
            bits: manifest.bits,
            gamma: entry.gamma,
        });
    }

    let activation = match &manifest.activation {
        Some(a) => {
            let expected = layers.len() + 1;
            let mut all = decode_f32(
                slice(&scales, "activation scales", a.scales_offset, a.scales_len)?,
                "activation scales",
                expected,
            )?;
            if let Some(&s) = all.iter().find(|s| **s <= 0.0) {
                return Err(Error::NonPositiveScale(s));
            }
            let output_scale = all.pop().expect("at least one scale");
            Some(ActivationQuant {
                bits: a.bits,
                input_scales: all,
                output_scale,
            })
        }
        None => None,
    };

    let em = ExpandedModel {
        layers,
        bits: manifest.bits,
        order: manifest.order,
        operator: manifest.operator,
        outlier_fraction: manifest.outlier_fraction,
        activation,
        metadata: manifest.metadata,
    };
    em.validate()?;
    Ok(em)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_synthetic_model, parse_layer_list};

    fn sample_model() -> Model {
        generate_synthetic_model(
            &parse_layer_list("dense:6:5:relu:bias,dense:5:3").unwrap(),
            11,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = sample_model();
        save_model(&m, dir.path()).unwrap();
        let first = fs::read(dir.path().join(WEIGHTS)).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, m);
        save_model(&back, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(WEIGHTS)).unwrap(), first);
    }

    #[test]
    fn empty_model_and_absent_bias() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&Model::default(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MODEL_MANIFEST)).unwrap();
        assert!(text.contains("\"layers\": []"));
        assert!(load_model(dir.path()).unwrap().layers.is_empty());

        let m = sample_model();
        save_model(&m, dir.path()).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(MODEL_MANIFEST)).unwrap()).unwrap();
        assert!(manifest["layers"][0].get("bias_offset").is_some());
        assert!(manifest["layers"][1].get("bias_offset").is_none());
    }

    #[test]
    fn truncated_blob_is_a_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let w = Tensor::new(vec![25, 4], vec![0.5; 100]).unwrap();
        let m = Model::new(vec![LayerSpec::new(
            LayerGeometry::dense("fc", 4, 25, Activation::None),
            w,
            None,
        )
        .unwrap()])
        .unwrap();
        save_model(&m, dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS);
        let mut blob = fs::read(&path).unwrap();
        blob.truncate(99 * 4);
        fs::write(&path, blob).unwrap();
        match load_model(dir.path()) {
            Err(Error::LengthMismatch {
                declared,
                available,
                ..
            }) => assert_eq!((declared, available), (400, 396)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_and_unknown_kind_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&sample_model(), dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS);
        let mut blob = fs::read(&path).unwrap();
        blob[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &blob).unwrap();
        assert!(matches!(
            load_model(dir.path()),
            Err(Error::NonFinite { index: 2, .. })
        ));

        let mpath = dir.path().join(MODEL_MANIFEST);
        let text = fs::read_to_string(&mpath)
            .unwrap()
            .replacen("\"dense\"", "\"lstm\"", 1);
        fs::write(&mpath, text).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::UnknownLayerKind(k)) if k == "lstm"));
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::MissingFile(_))));
        assert!(matches!(
            load_expanded(dir.path()),
            Err(Error::MissingFile(_))
        ));
    }

    fn tiny_expanded(bits: u8) -> ExpandedModel {
        let g = LayerGeometry::dense("fc", 3, 1, Activation::None);
        let q = QuantizedTensor {
            shape: vec![1, 3],
            codes: vec![3, -2, 1],
            scales: vec![0.3f32 as f64],
            bits,
            grid: Grid::Uniform,
        };
        ExpandedModel {
            layers: vec![ExpandedLayer {
                geometry: g,
                bias: None,
                residues: vec![Residue::dense(1, q)],
                bits,
                gamma: 0.0,
            }],
            bits,
            order: 1,
            operator: "uniform".into(),
            outlier_fraction: None,
            activation: None,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn out_of_range_code_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_expanded(&tiny_expanded(3), dir.path()).unwrap();
        let path = dir.path().join(CODES);
        let mut codes = fs::read(&path).unwrap();
        codes[0] = 5;
        fs::write(&path, codes).unwrap();
        match load_expanded(dir.path()) {
            Err(Error::CodeRange { code, lo, hi, .. }) => assert_eq!((code, lo, hi), (5, -4, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_mask_means_dense() {
        let dir = tempfile::tempdir().unwrap();
        let em = tiny_expanded(4);
        save_expanded(&em, dir.path()).unwrap();
        let masks = fs::read_to_string(dir.path().join(MASKS)).unwrap();
        assert!(masks.contains("[]"));
        let back = load_expanded(dir.path()).unwrap();
        assert_eq!(back, em);
        assert!(back.layers[0].residues[0].mask.is_none());
    }
}
