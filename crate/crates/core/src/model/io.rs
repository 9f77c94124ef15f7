//! Model and bundle files.
//!
//! A model is a JSON manifest plus one little-endian f32 blob holding all
//! weights and biases. A quantized bundle is a directory with a JSON
//! manifest, one quantized-tensor file per layer, and an activation-scales
//! JSON written once calibrated.

use super::{ActQuant, Activation, DenseLayer, ModelError, ModelSpec, QuantizedLayer, QuantizedModel};
use crate::quant::{read_quantized, write_quantized};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestLayer {
    in_dim: usize,
    out_dim: usize,
    activation: String,
    /// Byte offset of the weight matrix in the blob.
    weights_offset: usize,
    /// Byte offset of the bias vector in the blob.
    bias_offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    name: String,
    input_dim: usize,
    output_dim: usize,
    /// Blob filename, relative to the manifest.
    blob: String,
    layers: Vec<ManifestLayer>,
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(blob)
}

/// Write `model` as `<path>` (JSON manifest) plus a sibling `.bin` blob.
pub fn save_model(model: &ModelSpec, path: &Path) -> Result<(), ModelError> {
    let blob_name = path
        .file_stem()
        .map(|s| format!("{}.bin", s.to_string_lossy()))
        .unwrap_or_else(|| "model.bin".into());
    let mut blob: Vec<u8> = Vec::new();
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in &model.layers {
        let weights_offset = blob.len();
        for &v in l.weights.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let bias_offset = blob.len();
        for &v in l.bias.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        layers.push(ManifestLayer {
            in_dim: l.in_dim(),
            out_dim: l.out_dim(),
            activation: l.activation.as_str().into(),
            weights_offset,
            bias_offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: model.name.clone(),
        input_dim: model.input_dim(),
        output_dim: model.output_dim(),
        blob: blob_name.clone(),
        layers,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| ModelError::Manifest(e.to_string()))?;
    std::fs::write(path, json)?;
    std::fs::write(blob_path(path, &blob_name), blob)?;
    Ok(())
}

fn read_f32s(blob: &[u8], offset: usize, count: usize) -> Result<Vec<f32>, ModelError> {
    let end = offset
        .checked_add(count * 4)
        .ok_or(ModelError::TruncatedBlob {
            expected: usize::MAX,
            actual: blob.len(),
        })?;
    if end > blob.len() {
        return Err(ModelError::TruncatedBlob {
            expected: end,
            actual: blob.len(),
        });
    }
    Ok(blob[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn load_model(path: &Path) -> Result<ModelSpec, ModelError> {
    let manifest_bytes = std::fs::read(path)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| ModelError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelError::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    let blob = std::fs::read(blob_path(path, &manifest.blob))?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for ml in &manifest.layers {
        let w = read_f32s(&blob, ml.weights_offset, ml.in_dim * ml.out_dim)?;
        let b = read_f32s(&blob, ml.bias_offset, ml.out_dim)?;
        layers.push(DenseLayer {
            weights: Tensor::new(vec![ml.in_dim, ml.out_dim], w)?,
            bias: Tensor::new(vec![ml.out_dim], b)?,
            activation: Activation::parse(&ml.activation)?,
        });
    }
    let model = ModelSpec::new(manifest.name, layers)?;
    if model.input_dim() != manifest.input_dim || model.output_dim() != manifest.output_dim {
        return Err(ModelError::Manifest(format!(
            "manifest dims {}->{} do not match layers {}->{}",
            manifest.input_dim,
            manifest.output_dim,
            model.input_dim(),
            model.output_dim()
        )));
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct BundleLayer {
    file: String,
    in_dim: usize,
    out_dim: usize,
    activation: String,
    act_bits: u8,
    act_exponent: f64,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    format_version: u32,
    model_name: String,
    layers: Vec<BundleLayer>,
    /// Activation-scales filename, present once calibrated.
    act_scales: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ActScaleEntry {
    layer: usize,
    max_abs: f64,
}

#[derive(Serialize, Deserialize)]
struct ActScales {
    entries: Vec<ActScaleEntry>,
}

/// Write a quantized-model bundle into `dir`; returns the files written.
pub fn save_bundle(qm: &QuantizedModel, dir: &Path) -> Result<Vec<PathBuf>, ModelError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut layers = Vec::with_capacity(qm.layers.len());
    for (l, layer) in qm.layers.iter().enumerate() {
        let file = format!("layer_{l:02}.qt");
        let path = dir.join(&file);
        write_quantized(&layer.weight, &path)?;
        written.push(path);
        layers.push(BundleLayer {
            file,
            in_dim: layer.weight.shape()[0],
            out_dim: layer.weight.shape()[1],
            activation: layer.activation.as_str().into(),
            act_bits: qm.act[l].bits,
            act_exponent: qm.act[l].exponent,
        });
    }
    let act_scales = if qm.is_calibrated() {
        let scales = ActScales {
            entries: qm
                .act
                .iter()
                .enumerate()
                .map(|(layer, a)| ActScaleEntry {
                    layer,
                    max_abs: a.frozen_max.unwrap(),
                })
                .collect(),
        };
        let path = dir.join("act_scales.json");
        std::fs::write(
            &path,
            serde_json::to_vec_pretty(&scales).map_err(|e| ModelError::Manifest(e.to_string()))?,
        )?;
        written.push(path);
        Some("act_scales.json".to_string())
    } else {
        None
    };
    let manifest = BundleManifest {
        format_version: FORMAT_VERSION,
        model_name: qm.name.clone(),
        layers,
        act_scales,
    };
    let path = dir.join("bundle.json");
    std::fs::write(
        &path,
        serde_json::to_vec_pretty(&manifest).map_err(|e| ModelError::Manifest(e.to_string()))?,
    )?;
    written.push(path);
    Ok(written)
}

/// Load a bundle from `dir`; biases and activation kinds come from the
/// full-precision `model`, which must match the bundle's dimensions.
pub fn load_bundle(dir: &Path, model: &ModelSpec) -> Result<QuantizedModel, ModelError> {
    let manifest_bytes = std::fs::read(dir.join("bundle.json"))?;
    let manifest: BundleManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| ModelError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelError::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.layers.len() != model.num_layers() {
        return Err(ModelError::PolicyLayers {
            expected: model.num_layers(),
            got: manifest.layers.len(),
        });
    }
    let mut frozen: Vec<Option<f64>> = vec![None; manifest.layers.len()];
    if let Some(name) = &manifest.act_scales {
        let scales_bytes = std::fs::read(dir.join(name))?;
        let scales: ActScales = serde_json::from_slice(&scales_bytes)
            .map_err(|e| ModelError::Manifest(e.to_string()))?;
        for e in scales.entries {
            if e.layer >= frozen.len() {
                return Err(ModelError::Manifest(format!(
                    "act scale for layer {} out of range",
                    e.layer
                )));
            }
            frozen[e.layer] = Some(e.max_abs);
        }
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut act = Vec::with_capacity(manifest.layers.len());
    for (l, bl) in manifest.layers.iter().enumerate() {
        let weight = read_quantized(&dir.join(&bl.file))?;
        let model_layer = &model.layers[l];
        if weight.shape() != [bl.in_dim, bl.out_dim]
            || model_layer.in_dim() != bl.in_dim
            || model_layer.out_dim() != bl.out_dim
        {
            return Err(ModelError::DimChain {
                layer: l,
                expected: model_layer.in_dim(),
                got: bl.in_dim,
            });
        }
        layers.push(QuantizedLayer {
            weight,
            bias: model_layer.bias.clone(),
            activation: model_layer.activation,
        });
        act.push(ActQuant {
            bits: bl.act_bits,
            exponent: bl.act_exponent,
            frozen_max: frozen[l],
        });
    }
    Ok(QuantizedModel {
        name: manifest.model_name,
        layers,
        act,
    })
}
