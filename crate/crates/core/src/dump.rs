// SPDX-License-Identifier: Apache-2.0

//! Activation dumps: per-layer raw activations for the samples of one
//! dataset split.
//!
//! On disk a dump is a directory holding `manifest.json` and one raw data
//! file per layer. Data files are little-endian `f32`, sample-major and
//! row-major within a sample, so a layer with shape `[C, H, W]` and `N`
//! samples occupies exactly `N * C * H * W * 4` bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NapError, Result};
use crate::extraction::{LayerKind, LayerSpec};
use crate::monitor::LayerActivations;

pub const DUMP_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VALUE_ENCODING_F32LE: &str = "f32le";

/// Where activations were captured relative to the layer's ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapturePoint {
    PreRelu,
    PostRelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub sample_count: usize,
    pub data_file: String,
    pub value_encoding: String,
}

impl LayerEntry {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            name: self.name.clone(),
            kind: self.kind,
            shape: self.shape.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub format_version: u32,
    pub model_id: String,
    pub dataset_id: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture: Option<CapturePoint>,
    pub layers: Vec<LayerEntry>,
}

/// Activations of one layer for every sample of a dump.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerData {
    spec: LayerSpec,
    sample_count: usize,
    values: Vec<f32>,
}

impl LayerData {
    pub fn new(spec: LayerSpec, sample_count: usize, values: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        let expected = sample_count * spec.element_count();
        if values.len() != expected {
            return Err(NapError::ShapeMismatch {
                layer: spec.name,
                expected,
                found: values.len(),
            });
        }
        Ok(Self {
            spec,
            sample_count,
            values,
        })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let stride = self.spec.element_count();
        &self.values[i * stride..(i + 1) * stride]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let values = indices.iter().flat_map(|&i| self.sample(i).iter().copied()).collect();
        Self {
            spec: self.spec.clone(),
            sample_count: indices.len(),
            values,
        }
    }
}

/// Identity of a dump; everything in the manifest except the layer table.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DumpInfo {
    pub model_id: String,
    pub dataset_id: String,
    pub split: String,
    pub capture: Option<CapturePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub info: DumpInfo,
    layers: Vec<LayerData>,
}

impl ActivationDump {
    pub fn new(info: DumpInfo, layers: Vec<LayerData>) -> Result<Self> {
        if let Some(first) = layers.first() {
            if let Some(odd) = layers.iter().find(|l| l.sample_count != first.sample_count) {
                return Err(NapError::SchemaMismatch(format!(
                    "layer `{}` has {} samples, layer `{}` has {}",
                    first.name(),
                    first.sample_count,
                    odd.name(),
                    odd.sample_count
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.name() == l.name()) {
                return Err(NapError::SchemaMismatch(format!("duplicate layer `{}`", l.name())));
            }
        }
        Ok(Self { info, layers })
    }

    pub fn layers(&self) -> &[LayerData] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Result<&LayerData> {
        self.layers
            .iter()
            .find(|l| l.name() == name)
            .ok_or_else(|| NapError::LayerMissing(name.to_owned()))
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn sample_count(&self) -> usize {
        self.layers.first().map_or(0, |l| l.sample_count)
    }

    pub fn sample(&self, index: usize) -> DumpSample<'_> {
        DumpSample { dump: self, index }
    }

    /// A new dump holding the given samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            info: self.info.clone(),
            layers: self.layers.iter().map(|l| l.subset(indices)).collect(),
        }
    }

    /// Checks that `other` carries every layer of `self` with the same kind
    /// and shape.
    pub fn check_schema(&self, other: &ActivationDump) -> Result<()> {
        for l in &self.layers {
            let o = other.layer(l.name()).map_err(|_| {
                NapError::SchemaMismatch(format!(
                    "layer `{}` missing from dump `{}`",
                    l.name(),
                    other.info.dataset_id
                ))
            })?;
            if o.spec != l.spec {
                return Err(NapError::SchemaMismatch(format!(
                    "layer `{}`: {:?} {:?} vs {:?} {:?}",
                    l.name(),
                    l.spec.kind,
                    l.spec.shape,
                    o.spec.kind,
                    o.spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> DumpManifest {
        DumpManifest {
            format_version: DUMP_FORMAT_VERSION,
            model_id: self.info.model_id.clone(),
            dataset_id: self.info.dataset_id.clone(),
            split: self.info.split.clone(),
            capture: self.info.capture,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerEntry {
                    name: l.spec.name.clone(),
                    kind: l.spec.kind,
                    shape: l.spec.shape.clone(),
                    sample_count: l.sample_count,
                    data_file: data_file_name(i, &l.spec.name),
                    value_encoding: VALUE_ENCODING_F32LE.to_owned(),
                })
                .collect(),
        }
    }
}

/// One sample of a dump, viewed across all of its layers.
#[derive(Debug, Clone, Copy)]
pub struct DumpSample<'a> {
    dump: &'a ActivationDump,
    index: usize,
}

impl LayerActivations for DumpSample<'_> {
    fn layer(&self, name: &str) -> Option<&[f32]> {
        let layer = self.dump.layer(name).ok()?;
        (self.index < layer.sample_count).then(|| layer.sample(self.index))
    }
}

fn data_file_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:03}_{clean}.f32")
}

pub fn write_dump(dir: impl AsRef<Path>, dump: &ActivationDump) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = dump.manifest();
    for (entry, layer) in manifest.layers.iter().zip(&dump.layers) {
        let mut bytes = Vec::with_capacity(layer.values.len() * 4);
        for v in &layer.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&entry.data_file), bytes)?;
    }
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DumpManifest> {
    let text = fs::read(dir.as_ref().join(MANIFEST_FILE))?;
    let manifest: DumpManifest = serde_json::from_slice(&text)?;
    if manifest.format_version != DUMP_FORMAT_VERSION {
        return Err(NapError::UnsupportedVersion {
            found: manifest.format_version,
            supported: DUMP_FORMAT_VERSION,
        });
    }
    Ok(manifest)
}

pub fn read_dump(dir: impl AsRef<Path>) -> Result<ActivationDump> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        if entry.value_encoding != VALUE_ENCODING_F32LE {
            return Err(NapError::Corrupt(format!(
                "layer `{}`: unsupported value encoding `{}`",
                entry.name, entry.value_encoding
            )));
        }
        let spec = entry.spec();
        spec.validate()?;
        let bytes = fs::read(dir.join(&entry.data_file))?;
        let record = (spec.element_count() * 4) as u64;
        let found = bytes.len() as u64;
        if found % record != 0 {
            return Err(NapError::DumpTruncated {
                layer: entry.name.clone(),
                found,
                record,
            });
        }
        let expected = record * entry.sample_count as u64;
        if found != expected {
            return Err(NapError::DumpSizeMismatch {
                layer: entry.name.clone(),
                expected,
                found,
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        layers.push(LayerData::new(spec, entry.sample_count, values)?);
    }
    ActivationDump::new(
        DumpInfo {
            model_id: manifest.model_id,
            dataset_id: manifest.dataset_id,
            split: manifest.split,
            capture: manifest.capture,
        },
        layers,
    )
}
