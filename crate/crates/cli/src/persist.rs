//! On-disk formats for models and cluster assignments.
//!
//! Models are versioned JSON: layer shapes plus base64 blobs of
//! little-endian `f64` values, row-major.

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use tofu_core::numerics::{Activation, Dense, ModelParams};
use tofu_core::target::ClusterAssignment;

use crate::error::{CliError, Result};

pub const MODEL_FORMAT: &str = "tofu-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub input: usize,
    pub output: usize,
    pub weight: String,
    pub bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub layers: Vec<LayerFile>,
}

fn encode_f64s<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64s(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = B64.decode(text).map_err(|e| malformed(e.to_string()))?;
    if bytes.len() != expected * 8 {
        return Err(malformed(format!("blob holds {} bytes, expected {}", bytes.len(), expected * 8)));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn malformed(detail: String) -> CliError {
    CliError::Malformed {
        what: "model file".into(),
        detail,
    }
}

impl ModelFile {
    pub fn from_params(p: &ModelParams) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            activation: p.activation,
            dropout_rate: p.dropout_rate,
            weight_decay: p.weight_decay,
            layers: p
                .layers
                .iter()
                .map(|l| LayerFile {
                    input: l.input_dim(),
                    output: l.output_dim(),
                    weight: encode_f64s(l.weight.iter()),
                    bias: encode_f64s(l.bias.iter()),
                })
                .collect(),
        }
    }

    pub fn to_params(&self) -> Result<ModelParams> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(malformed(format!("unsupported format {} v{}", self.format, self.version)));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = decode_f64s(&l.weight, l.input * l.output)?;
            let b = decode_f64s(&l.bias, l.output)?;
            layers.push(Dense {
                weight: Array2::from_shape_vec((l.input, l.output), w).map_err(|e| malformed(e.to_string()))?,
                bias: Array1::from(b),
            });
        }
        let p = ModelParams {
            layers,
            activation: self.activation,
            dropout_rate: self.dropout_rate,
            weight_decay: self.weight_decay,
        };
        p.validate()?;
        Ok(p)
    }
}

/// `{label: {cluster_id: [example indices]}}`.
pub type ClusterFile = BTreeMap<usize, BTreeMap<usize, Vec<usize>>>;

pub fn cluster_file(a: &ClusterAssignment) -> ClusterFile {
    a.per_label
        .iter()
        .map(|(&y, lc)| {
            let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (&i, &k) in lc.indices.iter().zip(&lc.assignment) {
                by_cluster.entry(k).or_default().push(i);
            }
            (y, by_cluster)
        })
        .collect()
}
