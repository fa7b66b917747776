//! Model and report serialization.
//!
//! Models are a single JSON interchange format:
//! `{"layers": [{"weights": [[...]], "bias": [...], "activation": "..."}], "meta": {...}}`.
//! Floats are written in shortest round-trip decimal form, so
//! `read(write(net))` reproduces the weights bit-exactly.

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::network::{Activation, Layer, Network};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerJson {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    activation: Activation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    layers: Vec<LayerJson>,
    #[serde(default)]
    pub meta: serde_json::Map<String, Value>,
}

impl ModelFile {
    pub fn from_network(net: &Network) -> Self {
        ModelFile {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerJson {
                    weights: l.weights.to_rows(),
                    bias: l.bias.clone(),
                    activation: l.activation,
                })
                .collect(),
            meta: serde_json::Map::new(),
        }
    }

    pub fn into_network(self) -> Result<Network> {
        let layers = self
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let w = Matrix::from_rows(&l.weights).map_err(|e| {
                    Error::Schema(format!("layer {i} weights: {e}"))
                })?;
                Layer::new(w, l.bias, l.activation)
                    .map_err(|e| Error::Schema(format!("layer {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Network::new(layers).map_err(|e| Error::Schema(format!("network: {e}")))
    }
}

pub fn write_model(path: &Path, net: &Network, meta: serde_json::Map<String, Value>) -> Result<()> {
    let mut file = ModelFile::from_network(net);
    file.meta = meta;
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<Network> {
    let text = std::fs::read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    file.into_network()
}

/// Machine-readable run report: command echo, configuration, results, and
/// provenance. Re-running the echoed config reproduces the numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub config: Value,
    pub results: Value,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub version: String,
    pub timestamp_unix: u64,
    pub threads: usize,
}

impl Report {
    pub fn new(command: impl Into<String>, config: Value, results: Value, seed: Option<u64>, threads: usize) -> Self {
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            command: command.into(),
            config,
            results,
            provenance: Provenance {
                seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                timestamp_unix: std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
                threads,
            },
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
