//! Portable checkpoint files.
//!
//! A checkpoint is a JSON document:
//!
//! ```text
//! {
//!   "version": 1,
//!   "architecture": [16, 64, 32],
//!   "feature_dim": 32,
//!   "num_classes": 5,            // null when no head is stored
//!   "arrays": [
//!     {"name": "encoder.0.weight", "shape": [64, 16], "data": [...]},
//!     {"name": "encoder.0.bias", "shape": [64], "data": [...]},
//!     ...
//!     {"name": "head.weight", "shape": [5, 32], "data": [...]},
//!     {"name": "head.bias", "shape": [5], "data": [...]}
//!   ]
//! }
//! ```
//!
//! Floats are written in the shortest decimal form that parses back to the
//! same bits, so a load reproduces the saved parameters exactly and
//! save → load → save is byte-stable.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderParams, HeadParams, LinearLayer};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderParams,
    pub head: Option<HeadParams>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    version: u64,
    architecture: Vec<usize>,
    feature_dim: usize,
    num_classes: Option<usize>,
    arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedArray {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn named(name: String, t: &Tensor) -> NamedArray {
    NamedArray {
        name,
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

fn expected_names(num_layers: usize, with_head: bool) -> Vec<String> {
    let mut names: Vec<String> = (0..num_layers)
        .flat_map(|i| [format!("encoder.{i}.weight"), format!("encoder.{i}.bias")])
        .collect();
    if with_head {
        names.push("head.weight".to_string());
        names.push("head.bias".to_string());
    }
    names
}

impl Checkpoint {
    pub fn new(encoder: EncoderParams, head: Option<HeadParams>) -> Result<Self> {
        if let Some(h) = &head {
            if h.feature_dim() != encoder.feature_dim() {
                return Err(Error::Consistency(format!(
                    "head expects {} features, encoder emits {}",
                    h.feature_dim(),
                    encoder.feature_dim()
                )));
            }
        }
        Ok(Self { encoder, head })
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.encoder.is_finite() || self.head.as_ref().is_some_and(|h| !h.is_finite()) {
            return Err(Error::param("refusing to save non-finite parameters"));
        }
        let mut arrays = Vec::new();
        for (i, layer) in self.encoder.layers().iter().enumerate() {
            arrays.push(named(format!("encoder.{i}.weight"), &layer.weight));
            arrays.push(named(format!("encoder.{i}.bias"), &layer.bias));
        }
        if let Some(head) = &self.head {
            arrays.push(named("head.weight".to_string(), &head.layer.weight));
            arrays.push(named("head.bias".to_string(), &head.layer.bias));
        }
        let doc = Document {
            version: CHECKPOINT_VERSION,
            architecture: self.encoder.dims(),
            feature_dim: self.encoder.feature_dim(),
            num_classes: self.head.as_ref().map(HeadParams::num_classes),
            arrays,
        };
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format {
            offset: None,
            field: None,
            message: e.to_string(),
        })?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Format {
            offset: Some(byte_offset(text, e.line(), e.column())),
            field: None,
            message: e.to_string(),
        })?;
        let version = value
            .get("version")
            .ok_or_else(|| Error::field("version", "missing"))?
            .as_u64()
            .ok_or_else(|| Error::field("version", "not an unsigned integer"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let doc: Document = serde_json::from_value(value).map_err(|e| Error::Format {
            offset: None,
            field: None,
            message: e.to_string(),
        })?;
        doc.into_checkpoint()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
            offset: Some(e.valid_up_to()),
            field: None,
            message: "checkpoint is not valid UTF-8".to_string(),
        })?;
        Self::from_json(text)
    }
}

impl Document {
    fn into_checkpoint(self) -> Result<Checkpoint> {
        let dims = &self.architecture;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::field(
                "architecture",
                format!("need at least two positive widths, got {dims:?}"),
            ));
        }
        if dims[dims.len() - 1] != self.feature_dim {
            return Err(Error::field(
                "feature_dim",
                format!(
                    "{} does not match last architecture width {}",
                    self.feature_dim,
                    dims[dims.len() - 1]
                ),
            ));
        }
        let num_layers = dims.len() - 1;
        let names = expected_names(num_layers, self.num_classes.is_some());
        if self.arrays.len() != names.len() {
            return Err(Error::field(
                "arrays",
                format!(
                    "expected {} arrays, found {}",
                    names.len(),
                    self.arrays.len()
                ),
            ));
        }

        let mut shapes: Vec<Vec<usize>> = dims
            .windows(2)
            .flat_map(|w| [vec![w[1], w[0]], vec![w[1]]])
            .collect();
        if let Some(k) = self.num_classes {
            shapes.push(vec![k, self.feature_dim]);
            shapes.push(vec![k]);
        }

        let mut tensors = Vec::with_capacity(names.len());
        for ((array, name), shape) in self.arrays.into_iter().zip(&names).zip(&shapes) {
            if &array.name != name {
                return Err(Error::field(
                    format!("arrays.{name}"),
                    format!("found array named {:?}", array.name),
                ));
            }
            if &array.shape != shape {
                return Err(Error::field(
                    name.clone(),
                    format!(
                        "declared shape {:?}, architecture implies {shape:?}",
                        array.shape
                    ),
                ));
            }
            let expected: usize = shape.iter().product();
            if array.data.len() != expected {
                return Err(Error::field(
                    name.clone(),
                    format!(
                        "declared shape {:?} needs {expected} values, found {}",
                        array.shape,
                        array.data.len()
                    ),
                ));
            }
            tensors.push(Tensor::new(array.shape, array.data)?);
        }

        let mut it = tensors.into_iter();
        let mut pair = |what: &str| -> Result<LinearLayer> {
            let weight = it.next().expect("counted above");
            let bias = it.next().expect("counted above");
            LinearLayer::new(weight, bias).map_err(|e| Error::field(what, e.to_string()))
        };
        let layers = (0..num_layers)
            .map(|i| pair(&format!("encoder.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let head = match self.num_classes {
            Some(_) => Some(
                HeadParams::new(pair("head")?)
                    .map_err(|e| Error::field("num_classes", e.to_string()))?,
            ),
            None => None,
        };
        Checkpoint::new(EncoderParams::new(layers)?, head)
    }
}

/// Byte offset of a 1-based (line, column) position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn save_checkpoint(
    path: &Path,
    encoder: &EncoderParams,
    head: Option<&HeadParams>,
) -> Result<()> {
    Checkpoint::new(encoder.clone(), head.cloned())?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
