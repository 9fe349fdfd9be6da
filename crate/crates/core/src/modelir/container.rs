use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerParams, ModelError, ModelIR, ModelWeights};
use crate::fixedpoint::QFormat;

pub const MODEL_DOC_VERSION: u32 = 1;

/// Where one layer's values live in the weight blob (in `f64` elements).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub layer: usize,
    pub offset: usize,
    pub w3: usize,
    pub b3: usize,
    pub w1: usize,
    pub b1: usize,
}

/// Per-layer formats written by the quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerQ {
    pub out: QFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qw: Option<QFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qb: Option<QFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qs: Option<QFormat>,
    #[serde(default = "eight")]
    pub param_width: u32,
}

fn eight() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantFields {
    pub input: QFormat,
    pub layers: Vec<LayerQ>,
}

/// Versioned text document describing a model; weights live in a sibling
/// little-endian `f64` blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub version: u32,
    pub name: String,
    pub model: ModelIR,
    pub blob: String,
    pub weights: Vec<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantFields>,
}

fn blob_path(doc_path: &Path) -> PathBuf {
    doc_path.with_extension("weights")
}

fn io(e: impl std::fmt::Display) -> ModelError {
    ModelError::Container(e.to_string())
}

/// Writes `<path>` (JSON) and the weights beside it, with extension `.weights`.
pub fn save_model(
    path: &Path,
    m: &ModelIR,
    weights: &ModelWeights,
    quant: Option<&QuantFields>,
) -> Result<(), ModelError> {
    weights.check(m)?;
    let mut blob = Vec::new();
    let mut refs = Vec::new();
    let mut offset = 0;
    for (layer, p) in weights.layers.iter().enumerate() {
        let Some(p) = p else { continue };
        refs.push(BlobRef { layer, offset, w3: p.w3.len(), b3: p.b3.len(), w1: p.w1.len(), b1: p.b1.len() });
        for v in p.flatten() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.len();
    }
    let bin = blob_path(path);
    let doc = ModelDocument {
        version: MODEL_DOC_VERSION,
        name: m.name(),
        model: m.clone(),
        blob: bin.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        weights: refs,
        quant: quant.cloned(),
    };
    fs::write(&bin, blob).map_err(io)?;
    fs::write(path, serde_json::to_string_pretty(&doc).map_err(io)?).map_err(io)
}

/// Reads a document written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(ModelDocument, ModelWeights), ModelError> {
    let text = fs::read_to_string(path).map_err(io)?;
    let doc: ModelDocument = serde_json::from_str(&text).map_err(io)?;
    if doc.version != MODEL_DOC_VERSION {
        return Err(ModelError::Container(format!("unsupported document version {}", doc.version)));
    }
    doc.model.validate()?;
    let bin = path.with_file_name(&doc.blob);
    let bytes = fs::read(&bin).map_err(io)?;
    if bytes.len() % 8 != 0 {
        return Err(ModelError::Container("weight blob length is not a multiple of 8".into()));
    }
    let values: Vec<f64> =
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();

    let mut weights = ModelWeights { layers: vec![None; doc.model.layers.len()] };
    for r in &doc.weights {
        let end = r.offset + r.w3 + r.b3 + r.w1 + r.b1;
        if end > values.len() || r.layer >= weights.layers.len() {
            return Err(ModelError::Container(format!("layer {} points outside the weight blob", r.layer)));
        }
        let mut at = r.offset;
        let mut take = |n: usize| {
            let v = values[at..at + n].to_vec();
            at += n;
            v
        };
        weights.layers[r.layer] = Some(LayerParams { w3: take(r.w3), b3: take(r.b3), w1: take(r.w1), b1: take(r.b1) });
    }
    weights.check(&doc.model)?;
    if let Some(q) = &doc.quant {
        if q.layers.len() != doc.model.layers.len() {
            return Err(ModelError::Container("quantizer fields do not cover every layer".into()));
        }
    }
    Ok((doc, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelir::{build_ernet, Family};

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("ecnnkit-doc-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dn.json");
        let m = build_ernet(Family::Dn, 2, 1, 1, 32).unwrap();
        let w = ModelWeights::random(&m, 11);
        let q = QuantFields {
            input: QFormat::unsigned(8),
            layers: m
                .layers
                .iter()
                .map(|_| LayerQ { out: QFormat::signed(5), qw: None, qb: None, qs: None, param_width: 8 })
                .collect(),
        };
        save_model(&path, &m, &w, Some(&q)).unwrap();
        let (doc, back) = load_model(&path).unwrap();
        assert_eq!(doc.model, m);
        assert_eq!(back, w);
        assert_eq!(doc.quant, Some(q));
        assert_eq!(doc.name, "DnERNet-B2R1N1");

        fs::write(dir.join("dn.weights"), [0u8; 12]).unwrap();
        assert!(load_model(&path).is_err());
        fs::remove_dir_all(dir).ok();
    }
}
