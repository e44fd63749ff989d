//! `CXRM01` model bundle files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CXRM01"
//! u32 model count
//! per model:  u8 abnormality tag, f64 threshold, u32 layer count
//!   per layer: u8 kind
//!     per parameter tensor: u32 rank, rank × u32 extents, f32 payload
//! u32 trailer length, trailer bytes (JSON: model metadata + master text)
//! ```
//!
//! The trailer is optional on load. Parameters are stored as f32, so a loaded
//! network equals `Network::quantized` of the saved one.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Abnormality, TrainConfig, TrainedModel};
use crate::neuralnet::{Layer, LayerKind, Network, Tensor, INPUT_SHAPE};
use crate::reportgen::{MasterText, ReportError};

pub const MAGIC: &[u8; 6] = b"CXRM01";
pub const FORMAT_VERSION: &str = "01";

const MAX_RANK: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BundleError {
    #[error("not a model bundle (bad magic)")]
    BadMagic,
    #[error("bundle format version {found:?} is not supported (expected {FORMAT_VERSION:?})")]
    VersionMismatch { found: String },
    #[error("bundle file is truncated")]
    TruncatedFile,
    #[error("corrupt bundle: {0}")]
    Corrupt(String),
    #[error("bundle io: {0}")]
    Io(String),
    #[error("bundle master text: {0}")]
    MasterText(#[from] ReportError),
}

/// One trained model per abnormality plus the master text.
///
/// A bundle may hold fewer than three models while it is being assembled;
/// inference requires all three.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    models: Vec<TrainedModel>,
    pub master_text: MasterText,
    pub format_version: String,
}

impl Default for ModelBundle {
    fn default() -> Self {
        ModelBundle::new(MasterText::default())
    }
}

impl ModelBundle {
    pub fn new(master_text: MasterText) -> Self {
        ModelBundle {
            models: Vec::new(),
            master_text,
            format_version: FORMAT_VERSION.to_string(),
        }
    }

    pub fn from_models(models: impl IntoIterator<Item = TrainedModel>, master_text: MasterText) -> Self {
        let mut b = ModelBundle::new(master_text);
        for m in models {
            b.insert(m);
        }
        b
    }

    /// Adds `model`, replacing any model for the same abnormality.
    pub fn insert(&mut self, model: TrainedModel) -> Option<TrainedModel> {
        let old = self.models.iter().position(|m| m.abnormality == model.abnormality).map(|i| self.models.remove(i));
        self.models.push(model);
        self.models.sort_by_key(|m| m.abnormality.index());
        old
    }

    pub fn model(&self, abnormality: Abnormality) -> Option<&TrainedModel> {
        self.models.iter().find(|m| m.abnormality == abnormality)
    }

    /// Models in abnormality order.
    pub fn models(&self) -> &[TrainedModel] {
        &self.models
    }

    pub fn missing(&self) -> Vec<Abnormality> {
        Abnormality::ALL.into_iter().filter(|a| self.model(*a).is_none()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.missing().is_empty()
    }

    /// Every network rounded through f32, i.e. what a save/load yields.
    pub fn quantized(&self) -> ModelBundle {
        let mut b = self.clone();
        for m in &mut b.models {
            m.network = m.network.quantized();
        }
        b
    }
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    models: Vec<TrailerModel>,
    master_text: String,
}

#[derive(Serialize, Deserialize)]
struct TrailerModel {
    abnormality: Abnormality,
    train_accuracy: f64,
    test_accuracy: f64,
    config: Option<TrainConfig>,
}

pub fn encode_bundle(bundle: &ModelBundle) -> Vec<u8> {
    let mut out = encode_models(bundle);
    let json = trailer_json(bundle);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out
}

fn encode_models(bundle: &ModelBundle) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(bundle.models.len() as u32).to_le_bytes());
    for m in &bundle.models {
        out.push(m.abnormality.index() as u8);
        out.extend_from_slice(&m.threshold.to_le_bytes());
        let layers = m.network.layers();
        out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
        for layer in layers {
            out.push(layer.kind().code());
            for t in layer.params() {
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

fn trailer_json(bundle: &ModelBundle) -> Vec<u8> {
    let trailer = Trailer {
        models: bundle
            .models
            .iter()
            .map(|m| TrailerModel {
                abnormality: m.abnormality,
                train_accuracy: m.train_accuracy,
                test_accuracy: m.test_accuracy,
                config: m.config,
            })
            .collect(),
        master_text: bundle.master_text.to_document(),
    };
    serde_json::to_vec(&trailer).expect("trailer serializes")
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        let end = self.pos.checked_add(n).ok_or(BundleError::TruncatedFile)?;
        let s = self.buf.get(self.pos..end).ok_or(BundleError::TruncatedFile)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BundleError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, BundleError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_tensor(c: &mut Cursor<'_>) -> Result<Tensor, BundleError> {
    let rank = c.u32()?;
    if rank == 0 || rank > MAX_RANK {
        return Err(BundleError::Corrupt(format!("tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut len: usize = 1;
    for _ in 0..rank {
        let d = c.u32()? as usize;
        len = len.checked_mul(d).ok_or_else(|| BundleError::Corrupt("tensor too large".into()))?;
        shape.push(d);
    }
    if len.saturating_mul(4) > c.remaining() {
        return Err(BundleError::TruncatedFile);
    }
    let data = c
        .take(len * 4)?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| BundleError::Corrupt(e.to_string()))
}

pub fn decode_bundle(bytes: &[u8]) -> Result<ModelBundle, BundleError> {
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) && !bytes.is_empty() {
            BundleError::TruncatedFile
        } else {
            BundleError::BadMagic
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        if bytes.starts_with(b"CXRM") {
            return Err(BundleError::VersionMismatch {
                found: String::from_utf8_lossy(&bytes[4..6]).into_owned(),
            });
        }
        return Err(BundleError::BadMagic);
    }
    let mut c = Cursor {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let count = c.u32()?;
    let mut models = Vec::new();
    for _ in 0..count {
        let tag = c.u8()?;
        let abnormality = Abnormality::from_index(tag as usize)
            .ok_or_else(|| BundleError::Corrupt(format!("abnormality tag {tag}")))?;
        if models.iter().any(|m: &TrainedModel| m.abnormality == abnormality) {
            return Err(BundleError::Corrupt(format!("two models for {abnormality}")));
        }
        let threshold = c.f64()?;
        if !(0.0..=1.0).contains(&threshold) {
            return Err(BundleError::Corrupt(format!("threshold {threshold}")));
        }
        let n_layers = c.u32()?;
        let mut layers = Vec::new();
        for _ in 0..n_layers {
            let code = c.u8()?;
            let kind = LayerKind::from_code(code).ok_or_else(|| BundleError::Corrupt(format!("layer kind {code}")))?;
            let params = (0..kind.param_count()).map(|_| read_tensor(&mut c)).collect::<Result<Vec<_>, _>>()?;
            layers.push(Layer::from_parts(kind, params).map_err(|e| BundleError::Corrupt(e.to_string()))?);
        }
        let network = Network::new(layers, INPUT_SHAPE.to_vec()).map_err(|e| BundleError::Corrupt(e.to_string()))?;
        let mut model = TrainedModel::from_network(abnormality, network);
        model.threshold = threshold;
        models.push(model);
    }

    let mut master_text = MasterText::default();
    if c.remaining() > 0 {
        let len = c.u32()? as usize;
        let json = c.take(len)?;
        let trailer: Trailer =
            serde_json::from_slice(json).map_err(|e| BundleError::Corrupt(format!("trailer: {e}")))?;
        master_text = MasterText::parse(&trailer.master_text)?;
        for t in trailer.models {
            if let Some(m) = models.iter_mut().find(|m| m.abnormality == t.abnormality) {
                m.train_accuracy = t.train_accuracy;
                m.test_accuracy = t.test_accuracy;
                m.config = t.config;
            }
        }
        if c.remaining() > 0 {
            return Err(BundleError::Corrupt(format!("{} trailing bytes", c.remaining())));
        }
    }
    Ok(ModelBundle::from_models(models, master_text))
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<(), BundleError> {
    std::fs::write(path, encode_bundle(bundle)).map_err(|e| BundleError::Io(format!("{}: {e}", path.display())))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, BundleError> {
    let bytes = std::fs::read(path).map_err(|e| BundleError::Io(format!("{}: {e}", path.display())))?;
    decode_bundle(&bytes)
}
