//! Single-file checkpoints: magic, format version, JSON header, little-endian
//! `f32` tensor blobs, and a CRC-32 trailer over everything before it.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureStats};
use crate::lid::HeadSpec;
use crate::model::{ModelConfig, ParamStore};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"W2VLIDCK";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Integrity(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Language-ID head metadata carried by fine-tuned checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidMeta {
    pub languages: Vec<String>,
    pub head: HeadSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub feature_stats: Option<FeatureStats>,
    /// Updates completed.
    pub step: usize,
    pub rng: Option<RngState>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub lid: Option<LidMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    features: FeatureConfig,
    feature_stats: Option<FeatureStats>,
    step: usize,
    rng: Option<RngState>,
    optimizer_step: Option<usize>,
    lid: Option<LidMeta>,
    tensors: Vec<TensorEntry>,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

impl Checkpoint {
    pub fn new(model: ModelConfig, features: FeatureConfig, params: ParamStore<f32>) -> Self {
        Self { model, features, feature_stats: None, step: 0, rng: None, params, optimizer: None, lid: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(n, t)| (format!("{PARAM}{n}"), t)).collect();
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.m.iter().map(|(n, t)| (format!("{MOMENT1}{n}"), t)));
            tensors.extend(opt.v.iter().map(|(n, t)| (format!("{MOMENT2}{n}"), t)));
        }
        let header = Header {
            model: self.model.clone(),
            features: self.features.clone(),
            feature_stats: self.feature_stats.clone(),
            step: self.step,
            rng: self.rng.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            lid: self.lid.clone(),
            tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 24 + 4 * tensors.iter().map(|(_, t)| t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let min = MAGIC.len() + 4 + 8 + 4;
        if bytes.len() < min {
            return Err(Error::Integrity(format!("file is {} bytes, shorter than the {min}-byte minimum", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Integrity("checksum mismatch (file truncated or corrupted)".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::FormatVersion { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let json = body.get(20..20usize.saturating_add(header_len)).ok_or_else(|| Error::Integrity("header overruns file".into()))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
        let mut blob = &body[20 + header_len..];
        let mut params = ParamStore::new();
        let mut m = std::collections::BTreeMap::new();
        let mut v = std::collections::BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if blob.len() < 4 * n {
                return Err(Error::Integrity(format!("tensor `{}` overruns file", entry.name)));
            }
            let data = blob[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            blob = &blob[4 * n..];
            let t = Tensor::new(entry.shape, data)?;
            if let Some(name) = entry.name.strip_prefix(PARAM) {
                params.insert(name, t);
            } else if let Some(name) = entry.name.strip_prefix(MOMENT1) {
                m.insert(name.to_string(), t);
            } else if let Some(name) = entry.name.strip_prefix(MOMENT2) {
                v.insert(name.to_string(), t);
            } else {
                return Err(Error::Integrity(format!("unknown tensor `{}`", entry.name)));
            }
        }
        if !blob.is_empty() {
            return Err(Error::Integrity(format!("{} unexpected trailing bytes", blob.len())));
        }
        let optimizer = header.optimizer_step.map(|step| AdamState { step, m, v });
        Ok(Self {
            model: header.model,
            features: header.features,
            feature_stats: header.feature_stats,
            step: header.step,
            rng: header.rng,
            params,
            optimizer,
            lid: header.lid,
        })
    }

    /// Writes through a temporary sibling and renames, so a crash never
    /// leaves a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and insists on the given model configuration.
    pub fn load_expecting(path: &Path, model: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_model(model)?;
        Ok(ck)
    }

    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if &self.model == model {
            return Ok(());
        }
        let ours = serde_json::to_value(&self.model)?;
        let theirs = serde_json::to_value(model)?;
        let diffs: Vec<String> = ours
            .as_object()
            .into_iter()
            .flatten()
            .filter(|(k, v)| theirs.get(k.as_str()) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint {v}, requested {}", theirs.get(k.as_str()).unwrap_or(&serde_json::Value::Null)))
            .collect();
        Err(Error::ConfigConflict(diffs.join("; ")))
    }
}
