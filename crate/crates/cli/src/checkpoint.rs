//! Checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! b"AVFCKPT1"          8-byte magic
//! u64                  byte length of the JSON index
//! JSON index           {"version", "model", "tensors": {name: {shape, offset}}}
//! f64 data             tensor payloads; `offset` counts bytes from here
//! ```
//!
//! The model's parameters and running statistics are stored under their
//! parameter names. Feature standardization statistics, when present, are
//! stored as `standardizer.{audio,vision}_{mean,std}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use avfusion_core::data::Standardizer;
use avfusion_core::fusion::{FusionKind, Model, ModelConfig};
use avfusion_core::Tensor;

use crate::dataset::TaskSpec;
use crate::error::{CliError, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"AVFCKPT1";
pub const VERSION: u32 = 1;
const STD_PREFIX: &str = "standardizer.";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub audio_dim: usize,
    pub vision_dim: usize,
    pub fusion: String,
    pub heads: usize,
    pub latent_dim: usize,
    pub ff_hidden: usize,
    pub task: TaskSpec,
    pub qkv_bias: bool,
}

impl From<&ModelConfig> for ModelMeta {
    fn from(c: &ModelConfig) -> Self {
        ModelMeta {
            audio_dim: c.audio_dim,
            vision_dim: c.vision_dim,
            fusion: c.fusion.code().to_string(),
            heads: c.heads,
            latent_dim: c.latent_dim,
            ff_hidden: c.ff_hidden,
            task: c.task.into(),
            qkv_bias: c.qkv_bias,
        }
    }
}

impl ModelMeta {
    fn to_config(&self) -> Option<ModelConfig> {
        Some(ModelConfig {
            audio_dim: self.audio_dim,
            vision_dim: self.vision_dim,
            fusion: FusionKind::parse(&self.fusion)?,
            heads: self.heads,
            latent_dim: self.latent_dim,
            ff_hidden: self.ff_hidden,
            task: self.task.clone().into(),
            qkv_bias: self.qkv_bias,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    version: u32,
    model: ModelMeta,
    tensors: BTreeMap<String, TensorEntry>,
}

/// A trained model together with the feature statistics it was trained on.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub standardizer: Option<Standardizer>,
}

fn standardizer_tensors(s: &Standardizer) -> [(&'static str, &[f64]); 4] {
    [
        ("audio_mean", &s.audio_mean),
        ("audio_std", &s.audio_std),
        ("vision_mean", &s.vision_mean),
        ("vision_std", &s.vision_std),
    ]
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut named: Vec<(String, Tensor)> = ck
        .model
        .params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect();
    if let Some(s) = &ck.standardizer {
        for (name, v) in standardizer_tensors(s) {
            named.push((format!("{STD_PREFIX}{name}"), Tensor::vector(v)));
        }
    }
    let mut tensors = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in &named {
        tensors.insert(
            name.clone(),
            TensorEntry {
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            },
        );
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = Index {
        version: VERSION,
        model: ModelMeta::from(&ck.model.config),
        tensors,
    };
    let json = serde_json::to_vec(&index).expect("index serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: String| CliError::format(path, msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| bad("truncated index".into()))?;
    let index: Index = serde_json::from_slice(json).map_err(|e| bad(format!("index: {e}")))?;
    if index.version != VERSION {
        return Err(bad(format!("unsupported version {}", index.version)));
    }
    let payload = &bytes[16 + len..];
    let config = index
        .model
        .to_config()
        .ok_or_else(|| bad(format!("unknown fusion kind `{}`", index.model.fusion)))?;
    let mut model = Model::new(config, 0)?;

    let read = |name: &str, e: &TensorEntry| -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = n.checked_mul(8).and_then(|b| b.checked_add(start));
        let raw = end
            .and_then(|end| payload.get(start..end))
            .ok_or_else(|| bad(format!("tensor `{name}` runs past the end of the file")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(e.shape.clone(), data)?)
    };

    let expected: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
    for name in &expected {
        let e = index
            .tensors
            .get(name)
            .ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
        let t = read(name, e)?;
        model.params.set(name, t).map_err(|err| bad(format!("tensor `{name}`: {err}")))?;
    }

    let mut std_parts = BTreeMap::new();
    for (name, e) in &index.tensors {
        if let Some(part) = name.strip_prefix(STD_PREFIX) {
            std_parts.insert(part.to_string(), read(name, e)?.into_data());
        } else if !expected.contains(name) {
            return Err(bad(format!("unexpected tensor `{name}`")));
        }
    }
    let standardizer = if std_parts.is_empty() {
        None
    } else {
        let mut take = |k: &str| {
            std_parts
                .remove(k)
                .ok_or_else(|| bad(format!("missing tensor `{STD_PREFIX}{k}`")))
        };
        let s = Standardizer {
            audio_mean: take("audio_mean")?,
            audio_std: take("audio_std")?,
            vision_mean: take("vision_mean")?,
            vision_std: take("vision_std")?,
        };
        if let Some(k) = std_parts.keys().next() {
            return Err(bad(format!("unexpected tensor `{STD_PREFIX}{k}`")));
        }
        Some(s)
    };
    Ok(Checkpoint { model, standardizer })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(ck)).at(path)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).at(path)?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use avfusion_core::fusion::Task;

    fn small(kind: FusionKind) -> Checkpoint {
        let cfg = ModelConfig {
            audio_dim: 3,
            vision_dim: 4,
            fusion: kind,
            heads: 2,
            task: Task::Classification { classes: 3 },
            ..ModelConfig::default()
        };
        Checkpoint {
            model: Model::new(cfg, 11).unwrap(),
            standardizer: Some(Standardizer {
                audio_mean: vec![0.5, -1.0, 2.0],
                audio_std: vec![1.0, 1e-8, 3.0],
                vision_mean: vec![0.0; 4],
                vision_std: vec![1.0; 4],
            }),
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        for kind in FusionKind::ALL {
            let ck = small(kind);
            let back = from_bytes(&to_bytes(&ck), Path::new("ck")).unwrap();
            assert_eq!(back.model.config, ck.model.config);
            let params = |m: &Model| m.params.iter().map(|(_, p)| p.clone()).collect::<Vec<_>>();
            assert_eq!(params(&back.model), params(&ck.model));
            assert_eq!(back.standardizer, ck.standardizer);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&small(FusionKind::IntermediateAttention));
        assert_eq!(&bytes[..8], b"AVFCKPT1");
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let index: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let head_w = &index["tensors"]["head.weight"];
        let off = head_w["offset"].as_u64().unwrap() as usize + 16 + len;
        let first = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let ck = small(FusionKind::IntermediateAttention);
        let id = ck.model.params.find("head.weight").unwrap();
        assert_eq!(first.to_bits(), ck.model.params.get(id).data()[0].to_bits());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&small(FusionKind::LateTransformer));
        assert!(from_bytes(b"nope", Path::new("x")).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 8], Path::new("x")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong, Path::new("x")).is_err());
    }

    #[test]
    fn missing_and_extra_tensors_are_errors() {
        let ck = small(FusionKind::IntermediateAttention);
        let bytes = to_bytes(&ck);
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut index: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let rebuild = |index: &serde_json::Value| {
            let json = serde_json::to_vec(index).unwrap();
            let mut out = MAGIC.to_vec();
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&json);
            out.extend_from_slice(&bytes[16 + len..]);
            out
        };
        let tensors = index["tensors"].as_object_mut().unwrap();
        let entry = tensors.remove("head.bias").unwrap();
        let err = from_bytes(&rebuild(&index), Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("head.bias"), "{err}");
        let tensors = index["tensors"].as_object_mut().unwrap();
        tensors.insert("head.bias".into(), entry.clone());
        tensors.insert("stray".into(), entry);
        let err = from_bytes(&rebuild(&index), Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("stray"), "{err}");
    }
}
