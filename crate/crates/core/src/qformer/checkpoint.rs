//! Parameter checkpoints.
//!
//! Two layouts, both keyed by the dotted tensor names from
//! [`NamedTensors`]:
//!
//! * JSON: `{"format": "malmm-checkpoint-v1", "tensors": [{"name", "shape", "data"}]}`
//! * blob + manifest: a raw little-endian `f64` blob, and a JSON manifest
//!   `{"format", "tensors": [{"name", "shape", "offset", "len"}]}` where
//!   `offset`/`len` count `f64` elements.
//!
//! Loading always goes into an existing parameter set, whose shapes (derived
//! from the config) are the ones validated against.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NamedTensors;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "malmm-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct JsonCheckpoint {
    format: String,
    tensors: Vec<JsonTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

fn assign<P: NamedTensors<Tensor>>(
    params: &mut P,
    mut lookup: impl FnMut(&str) -> Option<(Vec<usize>, Vec<f64>)>,
) -> Result<()> {
    let mut failure = None;
    params.visit_mut("", &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match lookup(&name) {
            None => failure = Some(format!("missing tensor `{name}`")),
            Some((shape, _)) if shape != t.shape() => {
                failure = Some(format!("`{name}` has shape {shape:?}, config expects {:?}", t.shape()))
            }
            Some((shape, data)) => match Tensor::new(shape, data) {
                Ok(v) => *t = v,
                Err(e) => failure = Some(format!("`{name}`: {e}")),
            },
        }
    });
    match failure {
        Some(msg) => Err(Error::Checkpoint(msg)),
        None => Ok(()),
    }
}

fn check_names<P: NamedTensors<Tensor>>(params: &P, names: impl Iterator<Item = String>) -> Result<()> {
    let expected: std::collections::HashSet<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for n in names {
        if !expected.contains(&n) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{n}`")));
        }
    }
    Ok(())
}

pub fn to_json<P: NamedTensors<Tensor>>(params: &P) -> Result<String> {
    let ck = JsonCheckpoint {
        format: FORMAT.into(),
        tensors: params
            .named()
            .into_iter()
            .map(|(name, t)| JsonTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&ck)?)
}

pub fn from_json<P: NamedTensors<Tensor>>(params: &mut P, json: &str) -> Result<()> {
    let ck: JsonCheckpoint = serde_json::from_str(json)?;
    if ck.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
    }
    check_names(params, ck.tensors.iter().map(|t| t.name.clone()))?;
    let mut by_name: std::collections::HashMap<String, JsonTensor> =
        ck.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
    assign(params, |name| by_name.remove(name).map(|t| (t.shape, t.data)))
}

pub fn save_json<P: NamedTensors<Tensor>>(params: &P, path: &Path) -> Result<()> {
    fs::write(path, to_json(params)?)?;
    Ok(())
}

pub fn load_json<P: NamedTensors<Tensor>>(params: &mut P, path: &Path) -> Result<()> {
    from_json(params, &fs::read_to_string(path)?)
}

/// Writes `blob_path` (raw LE f64) and `manifest_path` (JSON).
pub fn save_blob<P: NamedTensors<Tensor>>(params: &P, blob_path: &Path, manifest_path: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in params.named() {
        for x in t.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    fs::write(blob_path, blob)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        tensors,
    };
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_blob<P: NamedTensors<Tensor>>(params: &mut P, blob_path: &Path, manifest_path: &Path) -> Result<()> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", manifest.format)));
    }
    check_names(params, manifest.tensors.iter().map(|t| t.name.clone()))?;
    let blob = fs::read(blob_path)?;
    let floats = blob.len() / 8;
    if blob.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("blob length {} is not a multiple of 8", blob.len())));
    }
    let mut entries: std::collections::HashMap<String, ManifestEntry> =
        manifest.tensors.into_iter().map(|e| (e.name.clone(), e)).collect();
    let mut err = None;
    let result = assign(params, |name| {
        let e = entries.remove(name)?;
        if e.offset + e.len > floats {
            err = Some(format!(
                "`{name}` spans floats {}..{} but blob holds {floats}",
                e.offset,
                e.offset + e.len
            ));
            return None;
        }
        let data = blob[e.offset * 8..(e.offset + e.len) * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        Some((e.shape, data))
    });
    if let Some(msg) = err {
        return Err(Error::Checkpoint(msg));
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qformer::{QFormerConfig, QFormerParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(seed: u64, cfg: &QFormerConfig) -> QFormerParams {
        QFormerParams::init(&mut ChaCha8Rng::seed_from_u64(seed), cfg)
    }

    #[test]
    fn json_round_trip_is_exact() {
        let cfg = QFormerConfig::default();
        let a = params(1, &cfg);
        let mut b = params(2, &cfg);
        from_json(&mut b, &to_json(&a).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blob_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = QFormerConfig::default();
        let a = params(1, &cfg);
        let mut b = params(2, &cfg);
        let (blob, man) = (dir.path().join("p.bin"), dir.path().join("p.json"));
        save_blob(&a, &blob, &man).unwrap();
        load_blob(&mut b, &blob, &man).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_against_config_is_rejected() {
        let small = QFormerConfig {
            num_queries: 4,
            ..QFormerConfig::default()
        };
        let json = to_json(&params(1, &small)).unwrap();
        let mut target = params(2, &QFormerConfig::default());
        let err = from_json(&mut target, &json).unwrap_err().to_string();
        assert!(err.contains("queries"), "{err}");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = QFormerConfig::default();
        let (blob, man) = (dir.path().join("p.bin"), dir.path().join("p.json"));
        save_blob(&params(1, &cfg), &blob, &man).unwrap();
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load_blob(&mut params(2, &cfg), &blob, &man).is_err());
    }
}
