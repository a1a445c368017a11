//! Binary container shared by checkpoints and dense indexes.
//!
//! Layout: the 8-byte magic `SPANLAB\0`, the manifest length as a
//! little-endian `u64`, the JSON manifest, then every tensor as row-major
//! little-endian `f32` in manifest order. Tensor offsets in the manifest
//! are element offsets into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Rng;

pub const MAGIC: &[u8; 8] = b"SPANLAB\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes a container. `tensors` are `(name, shape, data)` in payload order.
pub fn write_container(
    path: &Path,
    kind: &str,
    encoder: Option<&EncoderConfig>,
    meta: serde_json::Value,
    tensors: &[(&str, &[usize], &[f64])],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in tensors {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: vec![data.len()],
            });
        }
        entries.push(TensorEntry { name: name.to_string(), shape: shape.to_vec(), offset });
        offset += len;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        encoder: encoder.cloned(),
        tensors: entries,
        meta,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, data) in tensors {
        for &v in *data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a container, returning the manifest and one `f64` buffer per tensor.
pub fn read_container(path: &Path) -> Result<(Manifest, Vec<Vec<f64>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{} is not a spanlab container", path.display())));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 16usize
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..json_end]).map_err(|e| Error::Format(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: FORMAT_VERSION });
    }
    let payload = &bytes[json_end..];
    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 4 {
        return Err(Error::Format(format!(
            "payload holds {} bytes, manifest describes {}",
            payload.len(),
            total * 4
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let len: usize = t.shape.iter().product();
        let start = t.offset * 4;
        let end = start + len * 4;
        if end > payload.len() {
            return Err(Error::Format(format!("tensor {} runs past the payload", t.name)));
        }
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push(data);
    }
    Ok((manifest, out))
}

/// Position of a training run, stored so it can resume exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainProgress {
    pub step: usize,
    pub total_steps: usize,
    pub rng: Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    config: AdamConfig,
    step: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    progress: Option<TrainProgress>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    pub progress: Option<TrainProgress>,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self { params, optimizer: None, progress: None }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut names: Vec<String> = Vec::new();
        let mut shapes: Vec<&[usize]> = Vec::new();
        let mut datas: Vec<&[f64]> = Vec::new();
        for t in self.params.tensors() {
            names.push(t.name.clone());
            shapes.push(&t.shape);
            datas.push(&t.data);
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, store) in [(ADAM_M, &opt.m), (ADAM_V, &opt.v)] {
                for t in store.tensors() {
                    names.push(format!("{prefix}{}", t.name));
                    shapes.push(&t.shape);
                    datas.push(&t.data);
                }
            }
        }
        let tensors: Vec<(&str, &[usize], &[f64])> = names
            .iter()
            .zip(shapes)
            .zip(datas)
            .map(|((n, s), d)| (n.as_str(), s, d))
            .collect();
        let meta = CheckpointMeta {
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta { config: o.config, step: o.step }),
            progress: self.progress.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Format(e.to_string()))?;
        write_container(path, "checkpoint", Some(&self.params.config), meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, data) = read_container(path)?;
        if manifest.kind != "checkpoint" {
            return Err(Error::Format(format!("expected a checkpoint, found {:?}", manifest.kind)));
        }
        let config = manifest
            .encoder
            .clone()
            .ok_or_else(|| Error::Format("checkpoint manifest lacks an encoder config".into()))?;
        config.validate()?;
        let meta: CheckpointMeta = if manifest.meta.is_null() {
            CheckpointMeta::default()
        } else {
            serde_json::from_value(manifest.meta.clone()).map_err(|e| Error::Format(e.to_string()))?
        };

        let by_name: std::collections::HashMap<&str, (usize, &TensorEntry)> = manifest
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.as_str(), (i, t)))
            .collect();
        let fill = |store: &mut ParamStore, prefix: &str| -> Result<()> {
            for t in store.tensors_mut() {
                let key = format!("{prefix}{}", t.name);
                let (i, entry) = by_name
                    .get(key.as_str())
                    .ok_or_else(|| Error::Format(format!("missing tensor {key}")))?;
                if entry.shape != t.shape {
                    return Err(Error::ShapeMismatch {
                        name: key,
                        expected: t.shape.clone(),
                        found: entry.shape.clone(),
                    });
                }
                t.data.copy_from_slice(&data[*i]);
            }
            Ok(())
        };

        let mut params = ParamStore::zeros(&config);
        fill(&mut params, "")?;
        let optimizer = match meta.optimizer {
            Some(o) => {
                let mut st = AdamState::new(&params, o.config);
                st.step = o.step;
                fill(&mut st.m, ADAM_M)?;
                fill(&mut st.v, ADAM_V)?;
                Some(st)
            }
            None => None,
        };
        Ok(Self { params, optimizer, progress: meta.progress })
    }

    /// Loads and checks that every tensor has the shape `expected` implies.
    pub fn load_expecting(path: &Path, expected: &EncoderConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        for ((name, want), t) in ParamStore::expected_shapes(expected).into_iter().zip(ck.params.tensors()) {
            if t.shape != want {
                return Err(Error::ShapeMismatch { name, expected: want, found: t.shape.clone() });
            }
        }
        if &ck.params.config != expected {
            return Err(Error::Config(format!(
                "checkpoint encoder config {:?} differs from expected {:?}",
                ck.params.config, expected
            )));
        }
        Ok(ck)
    }
}

/// Hex SHA-256 over the encoder config and the `f32` parameter bytes.
pub fn fingerprint(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&params.config).expect("config serializes"));
    for t in params.tensors() {
        hash_tensor(&mut h, t);
    }
    hex::encode(&h.finalize()[..16])
}

fn hash_tensor(h: &mut Sha256, t: &Tensor) {
    h.update(t.name.as_bytes());
    for &v in &t.data {
        h.update((v as f32).to_le_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::forward;

    fn cfg(hidden: usize) -> EncoderConfig {
        EncoderConfig { layers: 1, heads: 2, hidden, ffn: 8, vocab_size: 12, max_len: 8, ..Default::default() }
    }

    fn trained() -> Checkpoint {
        let mut params = ParamStore::init(&cfg(4), &mut Rng::new(3)).unwrap();
        let mut st = AdamState::new(&params, AdamConfig::default());
        let mut g = params.zeros_like();
        g.token_emb.data[5] = 0.3;
        g.layers[0].wq.data[1] = -1.2;
        st.step(&mut params, &g, 0.01).unwrap();
        let progress = TrainProgress { step: 1, total_steps: 10, rng: Rng::new(9) };
        Checkpoint { params, optimizer: Some(st), progress: Some(progress) }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let ck = trained();
        ck.save(&a).unwrap();
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back, ck);
        back.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let x = forward(&ck.params, &[4, 5, 6]).unwrap();
        let y = forward(&back.params, &[4, 5, 6]).unwrap();
        assert_eq!(x.hidden(), y.hidden());
    }

    #[test]
    fn wrong_hidden_size_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        trained().save(&p).unwrap();
        match Checkpoint::load_expecting(&p, &cfg(8)) {
            Err(Error::ShapeMismatch { name, .. }) => assert_eq!(name, "embeddings.token"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        trained().save(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format(_))));

        let text = String::from_utf8_lossy(&bytes).replace("\"format_version\":1", "\"format_version\":7");
        let mut patched = bytes.clone();
        let idx = bytes.windows(18).position(|w| w == b"\"format_version\":1").unwrap();
        patched[idx + 17] = b'7';
        assert!(text.contains("format_version\":7"));
        fs::write(&p, &patched).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Version { found: 7, .. })));

        fs::write(&p, b"nope").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let ck = trained();
        let mut other = ck.params.clone();
        assert_eq!(fingerprint(&ck.params), fingerprint(&other));
        other.mlm_bias.data[0] += 0.5;
        assert_ne!(fingerprint(&ck.params), fingerprint(&other));
    }
}
