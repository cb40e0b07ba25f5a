//! On-disk parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PMRN"                      magic
//! u32                          format version (1)
//! u32                          header length in bytes
//! [u8; header length]          UTF-8 JSON header (see `Header`)
//! f32 * Σ tensor lengths       tensor payloads, in header order
//! [u8; 32]                     SHA-256 of every preceding byte
//! ```
//!
//! The header carries a `kind` tag (`weights` or `checkpoint`), the
//! architecture config record, a name table with shapes, and a free-form
//! `extra` record used by checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"PMRN";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    #[serde(default)]
    extra: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
}

/// Decoded contents of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub config: Value,
    pub extra: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let header = Header {
        kind: c.kind.clone(),
        config: c.config.clone(),
        extra: c.extra.clone(),
        tensors: c
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().dims(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| format_err(path, e.to_string()))?;
    let payload: usize = c.tensors.iter().map(|(_, t)| t.len() * 4).sum();
    let mut buf = Vec::with_capacity(12 + header.len() + payload + DIGEST_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, t) in &c.tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_owned(),
        detail: detail.into(),
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(format_err(path, "missing PMRN magic"));
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(Error::Checksum {
            path: path.to_owned(),
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum {
            path: path.to_owned(),
        });
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let header_bytes = body
        .get(12..12 + hlen)
        .ok_or_else(|| format_err(path, "header length exceeds file"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| format_err(path, e.to_string()))?;

    let mut cursor = 12 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let [n, c, h, w] = entry.shape;
        let shape = Shape::new(n, c, h, w);
        let nbytes = shape.len() * 4;
        let raw = body
            .get(cursor..cursor + nbytes)
            .ok_or_else(|| format_err(path, format!("payload for `{}` truncated", entry.name)))?;
        cursor += nbytes;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format_err(path, format!("`{}`: {e}", entry.name)))?;
        tensors.push((entry.name, t));
    }
    if cursor != body.len() {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    Ok(Container {
        kind: header.kind,
        config: header.config,
        extra: header.extra,
        tensors,
    })
}

pub fn save_weights<C: Serialize>(store: &ParamStore, config: &C, path: &Path) -> Result<()> {
    let config = serde_json::to_value(config).map_err(|e| format_err(path, e.to_string()))?;
    write_container(
        path,
        &Container {
            kind: "weights".into(),
            config,
            extra: Value::Null,
            tensors: store.iter().map(|(k, v)| (k.to_owned(), v.clone())).collect(),
        },
    )
}

/// Reads a weights file without validating it against a model.
pub fn load_weights(path: &Path) -> Result<(Value, ParamStore)> {
    let c = read_container(path)?;
    if c.kind != "weights" {
        return Err(format_err(path, format!("expected weights, found {}", c.kind)));
    }
    let mut store = ParamStore::new();
    for (name, t) in c.tensors {
        store.insert(name, t)?;
    }
    Ok((c.config, store))
}

/// First field where two config records differ, as `key: found X, expected Y`.
pub fn config_difference(found: &Value, expected: &Value) -> Option<String> {
    match (found, expected) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, vb) in b {
                let va = a.get(k).unwrap_or(&Value::Null);
                if let Some(d) = config_difference(va, vb) {
                    return Some(if d.contains(':') && !d.starts_with("found") {
                        format!("{k}.{d}")
                    } else {
                        format!("{k}: {d}")
                    });
                }
            }
            a.keys()
                .find(|k| !b.contains_key(*k))
                .map(|k| format!("{k}: unexpected field"))
        }
        _ if found == expected => None,
        _ => Some(format!("found {found}, expected {expected}")),
    }
}

/// Loads weights into a copy of `template`, requiring the same config record,
/// the same name set in the same order, and identical shapes.
pub fn load_weights_checked<C: Serialize>(
    path: &Path,
    config: &C,
    template: &ParamStore,
) -> Result<ParamStore> {
    let (found_cfg, loaded) = load_weights(path)?;
    let expected = serde_json::to_value(config).map_err(|e| format_err(path, e.to_string()))?;
    if let Some(diff) = config_difference(&found_cfg, &expected) {
        return Err(Error::ParamMismatch {
            path: path.to_owned(),
            name: "config".into(),
            detail: diff,
        });
    }
    check_against(path, &loaded, template)?;
    Ok(loaded)
}

pub(crate) fn check_against(path: &Path, loaded: &ParamStore, template: &ParamStore) -> Result<()> {
    let mismatch = |name: &str, detail: String| Error::ParamMismatch {
        path: path.to_owned(),
        name: name.to_owned(),
        detail,
    };
    for (i, (name, t)) in template.iter().enumerate() {
        let Some(found) = loaded.by_name(name) else {
            return Err(mismatch(name, "missing from file".into()));
        };
        if found.shape() != t.shape() {
            return Err(mismatch(
                name,
                format!("shape {} in file, model expects {}", found.shape(), t.shape()),
            ));
        }
        if loaded.name(crate::nn::ParamId(i)) != name {
            return Err(mismatch(name, "stored out of order".into()));
        }
    }
    if let Some((extra, _)) = loaded.iter().find(|(n, _)| template.by_name(n).is_none()) {
        return Err(mismatch(extra, "not a parameter of this model".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, ConvLayer, InitSpec};
    use serde_json::json;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        ConvLayer::register(&mut s, "a", 3, 4, 3, 1).unwrap();
        ConvLayer::register(&mut s, "b", 4, 4, 3, 4).unwrap();
        init_params(&mut s, &InitSpec::with_seed(7));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pmrn");
        let s = store();
        save_weights(&s, &json!({"max_scale": 9}), &path).unwrap();
        let loaded = load_weights_checked(&path, &json!({"max_scale": 9}), &s).unwrap();
        for ((_, a), (_, b)) in s.iter().zip(loaded.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"PMRN");
        assert_eq!(u32::from_le_bytes(raw[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn wrong_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pmrn");
        let s = store();
        save_weights(&s, &json!({"max_scale": 7, "blocks": 8}), &path).unwrap();
        let err = load_weights_checked(&path, &json!({"max_scale": 9, "blocks": 8}), &s).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("max_scale") && msg.contains("found 7"), "{msg}");
    }

    #[test]
    fn truncation_and_corruption_fail_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pmrn");
        save_weights(&store(), &json!({}), &path).unwrap();
        let raw = fs::read(&path).unwrap();
        fs::write(&path, &raw[..raw.len() - 10]).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Checksum { .. })));
        let mut flipped = raw.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Checksum { .. })));
    }

    #[test]
    fn name_and_shape_mismatch_name_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pmrn");
        save_weights(&store(), &json!({}), &path).unwrap();

        let mut other = ParamStore::new();
        ConvLayer::register(&mut other, "a", 3, 8, 3, 1).unwrap();
        ConvLayer::register(&mut other, "b", 4, 4, 3, 4).unwrap();
        let err = load_weights_checked(&path, &json!({}), &other).unwrap_err();
        assert!(err.to_string().contains("`a.weight`"), "{err}");

        let mut renamed = ParamStore::new();
        ConvLayer::register(&mut renamed, "a", 3, 4, 3, 1).unwrap();
        ConvLayer::register(&mut renamed, "c", 4, 4, 3, 4).unwrap();
        let err = load_weights_checked(&path, &json!({}), &renamed).unwrap_err();
        assert!(err.to_string().contains("`c.weight`"), "{err}");
    }

    #[test]
    fn config_difference_paths() {
        assert_eq!(config_difference(&json!({"a": 1}), &json!({"a": 1})), None);
        assert_eq!(
            config_difference(&json!({"m": {"s": 7}}), &json!({"m": {"s": 9}})).unwrap(),
            "m.s: found 7, expected 9"
        );
    }
}
