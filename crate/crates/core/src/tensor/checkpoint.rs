//! Checkpoints: a JSON manifest describing each tensor plus a flat blob of
//! little-endian `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore, Shape, Tensor};
use crate::error::CheckpointError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub tensors: Vec<ManifestEntry>,
}

/// Serialises `store` into `(manifest_json, blob)`.
pub fn encode(store: &ParamStore) -> (String, Vec<u8>) {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        tensors.push(ManifestEntry {
            name: name.to_string(),
            shape: p.tensor.shape().0,
            dtype: "f32".into(),
            offset: blob.len(),
            kind: p.kind,
        });
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        tensors,
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    json.push('\n');
    (json, blob)
}

pub fn decode(manifest: &[u8], blob: &[u8]) -> Result<ParamStore, CheckpointError> {
    let manifest: Manifest =
        serde_json::from_slice(manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(manifest.version));
    }
    let mut store = ParamStore::new();
    for entry in manifest.tensors {
        if entry.dtype != "f32" {
            return Err(CheckpointError::Dtype(entry.dtype));
        }
        let shape = Shape(entry.shape);
        let overflow = || CheckpointError::Manifest(format!("tensor `{}` is too large", entry.name));
        let numel = entry
            .shape
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(overflow)?;
        let bytes = numel.checked_mul(4).ok_or_else(overflow)?;
        let end = entry.offset.checked_add(bytes).ok_or_else(overflow)?;
        if end > blob.len() {
            return Err(CheckpointError::OutOfBounds {
                name: entry.name,
                start: entry.offset,
                end,
                len: blob.len(),
            });
        }
        let data = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(entry.name, Tensor::new(shape, data)?, entry.kind)?;
    }
    Ok(store)
}

/// Writes `<stem>.json` and `<stem>.bin` under `dir`.
pub fn save(store: &ParamStore, dir: &Path, stem: &str) -> Result<(), CheckpointError> {
    let (json, blob) = encode(store);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CheckpointError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mpath = dir.join(format!("{stem}.json"));
    let bpath = dir.join(format!("{stem}.bin"));
    fs::write(&mpath, json).map_err(io(&mpath))?;
    fs::write(&bpath, blob).map_err(io(&bpath))?;
    Ok(())
}

pub fn load(dir: &Path, stem: &str) -> Result<ParamStore, CheckpointError> {
    let mpath = dir.join(format!("{stem}.json"));
    let bpath = dir.join(format!("{stem}.bin"));
    let manifest = fs::read(&mpath).map_err(|source| CheckpointError::Io {
        path: mpath.clone(),
        source,
    })?;
    let blob = fs::read(&bpath).map_err(|source| CheckpointError::Io {
        path: bpath.clone(),
        source,
    })?;
    decode(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(values in proptest::collection::vec(any::<u32>(), 1..64)) {
            let mut store = ParamStore::new();
            let n = values.len();
            let data: Vec<f32> = values.iter().map(|b| f32::from_bits(*b)).collect();
            store.insert("a.w", Tensor::new(Shape::new(1, n, 1, 1), data.clone()).unwrap(), ParamKind::Weight).unwrap();
            store.insert("alpha", Tensor::new(Shape::vector(2), vec![0.5, -0.25]).unwrap(), ParamKind::Architecture).unwrap();
            let (json, blob) = encode(&store);
            let back = decode(json.as_bytes(), &blob).unwrap();
            let got: Vec<u32> = back.get("a.w").unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, values);
            prop_assert_eq!(back.kind("alpha"), Some(ParamKind::Architecture));
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let mut store = ParamStore::new();
        store
            .insert_const("w", Shape::new(1, 4, 1, 1), 1.0, ParamKind::Weight)
            .unwrap();
        let (json, blob) = encode(&store);
        let err = decode(json.as_bytes(), &blob[..blob.len() - 1]).unwrap_err();
        assert!(matches!(err, CheckpointError::OutOfBounds { .. }));
    }

    #[test]
    fn wrong_version_and_dtype_are_rejected() {
        let bad_version = r#"{"version": 7, "tensors": []}"#;
        assert!(matches!(
            decode(bad_version.as_bytes(), &[]),
            Err(CheckpointError::Version(7))
        ));
        let bad_dtype = r#"{"version": 1, "tensors": [{"name":"w","shape":[1,1,1,1],"dtype":"f16","offset":0,"kind":"weight"}]}"#;
        assert!(matches!(
            decode(bad_dtype.as_bytes(), &[0, 0, 0, 0]),
            Err(CheckpointError::Dtype(_))
        ));
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store
            .insert_const("x", Shape::new(2, 1, 1, 1), 3.5, ParamKind::Weight)
            .unwrap();
        save(&store, dir.path(), "ckpt").unwrap();
        let back = load(dir.path(), "ckpt").unwrap();
        assert_eq!(back.get("x").unwrap().data(), &[3.5, 3.5]);
    }
}
