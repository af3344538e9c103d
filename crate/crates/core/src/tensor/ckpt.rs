//! Checkpoint persistence: a JSON manifest plus one raw little-endian f32
//! blob file holding every named tensor (values and optimizer slots).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::Param;
use super::{ParamStore, Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into params.bin in f32 units: value, then any optimizer slots.
    offset: usize,
    adam_t: u64,
    has_adam: bool,
    has_rms: bool,
}

/// Free-form model metadata carried inside the manifest (hidden sizes,
/// vocabulary, and whatever else the owner wants to pin).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    meta: CheckpointMeta,
    entries: Vec<BlobEntry>,
}

/// Write `manifest.json` and `params.bin` under `dir`.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, meta: &CheckpointMeta) -> TensorResult<()> {
    fs::create_dir_all(dir).map_err(|e| TensorError::Invalid(format!("mkdir: {e}")))?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let put = |blob: &mut Vec<u8>, xs: &[f32]| {
        for x in xs {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    };
    for (name, p) in store.params_iter() {
        let n = p.value.len();
        entries.push(BlobEntry {
            name: name.clone(),
            shape: p.value.shape.clone(),
            offset,
            adam_t: p.adam_t,
            has_adam: p.adam_m.is_some(),
            has_rms: p.rms_sq.is_some(),
        });
        put(&mut blob, &p.value.data);
        offset += n;
        if let (Some(m), Some(v)) = (&p.adam_m, &p.adam_v) {
            put(&mut blob, m);
            put(&mut blob, v);
            offset += 2 * n;
        }
        if let Some(sq) = &p.rms_sq {
            put(&mut blob, sq);
            offset += n;
        }
    }
    let manifest = Manifest {
        format: 1,
        meta: meta.clone(),
        entries,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| TensorError::Invalid(format!("manifest encode: {e}")))?;
    let mut f = fs::File::create(dir.join("manifest.json"))
        .map_err(|e| TensorError::Invalid(format!("manifest.json: {e}")))?;
    f.write_all(&json)
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| TensorError::Invalid(format!("manifest.json: {e}")))?;
    fs::write(dir.join("params.bin"), &blob)
        .map_err(|e| TensorError::Invalid(format!("params.bin: {e}")))?;
    Ok(())
}

/// Load a checkpoint previously written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> TensorResult<(ParamStore, CheckpointMeta)> {
    let json = fs::read(dir.join("manifest.json"))
        .map_err(|e| TensorError::Invalid(format!("manifest.json: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| TensorError::Invalid(format!("manifest decode: {e}")))?;
    let blob = fs::read(dir.join("params.bin"))
        .map_err(|e| TensorError::Invalid(format!("params.bin: {e}")))?;
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut store = ParamStore::new();
    for e in manifest.entries {
        let n: usize = e.shape.iter().product();
        let take = |at: usize| -> TensorResult<Vec<f32>> {
            floats
                .get(at..at + n)
                .map(|s| s.to_vec())
                .ok_or_else(|| TensorError::Invalid(format!("blob truncated at `{}`", e.name)))
        };
        let mut off = e.offset;
        let value = Tensor {
            shape: e.shape.clone(),
            data: take(off)?,
        };
        off += n;
        let (adam_m, adam_v) = if e.has_adam {
            let m = take(off)?;
            off += n;
            let v = take(off)?;
            off += n;
            (Some(m), Some(v))
        } else {
            (None, None)
        };
        let rms_sq = if e.has_rms {
            let s = take(off)?;
            Some(s)
        } else {
            None
        };
        store.insert_raw(
            e.name,
            Param {
                value,
                grad: None,
                adam_m,
                adam_v,
                adam_t: e.adam_t,
                rms_sq,
            },
        );
    }
    Ok((store, manifest.meta))
}
