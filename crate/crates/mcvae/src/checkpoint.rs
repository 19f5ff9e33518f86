//! Self-describing binary model checkpoints.
//!
//! Layout: magic, format version, a JSON header with the model
//! configuration plus caller-supplied metadata, then every parameter
//! tensor keyed by its hierarchical name. Values are stored as little-
//! endian f64 bit patterns, so a save/load cycle is bit-exact, including
//! batch-norm running statistics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{McvaeError, Result};
use crate::model::{McvaeConfig, McvaeModel};

const MAGIC: &[u8; 8] = b"MCVAECKP";
const VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    config: McvaeConfig,
    meta: serde_json::Value,
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_exact_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Write the model's full parameter state and metadata to `path`.
/// The file is written to a sibling temp path first and renamed into
/// place, so readers never observe a half-written checkpoint.
pub fn save_checkpoint(path: &Path, model: &McvaeModel, meta: &serde_json::Value) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;

        let header = Header {
            config: model.config.clone(),
            meta: meta.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        write_u64(&mut w, header_bytes.len() as u64)?;
        w.write_all(&header_bytes)?;

        let entries = model.params.entries();
        write_u64(&mut w, entries.len() as u64)?;
        for e in entries {
            write_u64(&mut w, e.name.len() as u64)?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[u8::from(e.trainable)])?;
            let shape = e.tensor.shape();
            write_u64(&mut w, shape.len() as u64)?;
            for d in shape {
                write_u64(&mut w, *d as u64)?;
            }
            for v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuild a model from a checkpoint, returning it with the stored
/// metadata. The parameter set in the file must match the reconstructed
/// model exactly — same names, shapes, and trainable flags.
pub fn load_checkpoint(path: &Path) -> Result<(McvaeModel, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(McvaeError::Checkpoint(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != VERSION {
        return Err(McvaeError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }

    let header_len = read_u64(&mut r)? as usize;
    let header_bytes = read_exact_vec(&mut r, header_len)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| McvaeError::Checkpoint(format!("bad header: {e}")))?;

    // seed is irrelevant: every value is overwritten below
    let mut model = McvaeModel::new(header.config, 0)?;

    let count = read_u64(&mut r)? as usize;
    if count != model.params.len() {
        return Err(McvaeError::Checkpoint(format!(
            "parameter count mismatch: file has {count}, model expects {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let name = String::from_utf8(read_exact_vec(&mut r, name_len)?)
            .map_err(|e| McvaeError::Checkpoint(format!("bad parameter name: {e}")))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let ndim = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }

        let id = model.params.id(&name).ok_or_else(|| {
            McvaeError::Checkpoint(format!("unknown parameter in checkpoint: {name}"))
        })?;
        if model.params.get(id).shape() != shape.as_slice() {
            return Err(McvaeError::Checkpoint(format!(
                "shape mismatch for parameter {name}"
            )));
        }
        if model.params.is_trainable(id) != (flag[0] != 0) {
            return Err(McvaeError::Checkpoint(format!(
                "trainable flag mismatch for parameter {name}"
            )));
        }
        model.params.set(id, &data)?;
    }

    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(McvaeError::Checkpoint(format!(
            "{} trailing bytes after last parameter",
            rest.len()
        )));
    }
    Ok((model, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_cohort, SyntheticSpec};
    use crate::model::McvaeConfig;

    fn test_model(seed: u64) -> McvaeModel {
        McvaeModel::new(
            McvaeConfig {
                modality_dims: [4, 6, 5, 7],
                d_out: 3,
                hidden: 5,
                dropout: 0.1,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = test_model(42);
        let meta = serde_json::json!({"run": "unit", "fold": 3});
        save_checkpoint(&path, &model, &meta).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded.config, model.config);
        for id in model.params.ids() {
            let name = model.params.name(id);
            let lid = loaded.params.id(name).unwrap();
            let a = model.params.get(id);
            let b = loaded.params.get(lid);
            assert_eq!(a.shape(), b.shape(), "{name}");
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name}");
        }
    }

    #[test]
    fn reloaded_model_predicts_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = test_model(7);
        let cohort = generate_cohort(&SyntheticSpec {
            n_patients: 12,
            latent_dim: 3,
            dims: [4, 6, 5, 7],
            ..Default::default()
        })
        .unwrap();
        let before = model.predict_log_hazards(&cohort.records).unwrap();
        save_checkpoint(&path, &model, &serde_json::Value::Null).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let after = loaded.predict_log_hazards(&cohort.records).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&before), bits(&after));
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let err = match load_checkpoint(&path) {
            Err(e) => e,
            Ok(_) => panic!("junk file accepted"),
        };
        assert!(err.to_string().contains("not a model checkpoint"));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = test_model(1);
        save_checkpoint(&path, &model, &serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
