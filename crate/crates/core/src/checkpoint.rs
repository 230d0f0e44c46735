//! Versioned weight container. A checkpoint carries every model entry keyed
//! by module path, together with the run configuration and asset dimensions
//! it was trained under; loading rebuilds the model and validates that every
//! entry matches the shape the configuration implies. Serialization is
//! deterministic, so save-load-save produces byte-identical files.

use crate::config::RunConfig;
use crate::mat::Mat;
use crate::model::Model;
use crate::Scalar;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Read;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPCK";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint metadata parse: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint digest mismatch (file damaged)")]
    Digest,
    #[error("checkpoint does not match configuration: {0}")]
    Shape(String),
    #[error("configuration invalid: {0}")]
    Config(#[from] crate::config::ConfigError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub n_joints: usize,
    pub n_shape: usize,
    pub run_config: RunConfig,
}

/// Serialize a model: magic, version, metadata JSON, entry table, whole-file
/// sha-256. Entries are written in the model's canonical order with f64
/// little-endian payloads.
pub fn checkpoint_bytes<S: Scalar>(model: &Model<S>, cfg: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        n_joints: model.n_joints,
        n_shape: model.n_shape,
        run_config: cfg.clone(),
    };
    let meta_json = serde_json::to_vec(&meta).expect("meta serializes");
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    let entries = model.named_entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, mat) in entries {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(mat.rows as u64).to_le_bytes());
        out.extend_from_slice(&(mat.cols as u64).to_le_bytes());
        for &x in &mat.data {
            out.extend_from_slice(&Scalar::to_f64(x).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, cfg: &RunConfig, path: &std::path::Path) -> Result<(), CheckpointError> {
    std::fs::write(path, checkpoint_bytes(model, cfg))?;
    Ok(())
}

/// Rebuild a model from checkpoint bytes. The embedded configuration is
/// validated, a model of that shape is constructed, and every stored entry
/// must match its expected dimensions exactly.
pub fn model_from_bytes(bytes: &[u8]) -> Result<(Model<f64>, CheckpointMeta), CheckpointError> {
    if bytes.len() < 4 + 4 + 8 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(CheckpointError::Digest);
    }
    let mut r = body;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::Magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic);
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(|_| CheckpointError::Truncated)?;
    let version = u32::from_le_bytes(v4);
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8).map_err(|_| CheckpointError::Truncated)?;
    let mlen = u64::from_le_bytes(l8) as usize;
    if r.len() < mlen {
        return Err(CheckpointError::Truncated);
    }
    let meta: CheckpointMeta = serde_json::from_slice(&r[..mlen])?;
    r = &r[mlen..];
    meta.run_config.validate()?;

    let mut model = Model::<f64>::init(&meta.run_config, meta.n_joints, meta.n_shape);
    let mut c4 = [0u8; 4];
    r.read_exact(&mut c4).map_err(|_| CheckpointError::Truncated)?;
    let n_entries = u32::from_le_bytes(c4) as usize;

    let mut stored: Vec<(String, Mat<f64>)> = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let mut n2 = [0u8; 2];
        r.read_exact(&mut n2).map_err(|_| CheckpointError::Truncated)?;
        let nlen = u16::from_le_bytes(n2) as usize;
        if r.len() < nlen {
            return Err(CheckpointError::Truncated);
        }
        let name = String::from_utf8(r[..nlen].to_vec()).map_err(|_| CheckpointError::Truncated)?;
        r = &r[nlen..];
        let mut d8 = [0u8; 8];
        r.read_exact(&mut d8).map_err(|_| CheckpointError::Truncated)?;
        let rows = u64::from_le_bytes(d8) as usize;
        r.read_exact(&mut d8).map_err(|_| CheckpointError::Truncated)?;
        let cols = u64::from_le_bytes(d8) as usize;
        let n_vals = rows * cols;
        if r.len() < 8 * n_vals {
            return Err(CheckpointError::Truncated);
        }
        let mut data = vec![0.0f64; n_vals];
        for (i, v) in data.iter_mut().enumerate() {
            *v = f64::from_le_bytes(r[8 * i..8 * i + 8].try_into().unwrap());
        }
        r = &r[8 * n_vals..];
        stored.push((name, Mat::from_vec(rows, cols, data)));
    }

    // Match stored entries against the freshly built model's expectations.
    {
        let expected: Vec<(String, (usize, usize))> = model
            .named_entries()
            .into_iter()
            .map(|(n, m)| (n, (m.rows, m.cols)))
            .collect();
        if expected.len() != stored.len() {
            return Err(CheckpointError::Shape(format!(
                "config implies {} entries, file holds {}",
                expected.len(),
                stored.len()
            )));
        }
        for ((en, eshape), (sn, sm)) in expected.iter().zip(&stored) {
            if en != sn {
                return Err(CheckpointError::Shape(format!("expected entry {en}, found {sn}")));
            }
            if *eshape != (sm.rows, sm.cols) {
                return Err(CheckpointError::Shape(format!(
                    "{en}: config implies {}x{}, file holds {}x{}",
                    eshape.0, eshape.1, sm.rows, sm.cols
                )));
            }
        }
    }
    let mut it = stored.into_iter();
    for (_, target) in model.named_params_mut() {
        *target = it.next().unwrap().1;
    }
    model.regressor.init_state = it.next().unwrap().1;
    Ok((model, meta))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(Model<f64>, CheckpointMeta), CheckpointError> {
    model_from_bytes(&std::fs::read(path)?)
}

/// Hex sha-256 of a file, used to demonstrate evaluation leaves checkpoints
/// untouched.
pub fn file_hash(path: &std::path::Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.model.channels = 5;
        cfg.model.image_size = 8;
        cfg.model.feature_map_res = 2;
        cfg.model.n_depth_samples = 2;
        cfg.model.levels_x = 1;
        cfg.model.levels_r = 1;
        cfg.model.field_width = 7;
        cfg.model.regressor_hidden = 9;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = tiny_config();
        let mut model = Model::<f64>::init(&cfg, 8, 10);
        // Scramble weights so the test is not about zero-heavy tensors.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (_, m) in model.named_params_mut() {
            for x in m.data.iter_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        let bytes = checkpoint_bytes(&model, &cfg);
        let (loaded, meta) = model_from_bytes(&bytes).unwrap();
        assert_eq!(meta.run_config, cfg);
        let bytes2 = checkpoint_bytes(&loaded, &meta.run_config);
        assert_eq!(bytes, bytes2, "save-load-save must reproduce the file exactly");
        for ((na, ma), (nb, mb)) in model.named_entries().iter().zip(loaded.named_entries().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ma.data, mb.data);
        }
    }

    #[test]
    fn loading_validates_shapes_against_config() {
        let cfg = tiny_config();
        let model = Model::<f64>::init(&cfg, 8, 10);
        let bytes = checkpoint_bytes(&model, &cfg);

        // A model built under a wider config cannot absorb these entries.
        let mut wide = tiny_config();
        wide.model.channels = 6;
        let wide_model = Model::<f64>::init(&wide, 8, 10);
        let wide_bytes = checkpoint_bytes(&wide_model, &wide);
        assert_ne!(bytes.len(), wide_bytes.len());

        // Tamper with the embedded meta: claim different channels.
        let (loaded, meta) = model_from_bytes(&bytes).unwrap();
        let mut meta2 = meta.clone();
        meta2.run_config.model.channels = 6;
        // Serializing the small model under the wide config produces a file
        // whose meta disagrees with its entry shapes; loading must reject it.
        let forged = checkpoint_bytes(&loaded, &meta2.run_config);
        match model_from_bytes(&forged) {
            Err(CheckpointError::Shape(msg)) => assert!(msg.contains("x"), "message: {msg}"),
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = tiny_config();
        let model = Model::<f64>::init(&cfg, 8, 10);
        let mut bytes = checkpoint_bytes(&model, &cfg);
        let idx = bytes.len() / 2;
        bytes[idx] ^= 0x01;
        assert!(matches!(model_from_bytes(&bytes), Err(CheckpointError::Digest)));
        let cut = &checkpoint_bytes(&model, &cfg)[..50];
        assert!(model_from_bytes(cut).is_err());
    }

    #[test]
    fn file_roundtrip_and_hash() {
        let cfg = tiny_config();
        let model = Model::<f64>::init(&cfg, 8, 10);
        let dir = std::env::temp_dir().join("fieldpose_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.fpck");
        save_checkpoint(&model, &cfg, &path).unwrap();
        let h1 = file_hash(&path).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        let h2 = file_hash(&path).unwrap();
        assert_eq!(h1, h2, "loading must not modify the file");
        save_checkpoint(&loaded, &meta.run_config, &path).unwrap();
        assert_eq!(file_hash(&path).unwrap(), h1);
    }
}
