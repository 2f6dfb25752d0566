//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, little-endian u32 header length, a JSON header
//! (format version, model kind, full network config echo, parameter names
//! with shapes), then the parameter tensors as contiguous little-endian f32
//! blobs in header order. Loading refuses any config or kind mismatch so a
//! checkpoint can never be silently applied to a differently shaped model.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::layers::ParamStore;
use crate::networks::NetConfig;

const MAGIC: &[u8; 8] = b"TRYONCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint header: {0}")]
    BadHeader(#[from] serde_json::Error),
    #[error("checkpoint is for model kind '{found}', expected '{expected}'")]
    KindMismatch { expected: String, found: String },
    #[error("checkpoint config does not match the requested config; refusing to load")]
    CfgMismatch,
    #[error("checkpoint parameters do not match the model: {0}")]
    ParamMismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: String,
    pub cfg: NetConfig,
    pub params: Vec<ParamMeta>,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    cfg: &NetConfig,
    ps: &ParamStore,
) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        cfg: cfg.clone(),
        params: ps
            .iter()
            .map(|(_, p)| ParamMeta { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    (|| -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(header_json.len() as u32)?;
        w.write_all(&header_json)?;
        for (_, p) in ps.iter() {
            for &v in p.value.iter() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

/// Reads just the header; used to discover the stored config before
/// constructing a model, and for manifest provenance.
pub fn peek_header(path: &Path) -> Result<CheckpointHeader, CheckpointError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    read_header(&mut r, path)
}

fn read_header(
    r: &mut impl Read,
    path: &Path,
) -> Result<CheckpointHeader, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = r.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(io_err(path))?;
    let header: CheckpointHeader = serde_json::from_slice(&buf)?;
    if header.version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(header.version));
    }
    Ok(header)
}

/// Loads parameters into an existing store, refusing config, kind, name, or
/// shape mismatches.
pub fn load_checkpoint(
    path: &Path,
    kind: &str,
    cfg: &NetConfig,
    ps: &mut ParamStore,
) -> Result<(), CheckpointError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let header = read_header(&mut r, path)?;
    if header.kind != kind {
        return Err(CheckpointError::KindMismatch {
            expected: kind.to_string(),
            found: header.kind,
        });
    }
    if &header.cfg != cfg {
        return Err(CheckpointError::CfgMismatch);
    }
    if header.params.len() != ps.len() {
        return Err(CheckpointError::ParamMismatch(format!(
            "model has {} parameters, checkpoint has {}",
            ps.len(),
            header.params.len()
        )));
    }
    for (meta, (_, p)) in header.params.iter().zip(ps.iter_mut()) {
        if meta.name != p.name {
            return Err(CheckpointError::ParamMismatch(format!(
                "expected parameter '{}', checkpoint has '{}'",
                p.name, meta.name
            )));
        }
        if meta.shape != p.value.shape() {
            return Err(CheckpointError::ParamMismatch(format!(
                "parameter '{}' has shape {:?}, checkpoint has {:?}",
                p.name,
                p.value.shape(),
                meta.shape
            )));
        }
        let n: usize = meta.shape.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(io_err(path))?;
        p.value = ArrayD::from_shape_vec(IxDyn(&meta.shape), data).unwrap();
    }
    Ok(())
}

/// Hex SHA-256 of a file, for provenance manifests.
pub fn sha256_file(path: &Path) -> Result<String, io::Error> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        for (name, shape) in [("a.weight", vec![4, 3]), ("a.bias", vec![4]), ("b.weight", vec![2, 2, 3, 3])] {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ps.add(name, ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap());
        }
        ps
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = NetConfig::default();
        let ps = store_with(1);
        save_checkpoint(&path, "seg", &cfg, &ps).unwrap();
        let mut restored = store_with(2);
        load_checkpoint(&path, "seg", &cfg, &mut restored).unwrap();
        for ((_, a), (_, b)) in ps.iter().zip(restored.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        // Header is readable standalone.
        let header = peek_header(&path).unwrap();
        assert_eq!(header.kind, "seg");
        assert_eq!(header.cfg, cfg);
        assert_eq!(header.params.len(), 3);
    }

    #[test]
    fn refuses_cfg_kind_and_shape_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = NetConfig::default();
        let ps = store_with(3);
        save_checkpoint(&path, "seg", &cfg, &ps).unwrap();

        let other_cfg = NetConfig { base_channels: 32, ..NetConfig::default() };
        let mut target = store_with(4);
        assert!(matches!(
            load_checkpoint(&path, "seg", &other_cfg, &mut target),
            Err(CheckpointError::CfgMismatch)
        ));
        assert!(matches!(
            load_checkpoint(&path, "deform", &cfg, &mut target),
            Err(CheckpointError::KindMismatch { .. })
        ));

        // Different parameter set.
        let mut extra = store_with(5);
        extra.add("c.weight", ArrayD::zeros(IxDyn(&[1])));
        assert!(matches!(
            load_checkpoint(&path, "seg", &cfg, &mut extra),
            Err(CheckpointError::ParamMismatch(_))
        ));

        // Same names, different shape.
        let mut reshaped = ParamStore::new();
        reshaped.add("a.weight", ArrayD::zeros(IxDyn(&[3, 4])));
        reshaped.add("a.bias", ArrayD::zeros(IxDyn(&[4])));
        reshaped.add("b.weight", ArrayD::zeros(IxDyn(&[2, 2, 3, 3])));
        assert!(matches!(
            load_checkpoint(&path, "seg", &cfg, &mut reshaped),
            Err(CheckpointError::ParamMismatch(_))
        ));
    }

    #[test]
    fn rejects_garbage_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let cfg = NetConfig::default();
        let mut ps = store_with(6);
        assert!(matches!(
            load_checkpoint(&path, "seg", &cfg, &mut ps),
            Err(CheckpointError::BadMagic)
        ));
        // Truncated blob section.
        let good = dir.path().join("good.ckpt");
        save_checkpoint(&good, "seg", &cfg, &ps).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(&cut, "seg", &cfg, &mut ps),
            Err(CheckpointError::Io { .. })
        ));
    }

    #[test]
    fn save_is_deterministic_and_hashable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetConfig::default();
        let ps = store_with(7);
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        save_checkpoint(&p1, "synth", &cfg, &ps).unwrap();
        save_checkpoint(&p2, "synth", &cfg, &ps).unwrap();
        let h1 = sha256_file(&p1).unwrap();
        let h2 = sha256_file(&p2).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
        // A changed parameter changes the hash.
        let mut ps2 = store_with(7);
        let first = ps2.iter().next().unwrap().0;
        ps2.value_mut(first)[[0, 0]] += 1e-3;
        let p3 = dir.path().join("three.ckpt");
        save_checkpoint(&p3, "synth", &cfg, &ps2).unwrap();
        assert_ne!(h1, sha256_file(&p3).unwrap());
    }
}
