//! Checkpoint container: one file holding a configuration and every parameter.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CVBT1"                      5-byte magic
//! u32 config_len               followed by that many bytes of config text
//! repeated, in declaration order:
//!   u32 name_len, name bytes   dotted parameter name
//!   u32 rank, u64 × rank       tensor extents
//!   f32 × numel                tensor data
//! ```
//!
//! Values store as f32 — plenty for trained weights — while the runtime computes in
//! f64. Loading rebuilds the parameter walk from the embedded config and insists the
//! file's names and shapes match it exactly, so a checkpoint can never silently load
//! into the wrong architecture.

use crate::config::ModelConfig;
use crate::error::{err, Result};
use crate::params::ParamStore;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"CVBT1";

/// Writes `store` (with its configuration) to `path`.
pub fn save(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    let text = cfg.to_text();
    out.write_all(&(text.len() as u32).to_le_bytes())?;
    out.write_all(text.as_bytes())?;
    for (spec, tensor) in store.iter() {
        out.write_all(&(spec.name.len() as u32).to_le_bytes())?;
        out.write_all(spec.name.as_bytes())?;
        out.write_all(&(spec.shape.len() as u32).to_le_bytes())?;
        for &e in &spec.shape {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint back into a fresh parameter store.
pub fn load(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(err!(Input, "not a checkpoint: bad magic {magic:?}"));
    }
    let config_len = read_u32(&mut r)? as usize;
    let mut text = vec![0u8; config_len];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| err!(Input, "config text is not UTF-8"))?;
    let cfg = ModelConfig::from_text(&text)?;

    let mut store = ParamStore::zeros(&cfg);
    for i in 0..store.len() {
        let spec = store.specs()[i].clone();
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| err!(Input, "parameter name is not UTF-8"))?;
        if name != spec.name {
            return Err(err!(
                Input,
                "checkpoint parameter {name:?} where the architecture expects {:?}",
                spec.name
            ));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        if shape != spec.shape {
            return Err(err!(
                Input,
                "checkpoint {name:?} has shape {shape:?}, architecture expects {:?}",
                spec.shape
            ));
        }
        let tensor = store.tensor_at_mut(i);
        let mut buf = [0u8; 4];
        for v in tensor.data_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf) as f64;
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(err!(Input, "trailing bytes after the last parameter"));
    }
    Ok((cfg, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::error::Error;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden: 8,
            embedding: 6,
            ffn_inner: 16,
            groups: 2,
            heads: 4,
            reduction: 2,
            head_dim: 2,
            kernel_size: 3,
            vocab_size: 29,
            max_positions: 16,
            variant: Variant::BottleneckGroupedConv,
        }
    }

    #[test]
    fn round_trip_preserves_config_and_values_to_f32() {
        let cfg = tiny();
        let store = ParamStore::init(&cfg, 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cvbt");
        save(&path, &cfg, &store).unwrap();

        let (cfg2, store2) = load(&path).unwrap();
        assert_eq!(cfg, cfg2);
        for ((sa, ta), (sb, tb)) in store.iter().zip(store2.iter()) {
            assert_eq!(sa, sb);
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(*a as f32, *b as f32, "{}", sa.name);
                assert!((a - b).abs() <= a.abs() * 1e-7 + 1e-30);
            }
        }

        // Saving the loaded store again must reproduce the file byte for byte.
        let path2 = dir.path().join("model2.cvbt");
        save(&path2, &cfg2, &store2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.cvbt");
        std::fs::write(&path, b"NOTCK\x00\x00\x00\x00").unwrap();
        assert!(matches!(load(&path), Err(Error::Input(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let cfg = tiny();
        let store = ParamStore::init(&cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cvbt");
        save(&path, &cfg, &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Io(_))));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let cfg = tiny();
        let store = ParamStore::init(&cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cvbt");
        save(&path, &cfg, &store).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Input(_))));
    }

    #[test]
    fn tampered_parameter_name_is_rejected() {
        let cfg = tiny();
        let store = ParamStore::init(&cfg, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cvbt");
        save(&path, &cfg, &store).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // The first parameter name, "embeddings.word", starts right after the config
        // block; corrupt one of its bytes.
        let config_len =
            u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
        let name_start = 5 + 4 + config_len + 4;
        bytes[name_start] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Input(_))));
    }
}
