//! Binary checkpoint format for parameter stores.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   : 8 bytes  = b"NEBPCKPT"
//! version : u32      = 1
//! step    : u64        optimizer step counter
//! count   : u32        number of entries
//! entry   : repeated `count` times
//!   name_len : u32
//!   name     : utf-8 bytes
//!   rows     : u64
//!   cols     : u64
//!   data     : rows*cols f64, row-major
//!   m1, m2   : rows*cols f64 each (Adam moments, same layout)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::nn::ParamStore;
use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NEBPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint entry '{0}' not present in the model")]
    UnknownParameter(String),
    #[error("shape mismatch for '{name}': checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error("checkpoint is missing parameter '{0}'")]
    MissingParameter(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&store.adam_step.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for i in 0..store.len() {
        let name = store.name_at(i).as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let id = store.by_name(store.name_at(i)).unwrap();
        let t = store.get(id);
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
        for &x in store.moment1[i].data() {
            w.write_all(&x.to_le_bytes())?;
        }
        for &x in store.moment2[i].data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint into an existing store. Every entry must match a
/// registered parameter by name and shape, and every parameter must be
/// covered.
pub fn load(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let step = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;

    let mut seen = vec![false; store.len()];
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed("non-utf8 name".into()))?;
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let value = read_tensor(&mut r, rows, cols)?;
        let m1 = read_tensor(&mut r, rows, cols)?;
        let m2 = read_tensor(&mut r, rows, cols)?;

        let id = store
            .by_name(&name)
            .ok_or_else(|| CheckpointError::UnknownParameter(name.clone()))?;
        let expected = store.get(id).shape();
        if expected != (rows, cols) {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: (rows, cols),
                expected,
            });
        }
        let index = store.names().position(|n| n == name).unwrap();
        *store.get_mut(id) = value;
        store.moment1[index] = m1;
        store.moment2[index] = m2;
        seen[index] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(CheckpointError::MissingParameter(
            store.name_at(missing).to_string(),
        ));
    }
    store.adam_step = step;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_tensor(r: &mut impl Read, rows: usize, cols: usize) -> Result<Tensor, CheckpointError> {
    let mut data = vec![0.0f64; rows * cols];
    let mut buf = [0u8; 8];
    for x in &mut data {
        r.read_exact(&mut buf)?;
        *x = f64::from_le_bytes(buf);
    }
    Ok(Tensor::from_vec(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::nn::init_weight;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_store() -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.register("layer.w", init_weight(&mut rng, 3, 4));
        store.register("layer.b", Tensor::zeros(1, 4));
        store
    }

    #[test]
    fn round_trip_restores_values_and_step() {
        let dir = std::env::temp_dir().join("nebp-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");

        let mut store = sample_store();
        store.adam_step = 42;
        save(&store, &path).unwrap();

        let mut restored = sample_store();
        load(&mut restored, &path).unwrap();
        assert_eq!(restored.adam_step, 42);
        let id = store.by_name("layer.w").unwrap();
        assert_eq!(store.get(id), restored.get(id));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join("nebp-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mismatch.ckpt");

        let store = sample_store();
        save(&store, &path).unwrap();

        let mut other = ParamStore::new();
        other.register("layer.w", Tensor::zeros(2, 2));
        other.register("layer.b", Tensor::zeros(1, 4));
        assert!(matches!(
            load(&mut other, &path),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}
