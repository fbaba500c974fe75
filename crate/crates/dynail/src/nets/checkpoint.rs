use crate::diffcore::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"DAIL";
const VERSION: u32 = 1;
const MAX_STR: usize = 1 << 16;
const MAX_ITEMS: usize = 1 << 20;
const MAX_ELEMS: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// On-disk model bundle: which environment it belongs to, the architecture
/// dims needed to rebuild the networks, free-form key/value metadata, and
/// the parameter tensors in declaration order. Contains nothing
/// non-deterministic (no timestamps), so identical training runs produce
/// byte-identical files.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub env: String,
    pub arch: Vec<u32>,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_str(&mut w, &ckpt.env)?;
    w.write_all(&(ckpt.arch.len() as u32).to_le_bytes())?;
    for a in &ckpt.arch {
        w.write_all(&a.to_le_bytes())?;
    }
    w.write_all(&(ckpt.meta.len() as u32).to_le_bytes())?;
    for (k, v) in &ckpt.meta {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for t in &ckpt.tensors {
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let env = read_str(&mut r)?;
    let n_arch = read_count(&mut r, MAX_ITEMS, "arch entries")?;
    let mut arch = Vec::with_capacity(n_arch);
    for _ in 0..n_arch {
        arch.push(read_u32(&mut r)?);
    }
    let n_meta = read_count(&mut r, MAX_ITEMS, "meta entries")?;
    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let k = read_str(&mut r)?;
        let v = read_str(&mut r)?;
        meta.push((k, v));
    }
    let n_tensors = read_count(&mut r, MAX_ITEMS, "tensors")?;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let ndim = read_count(&mut r, 8, "tensor rank")?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let d = u64::from_le_bytes(b);
            if d as usize > MAX_ELEMS {
                return Err(CheckpointError::Corrupt(format!("dimension {d} too large")));
            }
            shape.push(d as usize);
        }
        let n: usize = shape.iter().product();
        if n > MAX_ELEMS {
            return Err(CheckpointError::Corrupt(format!("{n} elements in one tensor")));
        }
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.push(
            Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Corrupt(format!("bad tensor: {e}")))?,
        );
    }
    Ok(Checkpoint {
        env,
        arch,
        meta,
        tensors,
    })
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<(), CheckpointError> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_count<R: Read>(r: &mut R, max: usize, what: &str) -> Result<usize, CheckpointError> {
    let n = read_u32(r)? as usize;
    if n > max {
        return Err(CheckpointError::Corrupt(format!("{n} {what}")));
    }
    Ok(n)
}

fn read_str<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let n = read_count(r, MAX_STR, "string bytes")?;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| CheckpointError::Corrupt("non-utf8 string".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        Checkpoint {
            env: "cartpole".into(),
            arch: vec![4, 2, 100, 50],
            meta: vec![("mean_return".into(), "199.5".into())],
            tensors: vec![
                Tensor::randn(&[3, 2], 1.0, &mut rng),
                Tensor::randn(&[5], 0.3, &mut rng),
                Tensor::scalar(-0.5),
            ],
        }
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.env, ckpt.env);
        assert_eq!(loaded.arch, ckpt.arch);
        assert_eq!(loaded.meta, ckpt.meta);
        assert_eq!(loaded.tensors.len(), ckpt.tensors.len());
        for (a, b) in loaded.tensors.iter().zip(&ckpt.tensors) {
            assert_eq!(a.shape(), b.shape());
            let bits_a: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_model");
        std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::UnsupportedVersion(99))
        ));
    }
}
