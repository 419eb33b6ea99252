//! Flat binary parameter container: a little-endian payload described by a
//! JSON manifest of tensor names, dtypes, shapes and byte offsets.
//!
//! Layout: `b"PVCP"` magic, u32 version, u64 manifest length, manifest JSON,
//! payload bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"PVCP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
}

/// Serialize named tensors in the given order.
pub fn write_container<T: Scalar>(entries: &[(String, &Tensor<T>)], path: &Path) -> Result<()> {
    let mut manifest = Manifest {
        tensors: Vec::with_capacity(entries.len()),
    };
    let mut payload = Vec::new();
    for (name, tensor) in entries {
        let offset = payload.len() as u64;
        for &v in tensor.data() {
            v.write_le(&mut payload);
        }
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            dtype: T::DTYPE,
            shape: tensor.shape().to_vec(),
            offset,
            byte_len: payload.len() as u64 - offset,
        });
    }
    let manifest_json = serde_json::to_vec(&manifest)?;

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_json)?;
    out.write_all(&payload)?;
    Ok(())
}

/// Read a container back as (name, tensor) pairs in manifest order.
pub fn read_container<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(corrupt("not a parameter container"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported container version {version}")));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + manifest_len])
        .map_err(|e| corrupt(&format!("bad manifest: {e}")))?;
    let payload = &bytes[16 + manifest_len..];

    let elem = T::DTYPE.size_bytes();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        if entry.dtype != T::DTYPE {
            return Err(corrupt(&format!(
                "tensor {} has dtype {} but {} was requested",
                entry.name,
                entry.dtype,
                T::DTYPE
            )));
        }
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if entry.byte_len as usize != count * elem || end > payload.len() {
            return Err(corrupt(&format!("tensor {} payload out of range", entry.name)));
        }
        let data: Vec<T> = payload[start..end]
            .chunks_exact(elem)
            .map(T::read_le)
            .collect();
        tensors.push((
            entry.name,
            Tensor::new(entry.shape, data).map_err(|e| corrupt(&e.to_string()))?,
        ));
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_names_shapes_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::<f32>::random_uniform([2, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f32>::random_uniform([4], -1.0, 1.0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.params");
        write_container(&[("w".to_string(), &a), ("b".to_string(), &b)], &path).unwrap();
        let back = read_container::<f32>(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "w");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].0, "b");
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn rejects_corruption_and_dtype_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.params");
        let t = Tensor::<f64>::full([2], 1.0);
        write_container(&[("t".to_string(), &t)], &path).unwrap();
        assert!(read_container::<f32>(&path).is_err());

        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_container::<f64>(&path).is_err());
    }
}
