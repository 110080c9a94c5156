//! TDF binary tensor files.
//!
//! Layout: magic bytes `"TDF1"`, a `u8` dtype tag (0 = f64), a `u8` rank,
//! `rank` little-endian `u32` dims, then the row-major little-endian
//! payload. Used for checkpoints, synthetic samples, and precomputed
//! embeddings.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TDF1";
const DTYPE_F64: u8 = 0;

/// Writes a tensor to `path` in TDF format.
pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    if tensor.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} exceeds TDF limit", tensor.rank())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[DTYPE_F64, tensor.rank() as u8])?;
    for &dim in tensor.shape() {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::Format(format!("dimension {} exceeds u32", dim)))?;
        w.write_all(&dim.to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a TDF tensor from `path`.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != DTYPE_F64 {
        return Err(Error::Format(format!(
            "{}: unsupported dtype tag {}",
            path.display(),
            head[0]
        )));
    }
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 4];
        r.read_exact(&mut dim)?;
        shape.push(u32::from_le_bytes(dim) as usize);
    }
    let count: usize = shape.iter().product();
    let mut payload = vec![0u8; count * 8];
    r.read_exact(&mut payload)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256StarStar;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.tdf");
        let mut rng = Xoshiro256StarStar::seed_from_u64(2);
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|_| rng.normal()).collect()).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert!(t.bitwise_eq(&back));
    }

    #[test]
    fn scalar_and_empty_shapes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.tdf");
        write_tensor(&path, &Tensor::scalar(-1.5)).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.rank(), 0);
        assert_eq!(back.scalar_value().unwrap(), -1.5);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.tdf");
        std::fs::write(&path, b"NOPE\x00\x01\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.tdf");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TDF1");
        bytes.push(0);
        bytes.push(1);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f64.to_le_bytes()); // one of two values
        std::fs::write(&path, bytes).unwrap();
        assert!(read_tensor(&path).is_err());
    }

    #[test]
    fn unknown_dtype_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dtype.tdf");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TDF1");
        bytes.push(7);
        bytes.push(0);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format(_))));
    }

    #[test]
    fn identical_tensors_produce_identical_files() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.tdf");
        let b = dir.path().join("b.tdf");
        let t = Tensor::new(vec![3, 3], (0..9).map(|v| v as f64 / 7.0).collect()).unwrap();
        write_tensor(&a, &t).unwrap();
        write_tensor(&b, &t).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}
