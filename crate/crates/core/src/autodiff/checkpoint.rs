//! Parameter checkpoint file: named tensors, little-endian.
//!
//! Layout: magic "NFSP", version u32, tensor count u32, then per tensor
//! (name length u32, name bytes, rank u32, dims u32 each, f64 data).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::tensor::{NamedTensors, Tensor};

const MAGIC: &[u8; 4] = b"NFSP";
const VERSION: u32 = 1;

pub fn save_tensors(path: &Path, tensors: &NamedTensors) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<NamedTensors> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::format("NFSP checkpoint", format!("bad magic {magic:?}")));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format("NFSP checkpoint", format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut out = NamedTensors::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name_bytes = cur.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::format("NFSP checkpoint", "tensor name is not utf-8"))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(cur.f64()?);
        }
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format("NFSP checkpoint", "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_data() {
        let mut tensors = NamedTensors::new();
        tensors.insert("layer.w".into(), Tensor::matrix(2, 3, vec![1.0, -2.5, 3.0, 0.0, 4.5, -6.0]).unwrap());
        tensors.insert("layer.b".into(), Tensor::vector(vec![0.25, -0.75]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.nfsp");
        save_tensors(&path, &tensors).unwrap();
        let loaded = load_tensors(&path).unwrap();
        assert_eq!(tensors, loaded);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nfsp");
        fs::write(&path, b"NOPE____").unwrap();
        assert!(load_tensors(&path).is_err());
    }
}
