//! Versioned binary container for named f64 arrays.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "HRCK"
//! version u32      currently 1
//! count   u32      number of arrays
//! per array:
//!   name_len u32, name utf-8,
//!   ndim u32, dims u32 x ndim,
//!   data f64-LE x prod(dims)
//! ```
//!
//! Callers describing an architecture put a JSON sidecar next to the file;
//! this module only moves arrays.

use super::tensor::Tensor;
use crate::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"HRCK";
pub const VERSION: u32 = 1;

pub fn write_arrays(path: &Path, arrays: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_arrays(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {magic:?}, expected HRCK",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported container version {version}",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("non-utf8 array name in checkpoint".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.hrck");
        let arrays = vec![
            (
                "net.w0".to_string(),
                Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300])
                    .unwrap(),
            ),
            ("net.b0".to_string(), Tensor::zeros(vec![1, 2])),
        ];
        write_arrays(&path, &arrays).unwrap();
        let back = read_arrays(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "net.w0");
        assert_eq!(back[0].1, arrays[0].1);
        assert_eq!(back[1].1.shape(), &[1, 2]);
    }

    #[test]
    fn header_bytes_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hdr.hrck");
        write_arrays(&path, &[]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"HRCK");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
        assert_eq!(bytes.len(), 12);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hrck");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_arrays(&path), Err(Error::Format(_))));
    }
}
