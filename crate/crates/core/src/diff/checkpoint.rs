//! "GFWT" named-tensor checkpoints.

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::binio;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GFWT";
const VERSION: u32 = 1;

/// Header `GFWT`, version, tensor count, then per tensor: name length,
/// UTF-8 name, rank, dims, f32 data.
pub fn write_checkpoint(w: &mut impl Write, tensors: &[(String, Tensor)]) -> Result<()> {
    binio::write_magic(w, MAGIC, VERSION)?;
    binio::write_u32(w, binio::to_u32(tensors.len(), "tensor count")?)?;
    for (name, t) in tensors {
        binio::write_u32(w, binio::to_u32(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        binio::write_u32(w, binio::to_u32(t.rank(), "rank")?)?;
        for &d in t.shape() {
            binio::write_u32(w, binio::to_u32(d, "dim")?)?;
        }
        binio::write_f32s(w, t.data().iter().copied())?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    binio::read_magic(r, MAGIC, VERSION)?;
    let count = binio::read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = binio::read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = binio::read_u32(r)? as usize;
        let dims = (0..rank).map(|_| binio::read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().product();
        let data = binio::read_f32s(r, n)?;
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    binio::expect_eof(r)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_and_f32_values() {
        let tensors = vec![
            ("enc.w".to_string(), Tensor::matrix(2, 3, vec![1.0, -2.5, 0.125, 3.0, 4.0, 1e-3]).unwrap()),
            ("step".to_string(), Tensor::scalar(42.0)),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &tensors).unwrap();
        assert_eq!(&buf[..4], b"GFWT");
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back[0].0, "enc.w");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert!((back[0].1.data()[5] - 1e-3).abs() < 1e-9);
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
        assert_eq!(back[1].1.item(), 42.0);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("a".into(), Tensor::zeros(vec![4]))]).unwrap();
        buf.truncate(buf.len() - 2);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
