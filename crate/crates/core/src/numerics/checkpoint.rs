//! `DGTL0001` tensor checkpoints.
//!
//! Layout: the 8-byte magic, then per tensor `name_len: u32`, UTF-8 name,
//! `rank: u32`, `rank` dims as `u32`, and the values as row-major `f32`;
//! a record with `name_len == 0` ends the file. Integers and floats are
//! little-endian.

use std::io::{self, Read, Write};

use super::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DGTL0001";

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_checkpoint<T: Real, W: Write>(mut w: W, tensors: &[(&str, &Tensor<T>)]) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in tensors {
        if name.is_empty() {
            return Err(invalid("checkpoint tensor names must be nonempty"));
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.write_all(&0u32.to_le_bytes())?;
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> io::Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(invalid("bad checkpoint magic"));
    }
    let mut out = Vec::new();
    loop {
        let len = read_u32(&mut r)? as usize;
        if len == 0 {
            break;
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("tensor name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::c(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| invalid(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::<f32>::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("w", &t)]).unwrap();
        let mut expected = b"DGTL0001".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"w");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        expected.extend_from_slice(&0u32.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn round_trip() {
        let a = Tensor::<f32>::matrix(2, 3, vec![0.5, 1.5, -3.0, 4.0, 5.25, 6.0]).unwrap();
        let b = Tensor::<f32>::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("layer0.w", &a), ("bias", &b)]).unwrap();
        let back: Vec<(String, Tensor<f32>)> = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, vec![("layer0.w".to_string(), a), ("bias".to_string(), b)]);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(read_checkpoint::<f32, _>(&b"DGTL0002\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn rejects_truncated_file() {
        let t = Tensor::<f32>::scalar(1.0);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("x", &t)]).unwrap();
        buf.truncate(buf.len() - 6);
        assert!(read_checkpoint::<f32, _>(&buf[..]).is_err());
    }
}
