//! `DFT1` parameter container: magic, tensor count, then per tensor the name
//! length and UTF-8 name, rank, dims (u64 LE) and raw f32 LE data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{io_err, Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DFT1";

pub fn write_tensors<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.bytes.len() < n {
            return None;
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Some(head)
    }

    fn u64(&mut self) -> Option<usize> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let truncated = || bad("truncated");
    let mut r = Reader { bytes: &bytes };
    if r.take(4) != Some(TENSOR_MAGIC.as_slice()) {
        return Err(bad("missing DFT1 magic"));
    }
    let count = r.u64().ok_or_else(truncated)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u64().ok_or_else(truncated)?;
        let name = r.take(name_len).ok_or_else(truncated)?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
        let rank = r.u64().ok_or_else(truncated)?;
        let shape = (0..rank)
            .map(|_| r.u64().ok_or_else(truncated))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)
            .ok_or_else(truncated)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap();
        let b = Tensor::new(vec![4], vec![0.25; 4]).unwrap();
        write_tensors(&path, [("a", &a), ("bias.b", &b)]).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(&raw[..4], b"DFT1");
        let back = read_tensors(&path).unwrap();
        assert_eq!(back["a"], a);
        assert_eq!(back["bias.b"], b);

        std::fs::write(&path, &raw[..raw.len() - 2]).unwrap();
        assert!(read_tensors(&path).is_err());
    }
}
