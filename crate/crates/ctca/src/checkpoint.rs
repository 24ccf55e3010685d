//! Binary named-tensor files.
//!
//! Layout (little-endian): magic `CTCA`, format version `u32`, tensor count
//! `u32`, then per tensor: name length `u32`, UTF-8 name, rank `u32`, dims
//! as `u64`, payload as `f64`. A CRC32 of everything before it closes the
//! file.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use ctca_core::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"CTCA";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &ParamStore) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors.iter() {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&b);
    b.extend_from_slice(&crc.to_le_bytes());
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> anyhow::Result<&'a [u8]> {
        ensure!(self.pos + n <= self.buf.len(), "truncated at byte {}", self.pos);
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> anyhow::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> anyhow::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }
}

pub fn decode(bytes: &[u8]) -> anyhow::Result<ParamStore> {
    ensure!(bytes.len() >= 16, "file too short for a checkpoint");
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into()?);
    let actual = crc32fast::hash(body);
    ensure!(stored == actual, "CRC mismatch: stored {stored:08x}, computed {actual:08x}");
    let mut r = Reader { buf: body, pos: 0 };
    ensure!(r.take(4)? == MAGIC, "bad magic, not a CTCA file");
    let version = r.u32()?;
    ensure!(version == VERSION, "unsupported format version {version}");
    let count = r.u32()?;
    let mut out = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).context("tensor name is not UTF-8")?.to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<anyhow::Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        ensure!(numel * 8 <= body.len(), "tensor {name} claims {numel} values");
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).with_context(|| format!("tensor {name}"))?;
        out.insert(&name, t);
    }
    if r.pos != body.len() {
        bail!("{} trailing bytes after the tensor table", body.len() - r.pos);
    }
    Ok(out)
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().context("output path has no file name")?.to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn save(path: &Path, tensors: &ParamStore) -> anyhow::Result<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load(path: &Path) -> anyhow::Result<ParamStore> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("loading {}", path.display()))
}

/// Stores UTF-8 text as a rank-1 tensor of byte values; empty text is a
/// single zero.
pub fn text_tensor(s: &str) -> Tensor {
    let mut data: Vec<f64> = s.bytes().map(f64::from).collect();
    if data.is_empty() {
        data.push(0.0);
    }
    let n = data.len();
    Tensor::new(vec![n], data).expect("non-empty")
}

pub fn tensor_text(t: &Tensor) -> anyhow::Result<String> {
    let bytes = t
        .data()
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| {
            ensure!((1.0..=255.0).contains(&v) && v.fract() == 0.0, "tensor does not hold text");
            Ok(v as u8)
        })
        .collect::<anyhow::Result<Vec<u8>>>()?;
    Ok(String::from_utf8(bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]).unwrap());
        p.insert("meta.x", Tensor::scalar(f64::NAN));
        p
    }

    #[test]
    fn round_trip_preserves_bits() {
        let p = sample();
        let q = decode(&encode(&p)).unwrap();
        assert_eq!(p.get("a.w").unwrap(), q.get("a.w").unwrap());
        assert!(q.get("meta.x").unwrap().item().is_nan());
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = encode(&sample());
        b[20] ^= 1;
        assert!(decode(&b).unwrap_err().to_string().contains("CRC"));
        let mut b = encode(&sample());
        b[0] = b'X';
        let n = b.len();
        let crc = crc32fast::hash(&b[..n - 4]);
        b[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(decode(&b).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn text_round_trip() {
        assert_eq!(tensor_text(&text_tensor("alpha = 0.5\n")).unwrap(), "alpha = 0.5\n");
        assert_eq!(tensor_text(&text_tensor("")).unwrap(), "");
    }
}
