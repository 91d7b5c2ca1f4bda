//! Binary tensor container shared by corpus samples and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CMTF"
//! version u32            (= 1)
//! kind    [u8; 4]        b"SMPL" | b"CKPT"
//! meta    u32 len + UTF-8 line record
//! count   u32
//! count × { name: u32 len + UTF-8, rank: u32, dims: rank × u64, data: numel × f64 }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::records::Record;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMTF";
pub const VERSION: u32 = 1;
pub const KIND_SAMPLE: &[u8; 4] = b"SMPL";
pub const KIND_CHECKPOINT: &[u8; 4] = b"CKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: [u8; 4],
    pub meta: Record,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new(kind: &[u8; 4], meta: Record) -> Self {
        TensorFile {
            kind: *kind,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind);
        put_str(&mut out, &self.meta.to_line());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let mut kind = [0u8; 4];
        kind.copy_from_slice(r.take(4)?);
        let meta = Record::parse_line(&r.string()?).map_err(|e| e.to_string())?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| "dimension overflow")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or("tensor size overflow")?;
            let raw = r.take(numel.checked_mul(8).ok_or("tensor size overflow")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(TensorFile { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, kind: &[u8; 4]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file = TensorFile::decode(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })?;
        if &file.kind != kind {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "expected kind {}, found {}",
                    String::from_utf8_lossy(kind),
                    String::from_utf8_lossy(&file.kind)
                ),
            });
        }
        Ok(file)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut meta = Record::new();
        meta.push("a", 1);
        let mut f = TensorFile::new(KIND_SAMPLE, meta);
        f.push("x", &Tensor::new(&[2], vec![1.0, -0.5]).unwrap());
        let b = f.encode();
        assert_eq!(&b[..4], b"CMTF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(&b[8..12], b"SMPL");
        assert_eq!(&b[b.len() - 8..], &(-0.5f64).to_le_bytes());
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut f = TensorFile::new(KIND_CHECKPOINT, Record::new());
        f.push("w", &Tensor::zeros(&[3, 2]));
        let b = f.encode();
        assert!(TensorFile::decode(&b[..b.len() - 1]).is_err());
        assert!(TensorFile::decode(b"XXXX").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity(
            dims in proptest::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&dims, 3.0, &mut rng);
            let mut meta = Record::new();
            meta.push("seed", seed);
            let mut f = TensorFile::new(KIND_CHECKPOINT, meta);
            f.push("t", &t);
            let bytes = f.encode();
            let back = TensorFile::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &f);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
