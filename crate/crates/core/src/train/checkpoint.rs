//! The `CCLP` binary checkpoint format.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "CCLP" | version | array count
//! per array: name length | UTF-8 name | rank | dims... | f32 LE values
//! config length | UTF-8 JSON config
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CCLP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Tensor)>,
    pub config: String,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn new(config: String) -> Self {
        Checkpoint {
            arrays: Vec::new(),
            config,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.push((name.into(), t.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name:?}")))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.arrays.iter().any(|(n, _)| n.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.arrays.len())?;
        for (name, t) in &self.arrays {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        put_u32(&mut out, self.config.len())?;
        out.extend_from_slice(self.config.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("bad magic (not a CCLP file)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string("array name")?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("array too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("array {name:?}: {e}")))?;
            arrays.push((name, t));
        }
        let config = r.string("config")?;
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { arrays, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(r#"{"seed":3}"#.into());
        c.push(
            "a",
            &Tensor::matrix(2, 3, vec![0.1, -2.5, 3.0, 1e-8, 7.0, 0.333]).unwrap(),
        );
        c.push("b.bias", &Tensor::vector(vec![1.0]));
        c.push("s", &Tensor::scalar(4.5));
        c
    }

    #[test]
    fn round_trip_is_exact_at_f32() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CCLP");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, c.config);
        for ((n1, t1), (n2, t2)) in c.arrays.iter().zip(&back.arrays) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!((*a as f32) as f64, *b);
            }
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        bytes[4] = 9;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let good = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 3]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
