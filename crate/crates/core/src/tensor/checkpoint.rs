//! `PTCK` parameter checkpoints.
//!
//! Little-endian layout: magic `PTCK`, version `u32`, then one record per
//! parameter until end of file: name length `u32`, UTF-8 name, rank `u32`,
//! extents `u64` each, raw `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PTCK";
pub const VERSION: u32 = 1;

/// Named parameters in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        let mut t = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        t.set_requires_grad(false);
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies `name` into `dst`, failing on a missing entry or a shape change.
    pub fn restore(&self, name: &str, dst: &mut Tensor) -> Result<()> {
        let src = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no parameter `{name}`")))?;
        if src.shape() != dst.shape() {
            return Err(Error::Format(format!(
                "parameter `{name}` has shape {:?} in checkpoint, network expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut ck = Checkpoint::new();
        while cur.pos < bytes.len() {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::Format("extent overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ck.entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::read_from(BufReader::new(File::open(path)?))
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated file: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("a.weight", &Tensor::new(vec![2, 3], (0..6).map(|v| v as f64 / 7.0).collect()).unwrap());
        ck.push("a.bias", &Tensor::new(vec![2], vec![-0.0, f64::MIN_POSITIVE]).unwrap());
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + (4 + 8 + 4 + 16 + 48) + (4 + 6 + 4 + 8 + 16));
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&bad[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::read_from(&bad[..]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::read_from(&buf[..buf.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn restore_checks_shapes() {
        let ck = sample();
        let mut t = Tensor::zeros(&[2, 3]);
        ck.restore("a.weight", &mut t).unwrap();
        assert_eq!(t.data()[1], 1.0 / 7.0);
        let mut wrong = Tensor::zeros(&[3, 2]);
        assert!(ck.restore("a.weight", &mut wrong).is_err());
        assert!(ck.restore("missing", &mut wrong).is_err());
    }
}
