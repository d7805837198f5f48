//! Named-tensor container used for checkpoints and single-task artifacts.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MTOP1" | kind: u8 | pairs: u32 | (key, value)* | tensors: u32 | (id, rank: u32, dims: u64*, f32*)*
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8 bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MTOP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerKind {
    Checkpoint,
    SingleTask,
}

impl ContainerKind {
    fn tag(self) -> u8 {
        match self {
            Self::Checkpoint => 0,
            Self::SingleTask => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::Checkpoint),
            1 => Ok(Self::SingleTask),
            other => Err(Error::Checkpoint(format!("unknown container kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    /// Ordered key/value configuration pairs.
    pub config: Vec<(String, String)>,
    /// Ordered named tensors.
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: ContainerKind) -> Self {
        Self {
            kind,
            config: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.config.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Looks up `key` and parses it, failing with a message naming the key.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing config key '{key}'")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value '{raw}' for '{key}'")))
    }

    pub fn tensor(&self, id: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == id).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(payload + 1024);
        out.extend_from_slice(MAGIC);
        out.push(self.kind.tag());
        put_u32(&mut out, self.config.len());
        for (k, v) in &self.config {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len());
        for (id, t) in &self.tensors {
            put_str(&mut out, id);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint(
                "bad magic; not an MTOP1 container".into(),
            ));
        }
        let kind = ContainerKind::from_tag(r.take(1)?[0])?;
        let pairs = r.u32()?;
        let mut config = Vec::with_capacity(pairs.min(1024));
        for _ in 0..pairs {
            let k = r.string()?;
            let v = r.string()?;
            config.push((k, v));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let id = r.string()?;
            let rank = r.u32()?;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                let d = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                shape.push(
                    usize::try_from(d)
                        .map_err(|_| Error::Checkpoint(format!("dimension {d} too large")))?,
                );
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{id}' too large")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((id, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            kind,
            config,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, n: usize) {
    let n = u32::try_from(n).expect("container field exceeds u32");
    out.extend_from_slice(&n.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(ContainerKind::SingleTask);
        c.set("task.name", "sports");
        c.set("encoder.hidden_dim", 8);
        c.tensors.push((
            "a".into(),
            Tensor::from_rows(&[vec![1.0, -0.0], vec![f32::MIN_POSITIVE, 3.5]]).unwrap(),
        ));
        c.tensors.push(("b".into(), Tensor::scalar(7.25)));
        c
    }

    #[test]
    fn round_trip_keeps_negative_zero() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(
            back.tensor("a").unwrap().data()[1].to_bits(),
            (-0.0f32).to_bits()
        );
        assert_eq!(back.to_bytes(), c.to_bytes());
        assert_eq!(back.parse::<usize>("encoder.hidden_dim").unwrap(), 8);
    }

    #[test]
    fn corrupt_inputs_fail() {
        let bytes = sample().to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn byte_exact_round_trip(
            keys in prop::collection::vec(("[a-z.]{1,12}", ".{0,16}"), 0..5),
            tensors in prop::collection::vec(
                (
                    "[a-z]{1,8}",
                    prop::collection::vec(1usize..4, 0..3)
                        .prop_flat_map(|shape| {
                            let n = shape.iter().product::<usize>();
                            (Just(shape), prop::collection::vec(any::<u32>(), n))
                        }),
                ),
                0..4,
            ),
        ) {
            let mut c = Container::new(ContainerKind::Checkpoint);
            c.config = keys;
            c.tensors = tensors
                .into_iter()
                .map(|(id, (shape, bits))| {
                    (id, Tensor::new(shape, bits.into_iter().map(f32::from_bits).collect()).unwrap())
                })
                .collect();
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
