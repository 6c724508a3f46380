use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MMK1";

/// Ordered named real tensors in the `MMK1` layout: the magic, then per entry
/// `u32` name length, name bytes, `u64` element count and raw little-endian
/// `f64` values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends, or replaces an existing entry of the same name in place.
    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = values,
            None => self.entries.push((name, values)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.get(name)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint has no entry `{name}`")))
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies every entry under `prefix` into this checkpoint.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Checkpoint) {
        for (n, v) in &other.entries {
            self.insert(format!("{prefix}{n}"), v.clone());
        }
    }

    /// Entries whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Checkpoint {
        Checkpoint {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, v)| n.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, values) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("missing MMK1 magic".into()));
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let mut ckpt = Checkpoint::new();
        while cur.pos < bytes.len() {
            let len = u32::from_le_bytes(cur.take(4, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(len, "name")?)
                .map_err(|_| Error::Corrupt("non-UTF-8 entry name".into()))?
                .to_string();
            let count = u64::from_le_bytes(cur.take(8, "element count")?.try_into().unwrap()) as usize;
            let nbytes = count
                .checked_mul(8)
                .ok_or_else(|| Error::Corrupt("element count overflow".into()))?;
            let values = cur
                .take(nbytes, "values")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ckpt.entries.push((name, values));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
