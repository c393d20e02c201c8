//! Named collection of tensor containers in one file.
//!
//! Layout (little-endian): magic `FTSA`, version byte 1, three zero bytes,
//! u32 entry count, then per entry a u32 name length, the UTF-8 name, a u64
//! record length and the embedded `FTSR` container. Entry order is preserved
//! so encoding is deterministic.

use std::fs;
use std::path::Path;

use crate::error::{Error, ParseError, Result};
use crate::featurestore::container::TensorFile;

pub const ARCHIVE_MAGIC: [u8; 4] = *b"FTSA";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, TensorFile)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends or replaces an entry.
    pub fn insert(&mut self, name: impl Into<String>, tensor: TensorFile) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = tensor;
        } else {
            self.entries.push((name, tensor));
        }
    }

    pub fn get(&self, name: &str) -> Result<&TensorFile> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidConfig(format!("archive has no entry named {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Archive) {
        for (n, t) in &other.entries {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn sub_archive(&self, prefix: &str) -> Archive {
        Archive {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = ARCHIVE_MAGIC.to_vec();
        out.extend_from_slice(&[1, 0, 0, 0]);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let record = tensor.to_bytes();
            out.extend_from_slice(&(record.len() as u64).to_le_bytes());
            out.extend_from_slice(&record);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ParseError> {
        let bad = |offset, reason: &str| ParseError::BadArchive {
            offset,
            reason: reason.to_string(),
        };
        let take = |offset: usize, n: usize, what: &'static str| {
            bytes.get(offset..offset + n).ok_or(ParseError::Truncated {
                what,
                offset,
                needed: n,
                available: bytes.len().saturating_sub(offset),
            })
        };

        if take(0, 4, "archive magic")? != ARCHIVE_MAGIC {
            return Err(bad(0, "expected \"FTSA\" magic"));
        }
        let head = take(4, 4, "archive header")?;
        if head[0] != 1 {
            return Err(ParseError::UnsupportedVersion {
                offset: 4,
                version: head[0],
            });
        }
        if head[1..] != [0, 0, 0] {
            return Err(bad(5, "nonzero padding"));
        }
        let count = u32::from_le_bytes(take(8, 4, "entry count")?.try_into().unwrap()) as usize;
        let mut cursor = 12;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len =
                u32::from_le_bytes(take(cursor, 4, "name length")?.try_into().unwrap()) as usize;
            cursor += 4;
            let name = std::str::from_utf8(take(cursor, name_len, "entry name")?)
                .map_err(|_| bad(cursor, "entry name is not UTF-8"))?
                .to_string();
            cursor += name_len;
            let record_len =
                u64::from_le_bytes(take(cursor, 8, "record length")?.try_into().unwrap()) as usize;
            cursor += 8;
            let record = take(cursor, record_len, "record")?;
            let (tensor, used) = TensorFile::parse_prefix(record, cursor)?;
            if used != record_len {
                return Err(bad(cursor, "record length disagrees with its container"));
            }
            cursor += record_len;
            entries.push((name, tensor));
        }
        if cursor != bytes.len() {
            return Err(ParseError::TrailingBytes {
                offset: cursor,
                count: bytes.len() - cursor,
            });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes).map_err(|source| Error::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}
