//! Named parameter storage and the checkpoint container.
//!
//! Container layout (all text lines end in `\n`):
//!
//! ```text
//! SCENFLOW-CKPT 1
//! count <n>
//! <name>\t<d0,d1,..|->\t<byte offset>\t<element count>     (n lines)
//! END
//! <payload: every array as little-endian f64, in header order>
//! ```
//!
//! Offsets are relative to the first payload byte. A scalar shape is
//! written as `-`.

use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::tape::numel;

const MAGIC: &str = "SCENFLOW-CKPT 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(numel(shape), value.len(), "parameter {name}: shape/value mismatch");
        assert!(
            !name.contains(['\t', '\n']),
            "parameter names cannot contain tabs or newlines"
        );
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\ncount {}\n", self.entries.len());
        let mut offset = 0usize;
        for e in &self.entries {
            let dims = if e.shape.is_empty() {
                "-".to_string()
            } else {
                e.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            };
            header.push_str(&format!("{}\t{}\t{}\t{}\n", e.name, dims, offset, e.value.len()));
            offset += e.value.len() * 8;
        }
        header.push_str("END\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for e in &self.entries {
            for v in &e.value {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TensorError::Checkpoint(m.to_string());
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not utf-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("bad magic line"));
        }
        let count: usize = next_line()?
            .strip_prefix("count ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("bad count line"))?;
        let mut specs = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad("bad entry line"));
            }
            let shape: Vec<usize> = if fields[1] == "-" {
                vec![]
            } else {
                fields[1]
                    .split(',')
                    .map(|d| d.parse().map_err(|_| bad("bad dimension")))
                    .collect::<Result<_>>()?
            };
            let offset: usize = fields[2].parse().map_err(|_| bad("bad offset"))?;
            let n: usize = fields[3].parse().map_err(|_| bad("bad length"))?;
            if numel(&shape) != n {
                return Err(bad("shape and length disagree"));
            }
            specs.push((fields[0].to_string(), shape, offset, n));
        }
        if next_line()? != "END" {
            return Err(bad("missing END line"));
        }
        let payload = &bytes[pos..];
        let mut store = ParamStore::new();
        for (name, shape, offset, n) in specs {
            let raw = payload
                .get(offset..offset + n * 8)
                .ok_or_else(|| bad("payload too short"))?;
            let value = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.find(&name).is_some() {
                return Err(bad("duplicate entry name"));
            }
            store.add(name, &shape, value);
        }
        Ok(store)
    }

    /// SHA-256 of the serialized container, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Copies values from `other` for every entry with a matching name and shape.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .find(&e.name)
                .map(|id| other.entry(id))
                .ok_or_else(|| TensorError::Checkpoint(format!("missing entry {}", e.name)))?;
            if src.shape != e.shape {
                return Err(TensorError::Checkpoint(format!(
                    "entry {} has shape {:?}, expected {:?}",
                    e.name, src.shape, e.shape
                )));
            }
            e.value.copy_from_slice(&src.value);
        }
        Ok(())
    }
}
