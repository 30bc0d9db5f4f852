//! Bit-exact parameter snapshots.
//!
//! A snapshot is an ordered list of (name, values) pairs. Restoring one must
//! reproduce every parameter exactly (float equality, not tolerance), which
//! is what makes episodic weight reset cheap to verify. The binary format
//! stores raw little-endian f64 words so round-trips preserve every bit,
//! NaN payloads included.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type GradientMap = BTreeMap<String, Vec<f64>>;

const SNAPSHOT_MAGIC: &[u8; 8] = b"AETTASNP";
const SNAPSHOT_VERSION: u32 = 1;

/// Ordered (parameter-name, values) pairs captured from a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSnapshot {
    entries: Vec<(String, Vec<f64>)>,
}

impl ParameterSnapshot {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Self {
        ParameterSnapshot { entries }
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Compare the name sets of two snapshots; error lists what is missing
    /// from `self` relative to `other` and what is extra.
    pub fn check_same_names(&self, other: &ParameterSnapshot) -> Result<()> {
        let mine: Vec<&str> = self.names().collect();
        let theirs: Vec<&str> = other.names().collect();
        let missing: Vec<String> = theirs
            .iter()
            .filter(|n| !mine.contains(n))
            .map(|n| n.to_string())
            .collect();
        let extra: Vec<String> = mine
            .iter()
            .filter(|n| !theirs.contains(n))
            .map(|n| n.to_string())
            .collect();
        if missing.is_empty() && extra.is_empty() {
            Ok(())
        } else {
            Err(Error::NameSetMismatch { missing, extra })
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let ctx = "writing snapshot";
        let io = |e| Error::io(ctx, e);
        w.write_all(SNAPSHOT_MAGIC).map_err(io)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())
            .map_err(io)?;
        for (name, values) in &self.entries {
            w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(values.len() as u64).to_le_bytes())
                .map_err(io)?;
            for v in values {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, path: &str) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: path.to_string(),
            message,
        };
        let io = |e| Error::io(format!("reading snapshot {path}"), e);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(bad("not a parameter snapshot (bad magic)".into()));
        }
        let version = read_u32(r).map_err(io)?;
        if version != SNAPSHOT_VERSION {
            return Err(bad(format!("unsupported snapshot version {version}")));
        }
        let count = read_u64(r).map_err(io)? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = read_u64(r).map_err(io)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(io)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| bad("parameter name is not valid UTF-8".into()))?;
            let len = read_u64(r).map_err(io)? as usize;
            let mut values = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf).map_err(io)?;
                values.push(f64::from_le_bytes(buf));
            }
            entries.push((name, values));
        }
        Ok(ParameterSnapshot { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_to(&mut file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Self::read_from(&mut file, &path.display().to_string())
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
