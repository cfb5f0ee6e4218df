//! Binary tensor container shared by backbone, head, PET and state checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "LAECKPT\0"
//! u32       format version
//! u64       header length H
//! H bytes   UTF-8 JSON header {kind, meta, entries: [{name, shape}]}
//! ...       f64 values of every entry, in header order
//! ```
//!
//! Values are stored bit-for-bit, so a save/load round trip is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"LAECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: &Tensor) {
        self.tensors.push((name.into(), tensor.clone().with_requires_grad(false)));
    }

    /// Appends every tensor of `other` under `prefix/`.
    pub fn nest(&mut self, prefix: &str, other: Bundle) {
        for (name, t) in other.tensors {
            self.tensors.push((format!("{prefix}/{name}"), t));
        }
    }

    /// Tensors stored under `prefix/`, with the prefix stripped.
    pub fn sub(&self, prefix: &str, kind: &str, meta: serde_json::Value) -> Bundle {
        let p = format!("{prefix}/");
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect();
        Bundle { kind: kind.to_string(), meta, tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}` in {} checkpoint", self.kind)))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            entries: self.tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header is plain data");
        let values: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut pos = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes to a sibling temp file and renames it over `path`, so readers never
/// observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// SHA-256 over shapes and raw little-endian values, hex encoded.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update((t.rank() as u64).to_le_bytes());
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bundle {
        let mut b = Bundle::new("demo", serde_json::json!({"k": 3}));
        b.push("a", &Tensor::new(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        b.push("s", &Tensor::scalar(0.1));
        b
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let b = sample();
        let back = Bundle::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back.kind, "demo");
        assert_eq!(back.meta, b.meta);
        for ((n1, t1), (n2, t2)) in b.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(Bundle::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Bundle::from_bytes(&bad).is_err());
    }

    #[test]
    fn checksum_sees_shape_and_sign_of_zero() {
        let a = Tensor::new(&[2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::new(&[2], vec![-0.0, 1.0]).unwrap();
        let c = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert_ne!(checksum([&a]), checksum([&b]));
        assert_ne!(checksum([&a]), checksum([&c]));
        assert_eq!(checksum([&a]), checksum([&a.clone()]));
    }

    #[test]
    fn atomic_save_and_nesting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut outer = Bundle::new("outer", serde_json::Value::Null);
        outer.nest("inner", sample());
        outer.save(&path).unwrap();
        let back = Bundle::load(&path).unwrap();
        let inner = back.sub("inner", "demo", serde_json::Value::Null);
        assert!(inner.get("a").unwrap().bit_eq(sample().get("a").unwrap()));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
