//! SRM1 container: magic, version, checksummed JSON metadata and named f32
//! sections, each with its own CRC32, followed by a CRC32 of the whole file.
//!
//! ```text
//! "SRM1" u32 version
//! u32 meta_len  meta (JSON)  u32 crc(meta)
//! u32 n_sections
//! per section: u16 name_len name  u8 ndim  u64 dims[ndim]  u64 payload_len  u32 crc(payload)  payload
//! u32 crc(everything above)
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeSet;
use std::path::Path;

use smartreply_core::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SRM1";
pub const VERSION: u32 = 2;
/// Oldest format this reader accepts.
pub const MIN_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("not an SRM1 file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (this reader handles {MIN_VERSION}..={VERSION})")]
    Version { found: u32 },
    #[error("truncated file while reading {0}")]
    Truncated(String),
    #[error("checksum mismatch in {0}")]
    Checksum(String),
    #[error("duplicate section {0}")]
    DuplicateSection(String),
    #[error("missing section {0}")]
    MissingSection(String),
    #[error("unknown section {0}")]
    UnknownSection(String),
    #[error("section {name}: {reason}")]
    BadSection { name: String, reason: String },
    #[error("metadata: {0}")]
    Meta(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelContainer {
    pub version: u32,
    pub meta: serde_json::Value,
    pub sections: Vec<Section>,
}

impl ModelContainer {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            version: VERSION,
            meta,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor) -> Result<(), PersistError> {
        if self.get(name).is_some() {
            return Err(PersistError::DuplicateSection(name.into()));
        }
        self.sections.push(Section {
            name: name.into(),
            tensor,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.sections.iter().find(|s| s.name == name).map(|s| &s.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, PersistError> {
        self.get(name).ok_or_else(|| PersistError::MissingSection(name.into()))
    }

    /// Rejects sections outside `allowed`.
    pub fn check_known(&self, allowed: &[&str]) -> Result<(), PersistError> {
        for s in &self.sections {
            if !allowed.contains(&s.name.as_str()) {
                return Err(PersistError::UnknownSection(s.name.clone()));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PersistError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| PersistError::Meta(e.to_string()))?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&crc32fast::hash(&meta).to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        let mut seen = BTreeSet::new();
        for s in &self.sections {
            if !seen.insert(s.name.as_str()) {
                return Err(PersistError::DuplicateSection(s.name.clone()));
            }
            let name = s.name.as_bytes();
            let shape = s.tensor.shape();
            if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
                return Err(PersistError::BadSection {
                    name: s.name.clone(),
                    reason: "name or rank too large".into(),
                });
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let payload: Vec<u8> = s.tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PersistError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "header")? != MAGIC {
            return Err(PersistError::BadMagic);
        }
        let version = r.u32("header")?;
        if !(MIN_VERSION..=VERSION).contains(&version) {
            return Err(PersistError::Version { found: version });
        }
        let meta_len = r.u32("metadata")? as usize;
        let meta_bytes = r.take(meta_len, "metadata")?;
        if r.u32("metadata")? != crc32fast::hash(meta_bytes) {
            return Err(PersistError::Checksum("metadata".into()));
        }
        let meta = serde_json::from_slice(meta_bytes).map_err(|e| PersistError::Meta(e.to_string()))?;
        let n = r.u32("section table")?;
        let mut sections = Vec::new();
        let mut seen = BTreeSet::new();
        for i in 0..n {
            let at = format!("section #{i}");
            let name_len = r.u16(&at)? as usize;
            let name = String::from_utf8(r.take(name_len, &at)?.to_vec()).map_err(|_| PersistError::BadSection {
                name: at.clone(),
                reason: "name is not UTF-8".into(),
            })?;
            let ndim = r.u8(&name)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64(&name)? as usize);
            }
            let len = r.u64(&name)? as usize;
            let crc = r.u32(&name)?;
            let payload = r.take(len, &name)?;
            if crc32fast::hash(payload) != crc {
                return Err(PersistError::Checksum(name));
            }
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if count.and_then(|c| c.checked_mul(4)) != Some(len) {
                return Err(PersistError::BadSection {
                    name,
                    reason: format!("shape {shape:?} does not match {len} payload bytes"),
                });
            }
            if !seen.insert(name.clone()) {
                return Err(PersistError::DuplicateSection(name));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(shape, data).expect("checked length");
            sections.push(Section { name, tensor });
        }
        let body_end = r.pos;
        let file_crc = r.u32("file checksum")?;
        if crc32fast::hash(&bytes[..body_end]) != file_crc {
            return Err(PersistError::Checksum("file".into()));
        }
        if r.pos != bytes.len() {
            return Err(PersistError::BadSection {
                name: "trailer".into(),
                reason: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            version,
            meta,
            sections,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, at: &str) -> Result<&'a [u8], PersistError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PersistError::Truncated(at.into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, at: &str) -> Result<u8, PersistError> {
        Ok(self.take(1, at)?[0])
    }

    fn u16(&mut self, at: &str) -> Result<u16, PersistError> {
        Ok(u16::from_le_bytes(self.take(2, at)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, at: &str) -> Result<u32, PersistError> {
        Ok(u32::from_le_bytes(self.take(4, at)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, at: &str) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8, at)?.try_into().expect("8 bytes")))
    }
}

/// Writes through a temporary sibling and renames, so a failed save never
/// leaves a half-written container behind.
pub fn save_model(path: &Path, container: &ModelContainer) -> Result<(), PersistError> {
    let bytes = container.to_bytes()?;
    let io = |source| PersistError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("srm.tmp");
    std::fs::write(&tmp, &bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_model(path: &Path) -> Result<ModelContainer, PersistError> {
    let bytes = std::fs::read(path).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ModelContainer::from_bytes(&bytes)
}
