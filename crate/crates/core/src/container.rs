//! Versioned binary checkpoint container shared by every trained artifact:
//! a schema section describing named layers, a little-endian f64 payload,
//! and a string metadata section for provenance (config hashes, upstream
//! artifact hashes, conditioning vectors).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CONTAINER_MAGIC: &[u8; 8] = b"FNFMCKPT";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDesc {
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
}

impl LayerDesc {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Artifact kind tag, e.g. "forecaster", "weight-vae", "latent-cfm".
    pub kind: String,
    pub metadata: BTreeMap<String, String>,
    pub layers: Vec<LayerDesc>,
    pub payload: Vec<f64>,
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Artifact("checkpoint truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Artifact(format!("checkpoint string not utf8: {e}")))
    }
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            metadata: BTreeMap::new(),
            layers: Vec::new(),
            payload: Vec::new(),
        }
    }

    /// Capture a parameter store: one schema layer per named tensor, payload
    /// in store order.
    pub fn from_store(kind: &str, store: &ParamStore) -> Self {
        let mut ckpt = Checkpoint::new(kind);
        for name in store.names() {
            let t = store.get(name).unwrap();
            ckpt.layers.push(LayerDesc {
                name: name.to_string(),
                kind: "param".into(),
                shape: t.shape.clone(),
            });
        }
        ckpt.payload = store.flat_payload();
        ckpt
    }

    /// Write the payload back into a store with matching layer names/shapes.
    pub fn into_store(&self, store: &mut ParamStore) -> Result<()> {
        let names: Vec<&str> = store.names().iter().map(String::as_str).collect();
        if names.len() != self.layers.len() {
            return Err(Error::Artifact(format!(
                "checkpoint has {} layers, store expects {}",
                self.layers.len(),
                names.len()
            )));
        }
        for (layer, name) in self.layers.iter().zip(&names) {
            if layer.name != *name {
                return Err(Error::Artifact(format!(
                    "checkpoint layer '{}' does not match expected '{name}'",
                    layer.name
                )));
            }
            let t = store.get(name).unwrap();
            if t.shape != layer.shape {
                return Err(Error::Artifact(format!(
                    "layer '{name}' shape {:?} does not match expected {:?}",
                    layer.shape, t.shape
                )));
            }
        }
        store.load_flat_payload(&self.payload)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Artifact(format!("checkpoint missing metadata key '{key}'")))
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.layers.iter().map(LayerDesc::numel).sum();
        if total != self.payload.len() {
            return Err(Error::Artifact(format!(
                "schema spans {total} values but payload holds {}",
                self.payload.len()
            )));
        }
        if self.payload.iter().any(|v| !v.is_finite()) {
            return Err(Error::Artifact("checkpoint payload contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CONTAINER_MAGIC);
        buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        put_str(&mut buf, &self.kind);
        buf.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for layer in &self.layers {
            put_str(&mut buf, &layer.name);
            put_str(&mut buf, &layer.kind);
            buf.extend_from_slice(&(layer.shape.len() as u32).to_le_bytes());
            for d in &layer.shape {
                buf.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        for v in &self.payload {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CONTAINER_MAGIC {
            return Err(Error::Artifact("not a checkpoint container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported checkpoint version {version} (reader supports v{CONTAINER_VERSION})"
            )));
        }
        let kind = r.str()?;
        let n_meta = r.u32()? as usize;
        let mut metadata = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.str()?;
            let v = r.str()?;
            metadata.insert(k, v);
        }
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let name = r.str()?;
            let lkind = r.str()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            layers.push(LayerDesc { name, kind: lkind, shape });
        }
        let n_payload = r.u64()? as usize;
        let raw = r.take(n_payload * 8)?;
        let payload: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if r.pos != bytes.len() {
            return Err(Error::Artifact("trailing bytes after checkpoint payload".into()));
        }
        let ckpt = Checkpoint { kind, metadata, layers, payload };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Artifact(msg) => Error::Artifact(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Load and insist on a specific artifact kind.
    pub fn load_kind(path: &Path, kind: &str) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.kind != kind {
            return Err(Error::Artifact(format!(
                "{} holds a '{}' artifact, expected '{kind}'",
                path.display(),
                ckpt.kind
            )));
        }
        Ok(ckpt)
    }
}
