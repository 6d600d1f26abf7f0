//! Named-parameter archives: a little-endian `u64` manifest length, the
//! JSON manifest, then every tensor as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "t2ldm-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Start in the payload, counted in values.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Tensors keyed `namespace:name` plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn add_store(&mut self, namespace: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{namespace}:{name}"), t.clone()));
        }
    }

    pub fn has_namespace(&self, namespace: &str) -> bool {
        let prefix = format!("{namespace}:");
        self.tensors.iter().any(|(n, _)| n.starts_with(&prefix))
    }

    /// Overwrites every parameter of `store` from `namespace`; all must be
    /// present with matching shapes.
    pub fn load_store(&self, namespace: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let key = format!("{namespace}:{}", store.name(id));
            let (_, t) = self.tensors.iter().find(|(n, _)| *n == key).ok_or_else(|| format_err(format!("checkpoint has no tensor '{key}'")))?;
            if t.shape != store.get(id).shape {
                return Err(Error::ShapeMismatch { expected: store.get(id).shape.clone(), got: t.shape.clone() });
            }
            *store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| format_err(format!("checkpoint metadata lacks '{key}'")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry { name: name.clone(), shape: t.shape.clone(), offset };
                offset += t.numel();
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest { version: CHECKPOINT_VERSION.into(), meta: self.meta.clone(), tensors })?;
        let mut out = Vec::with_capacity(8 + manifest.len() + 8 * offset);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head: [u8; 8] = bytes.get(..8).and_then(|b| b.try_into().ok()).ok_or_else(|| format_err("checkpoint shorter than its header"))?;
        let len = u64::from_le_bytes(head) as usize;
        let body = bytes.get(8..8usize.saturating_add(len)).ok_or_else(|| format_err("truncated checkpoint manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version '{}'", manifest.version)));
        }
        let payload = &bytes[8 + len..];
        if !payload.len().is_multiple_of(8) {
            return Err(format_err("checkpoint payload is not a whole number of values"));
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = values.get(e.offset..e.offset + n).ok_or_else(|| format_err(format!("tensor '{}' runs past the payload", e.name)))?;
            tensors.push((e.name, Tensor::new(e.shape, data.to_vec())));
        }
        Ok(Self { meta: manifest.meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(crate::error::at_path(path))?)
    }
}
