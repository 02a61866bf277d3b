//! The parameter bundle exchanged between clients and server, and its wire
//! format: a flat JSON document of named entries with base64-encoded
//! little-endian f64 payloads, byte-stable for a given bundle.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

/// Ordered name → tensor map; the only artifact that ever crosses a client
/// boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBundle {
    pub schema_version: u32,
    pub entries: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct WireEntry {
    name: String,
    shape: Vec<usize>,
    values: String,
}

#[derive(Serialize, Deserialize)]
struct WireBundle {
    schema_version: u32,
    entries: Vec<WireEntry>,
}

impl ParameterBundle {
    /// Snapshot every parameter value of a store.
    pub fn from_store(store: &ParamStore) -> Self {
        let entries = store
            .iter_named()
            .map(|(name, p)| (name.to_string(), p.value.clone()))
            .collect();
        ParameterBundle {
            schema_version: BUNDLE_SCHEMA_VERSION,
            entries,
        }
    }

    /// Write every entry back into a store. The key sets and shapes must
    /// match exactly; mismatches are protocol errors naming the keys.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut missing = Vec::new();
        for (name, tensor) in &self.entries {
            match store.lookup(name) {
                None => missing.push(name.clone()),
                Some(id) => {
                    if store.value(id).shape() != tensor.shape() {
                        return Err(Error::Protocol(format!(
                            "bundle entry `{name}` has shape {:?}, store expects {:?}",
                            tensor.shape(),
                            store.value(id).shape()
                        )));
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Protocol(format!(
                "bundle carries unknown parameters: {missing:?}"
            )));
        }
        let extra: Vec<String> = store
            .iter_named()
            .filter(|(name, _)| !self.entries.contains_key(*name))
            .map(|(name, _)| name.to_string())
            .collect();
        if !extra.is_empty() {
            return Err(Error::Protocol(format!(
                "bundle is missing parameters: {extra:?}"
            )));
        }
        for (name, tensor) in &self.entries {
            let id = store.lookup(name).expect("checked above");
            *store.value_mut(id) = tensor.clone();
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn to_json(&self) -> Result<String> {
        let wire = WireBundle {
            schema_version: self.schema_version,
            entries: self
                .entries
                .iter()
                .map(|(name, t)| {
                    let mut bytes = Vec::with_capacity(t.len() * 8);
                    for v in t.values() {
                        bytes.extend_from_slice(&v.to_le_bytes());
                    }
                    WireEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                        values: B64.encode(bytes),
                    }
                })
                .collect(),
        };
        Ok(serde_json::to_string(&wire)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let wire: WireBundle = serde_json::from_str(s)?;
        let mut entries = BTreeMap::new();
        for e in wire.entries {
            let bytes = B64
                .decode(e.values.as_bytes())
                .map_err(|err| Error::Protocol(format!("bad base64 in `{}`: {err}", e.name)))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Protocol(format!(
                    "entry `{}` payload is not a whole number of f64s",
                    e.name
                )));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let tensor = Tensor::new(e.shape, values)
                .map_err(|err| Error::Protocol(format!("entry `{}`: {err}", e.name)))?;
            entries.insert(e.name, tensor);
        }
        Ok(ParameterBundle {
            schema_version: wire.schema_version,
            entries,
        })
    }
}
