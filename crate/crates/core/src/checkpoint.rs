//! Self-describing checkpoint files.
//!
//! Layout: one line of JSON header terminated by `\n`, then the parameters
//! as little-endian `f32` arrays concatenated in the order the header lists
//! them. The header carries each tensor's name and shape, any normalization
//! statistics, and a hash of the run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Module;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub module: String,
    pub shapes: Vec<TensorEntry>,
    #[serde(default)]
    pub norm_stats: BTreeMap<String, Vec<f64>>,
    pub config_hash: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    /// One array per header entry.
    pub tensors: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_modules(module: &str, modules: &[&dyn Module], config_hash: &str) -> Self {
        let mut shapes = Vec::new();
        let mut tensors = Vec::new();
        for m in modules {
            for p in m.parameters() {
                shapes.push(TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec() });
                tensors.push(p.tensor.data().iter().map(|&v| v as f32).collect());
            }
        }
        Self {
            header: Header {
                format_version: FORMAT_VERSION,
                module: module.to_string(),
                shapes,
                norm_stats: BTreeMap::new(),
                config_hash: config_hash.to_string(),
                meta: BTreeMap::new(),
            },
            tensors,
        }
    }

    pub fn with_norm_stats(mut self, key: &str, values: &[f64]) -> Self {
        self.header.norm_stats.insert(key.to_string(), values.to_vec());
        self
    }

    pub fn with_meta(mut self, key: &str, value: serde_json::Value) -> Self {
        self.header.meta.insert(key.to_string(), value);
        self
    }

    pub fn norm_stats(&self, key: &str) -> Result<&[f64]> {
        self.header
            .norm_stats
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Format(format!("{} checkpoint has no `{key}` statistics", self.header.module)))
    }

    pub fn meta(&self, key: &str) -> Result<&serde_json::Value> {
        self.header
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("{} checkpoint has no `{key}` entry", self.header.module)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for (e, t) in self.header.shapes.iter().zip(&self.tensors) {
            if e.len() != t.len() {
                return Err(Error::Format(format!("tensor {} has {} values for shape {:?}", e.name, t.len(), e.shape)));
            }
            out.extend(t.iter().flat_map(|v| v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {}", header.format_version)));
        }
        let payload = &bytes[nl + 1..];
        let expected: usize = header.shapes.iter().map(|e| e.len() * 4).sum();
        if payload.len() != expected {
            return Err(Error::Format(format!("payload is {} bytes, header declares {expected}", payload.len())));
        }
        let mut tensors = Vec::with_capacity(header.shapes.len());
        let mut at = 0;
        for e in &header.shapes {
            let n = e.len() * 4;
            tensors.push(
                payload[at..at + n]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            );
            at += n;
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies every stored tensor into the module parameter of the same
    /// name. Every parameter must be present with a matching shape.
    pub fn restore(&self, module: &mut dyn Module) -> Result<()> {
        let index: BTreeMap<&str, usize> =
            self.header.shapes.iter().enumerate().map(|(i, e)| (e.name.as_str(), i)).collect();
        for p in module.parameters_mut() {
            let &i = index.get(p.name.as_str()).ok_or_else(|| {
                Error::Format(format!("{} checkpoint lacks parameter {}", self.header.module, p.name))
            })?;
            let entry = &self.header.shapes[i];
            if entry.shape != p.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    entry.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().iter_mut().zip(&self.tensors[i]).for_each(|(d, &s)| *d = s as f64);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::AdapterStack;

    #[test]
    fn round_trip_is_bit_exact_at_f32() {
        let mut a = AdapterStack::new(32, 1).unwrap();
        a.quantize();
        let ck = Checkpoint::from_modules("align", &[&a], "abc").with_norm_stats("mean", &[0.5, -1.25]);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut b = AdapterStack::new(32, 2).unwrap();
        back.restore(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.norm_stats("mean").unwrap(), &[0.5, -1.25]);
    }

    #[test]
    fn payload_length_follows_the_header() {
        let a = AdapterStack::new(32, 1).unwrap();
        let ck = Checkpoint::from_modules("align", &[&a], "h");
        let bytes = ck.to_bytes().unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let declared: usize = ck.header.shapes.iter().map(|e| e.len()).sum();
        assert_eq!(bytes.len() - nl - 1, declared * 4);
        assert_eq!(declared, a.num_parameters());
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"{}"), Err(Error::Format(_))));
    }

    #[test]
    fn restore_rejects_mismatched_models() {
        let a = AdapterStack::new(32, 1).unwrap();
        let ck = Checkpoint::from_modules("align", &[&a], "h");
        let mut wider = AdapterStack::new(40, 1).unwrap();
        assert!(matches!(ck.restore(&mut wider), Err(Error::Format(_))));
    }
}
