//! Modality encoders: a factor-grounded synthetic backend and a remote one
//! speaking a small JSON protocol.

pub mod factors;
pub mod render;
pub mod signature;
mod synthetic;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

pub use factors::{ChordType, FactorSpec, Tempo, Timbre};
pub use signature::{AcousticSignature, Thresholds};
pub use synthetic::{factor_features, music_features, SyntheticEncoder, FEATURE_DIM};

use crate::error::{Error, Result};
use crate::remote::RemoteClient;
use crate::signal::{wav_bytes, AudioClip};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Story,
    Caption,
    Music,
}

impl Modality {
    /// Condition modalities in the fixed fusion order.
    pub const CONDITIONS: [Modality; 3] = [Modality::Image, Modality::Story, Modality::Caption];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Story => "story",
            Modality::Caption => "caption",
            Modality::Music => "music",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "story" => Ok(Modality::Story),
            "caption" => Ok(Modality::Caption),
            "music" => Ok(Modality::Music),
            _ => Err(Error::input(format!("unknown modality {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub modality: Modality,
}

impl Embedding {
    pub fn new(vector: Vec<f64>, modality: Modality) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::input("empty embedding"));
        }
        crate::error::ensure_finite("embedding", &vector)?;
        Ok(Self { vector, modality })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        cosine(&self.vector, &other.vector)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub(crate) fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// A frozen embedding model for all four modalities.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode_music(&self, clip: &AudioClip) -> Result<Embedding>;

    /// Encodes an image descriptor, story or caption.
    fn encode_condition(&self, modality: Modality, item: &str) -> Result<Embedding>;

    fn encode_image(&self, descriptor: &str) -> Result<Embedding> {
        self.encode_condition(Modality::Image, descriptor)
    }

    fn encode_story(&self, story: &str) -> Result<Embedding> {
        self.encode_condition(Modality::Story, story)
    }

    fn encode_caption(&self, caption: &str) -> Result<Embedding> {
        self.encode_condition(Modality::Caption, caption)
    }
}

#[derive(Serialize)]
pub(crate) struct EmbedRequest<'a> {
    pub modality: &'a str,
    pub payload_b64: String,
}

#[derive(Deserialize)]
pub(crate) struct EmbedReply {
    pub vector: Vec<f64>,
}

/// Client for `POST /embed {"modality", "payload_b64"} -> {"vector"}`.
/// Music payloads are 16-bit WAV files; other payloads are UTF-8 text.
#[derive(Clone, Debug)]
pub struct RemoteEncoder {
    client: RemoteClient,
    dim: usize,
}

impl RemoteEncoder {
    pub fn new(endpoint: &str, timeout: Duration, dim: usize) -> Result<Self> {
        Ok(Self { client: RemoteClient::new(endpoint, timeout)?, dim })
    }

    fn embed(&self, modality: Modality, payload: &[u8]) -> Result<Embedding> {
        let req = EmbedRequest {
            modality: modality.name(),
            payload_b64: base64::engine::general_purpose::STANDARD.encode(payload),
        };
        let reply: EmbedReply = self.client.post("/embed", &req)?;
        if reply.vector.len() != self.dim {
            return Err(Error::dim(format!(
                "{} returned a {}-dim {modality} vector, expected {}",
                self.client.endpoint(),
                reply.vector.len(),
                self.dim
            )));
        }
        let mut v = reply.vector;
        if modality == Modality::Music {
            l2_normalize(&mut v);
        }
        Embedding::new(v, modality)
    }
}

impl Encoder for RemoteEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_music(&self, clip: &AudioClip) -> Result<Embedding> {
        self.embed(Modality::Music, &wav_bytes(clip)?)
    }

    fn encode_condition(&self, modality: Modality, item: &str) -> Result<Embedding> {
        if modality == Modality::Music {
            return Err(Error::input("music is not a condition modality"));
        }
        self.embed(modality, item.as_bytes())
    }
}

/// Backend selection as it appears in configuration files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    #[default]
    Synthetic,
    Remote {
        endpoint: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_timeout_secs() -> u64 {
    crate::remote::DEFAULT_TIMEOUT.as_secs()
}

#[derive(Clone, Debug)]
pub enum EncoderBackend {
    Synthetic(SyntheticEncoder),
    Remote(RemoteEncoder),
}

impl EncoderBackend {
    pub fn from_config(cfg: &BackendConfig, dim: usize, seed: u64) -> Result<Self> {
        Ok(match cfg {
            BackendConfig::Synthetic => EncoderBackend::Synthetic(SyntheticEncoder::new(dim, seed)?),
            BackendConfig::Remote { endpoint, timeout_secs } => {
                EncoderBackend::Remote(RemoteEncoder::new(endpoint, Duration::from_secs(*timeout_secs), dim)?)
            }
        })
    }
}

impl Encoder for EncoderBackend {
    fn dim(&self) -> usize {
        match self {
            EncoderBackend::Synthetic(e) => e.dim(),
            EncoderBackend::Remote(e) => e.dim(),
        }
    }

    fn encode_music(&self, clip: &AudioClip) -> Result<Embedding> {
        match self {
            EncoderBackend::Synthetic(e) => e.encode_music(clip),
            EncoderBackend::Remote(e) => e.encode_music(clip),
        }
    }

    fn encode_condition(&self, modality: Modality, item: &str) -> Result<Embedding> {
        match self {
            EncoderBackend::Synthetic(e) => e.encode_condition(modality, item),
            EncoderBackend::Remote(e) => e.encode_condition(modality, item),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_names_roundtrip() {
        for m in [Modality::Image, Modality::Story, Modality::Caption, Modality::Music] {
            assert_eq!(m.name().parse::<Modality>().unwrap(), m);
        }
        assert!("video".parse::<Modality>().is_err());
    }

    #[test]
    fn backend_config_json() {
        let cfg: BackendConfig =
            serde_json::from_str(r#"{"kind":"remote","endpoint":"http://h:1"}"#).unwrap();
        assert_eq!(cfg, BackendConfig::Remote { endpoint: "http://h:1".into(), timeout_secs: 30 });
        let cfg: BackendConfig = serde_json::from_str(r#"{"kind":"synthetic"}"#).unwrap();
        assert_eq!(cfg, BackendConfig::Synthetic);
    }

    #[test]
    fn cosine_edge_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
    }
}
