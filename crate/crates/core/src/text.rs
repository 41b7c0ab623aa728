//! Sentence embeddings: a deterministic hashing encoder and an HTTP client
//! for an external embedding service with an on-disk cache.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const EMBEDDING_DIM: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Toy,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub source: EmbeddingSource,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Lowercased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Unit vector seeded by the token's SHA-256.
pub fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(token.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    v
}

/// Normalized mean of the token vectors.
pub fn encode_toy(text: &str, dim: usize) -> Result<TextEmbedding> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut acc = vec![0.0; dim];
    for t in &tokens {
        for (a, x) in acc.iter_mut().zip(token_vector(t, dim)) {
            *a += x;
        }
    }
    normalize(&mut acc);
    Ok(TextEmbedding {
        vector: acc,
        source: EmbeddingSource::Toy,
    })
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Serialize, Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

/// Client for a service answering `POST {"text"}` with `{"embedding": [...]}`.
#[derive(Debug, Clone)]
pub struct ExternalEncoder {
    endpoint: String,
    cache_dir: Option<PathBuf>,
    dim: usize,
    timeout: Duration,
}

impl ExternalEncoder {
    pub fn new(endpoint: impl Into<String>, cache_dir: Option<PathBuf>, dim: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            cache_dir,
            dim,
            timeout: Duration::from_secs(30),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn cache_path(&self, text: &str) -> Option<PathBuf> {
        let key = hex::encode(Sha256::digest(text.as_bytes()));
        self.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn check(&self, embedding: Vec<f64>) -> Result<TextEmbedding> {
        if embedding.len() != self.dim {
            return Err(Error::Protocol(format!(
                "expected {} values, got {}",
                self.dim,
                embedding.len()
            )));
        }
        if !embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::Protocol("embedding contains non-finite values".into()));
        }
        Ok(TextEmbedding {
            vector: embedding,
            source: EmbeddingSource::External,
        })
    }

    /// Cache hits never touch the network.
    pub fn encode(&self, text: &str) -> Result<TextEmbedding> {
        if text.trim().is_empty() {
            return Err(Error::EmptyText);
        }
        let cache = self.cache_path(text);
        if let Some(path) = cache.as_ref().filter(|p| p.exists()) {
            let cached: EmbedResponse = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            return self.check(cached.embedding);
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| Error::EmbeddingUnavailable(e.to_string()))?;
        let response = client
            .post(&self.endpoint)
            .json(&EmbedRequest { text })
            .send()
            .map_err(|e| Error::EmbeddingUnavailable(e.to_string()))?;
        if !response.status().is_success() {
            return Err(Error::EmbeddingUnavailable(format!(
                "service answered {}",
                response.status()
            )));
        }
        let body: EmbedResponse = response
            .json()
            .map_err(|e| Error::Protocol(e.to_string()))?;
        let embedding = self.check(body.embedding)?;
        if let Some(path) = cache {
            write_atomic(&path, &serde_json::to_vec(&EmbedResponse { embedding: embedding.vector.clone() })?)?;
        }
        Ok(embedding)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serializable choice of sentence encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TextEncoderConfig {
    Toy {
        dim: usize,
    },
    External {
        endpoint: String,
        cache_dir: Option<PathBuf>,
        dim: usize,
    },
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig::Toy { dim: EMBEDDING_DIM }
    }
}

impl TextEncoderConfig {
    pub fn dim(&self) -> usize {
        match self {
            TextEncoderConfig::Toy { dim } | TextEncoderConfig::External { dim, .. } => *dim,
        }
    }

    pub fn encode(&self, text: &str) -> Result<TextEmbedding> {
        match self {
            TextEncoderConfig::Toy { dim } => encode_toy(text, *dim),
            TextEncoderConfig::External {
                endpoint,
                cache_dir,
                dim,
            } => ExternalEncoder::new(endpoint.clone(), cache_dir.clone(), *dim).encode(text),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn toy_encoder_is_deterministic_and_unit_norm() {
        let a = encode_toy("the quick brown fox", EMBEDDING_DIM).unwrap();
        let b = encode_toy("the quick brown fox", EMBEDDING_DIM).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vector.len(), 768);
        assert!((cosine(&a.vector, &a.vector) - 1.0).abs() < 1e-6);
        assert_eq!(encode_toy("The  QUICK brown fox", 768).unwrap(), a);
        assert!(matches!(encode_toy("   ", 768), Err(Error::EmptyText)));
    }

    #[test]
    fn disjoint_sentences_are_dissimilar() {
        let mut below = 0;
        for i in 0..100 {
            let a = format!("alpha{i} beta{i} gamma{i}");
            let b = format!("delta{i} epsilon{i} zeta{i} eta{i}");
            let c = cosine(
                &encode_toy(&a, 768).unwrap().vector,
                &encode_toy(&b, 768).unwrap().vector,
            );
            if c < 0.5 {
                below += 1;
            }
        }
        assert!(below >= 99);
    }
}
