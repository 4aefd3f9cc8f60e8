//! Intent embeddings and the similarity kernel used by Phase-A recall.
//!
//! Two embedders are provided: [`DeterministicEmbedder`], a seeded hashed
//! character-trigram projection with no model dependency, and
//! [`RemoteEmbedder`], a blocking client for an OpenAI-style `/embeddings`
//! endpoint with a content-addressed cache.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MemrlError, Result};

/// Tolerance on the L2 norm of every stored vector.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

/// A unit-norm embedding. Construction always normalizes or verifies the norm,
/// so cosine similarity reduces to a dot product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Scales `values` to unit length. Rejects empty, zero and non-finite input.
    pub fn normalize(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(MemrlError::InvalidDimension {
                expected: 2,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MemrlError::invalid("embedding contains non-finite values"));
        }
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(MemrlError::invalid("cannot normalize a zero vector"));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
        })
    }

    /// Wraps values that are already unit-norm, checking the invariant.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(MemrlError::InvalidDimension {
                expected: 2,
                actual: values.len(),
            });
        }
        let norm = l2_norm(&values);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(MemrlError::invalid(format!(
                "embedding is not unit-norm (norm = {norm})"
            )));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = MemrlError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::from_unit(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MemrlError::InvalidDimension {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const PAD_START: char = '\u{2}';
const PAD_END: char = '\u{3}';

/// Seeded bag-of-trigrams embedding.
///
/// The text is padded with two start and two end markers, every character
/// trigram is hashed (FNV-1a over the little-endian seed followed by the UTF-8
/// bytes, then a splitmix64 finalizer), and the hash picks a bucket (`h % dim`)
/// and a sign (top bit). Bucket counts are integers, so the normalized output
/// is bit-identical on every IEEE-754 platform. If the signed counts cancel to
/// zero, the whole text is hashed to a single one-hot bucket instead.
pub fn embed_deterministic(text: &str, dim: usize, seed: u64) -> Result<EmbeddingVector> {
    if dim < 2 {
        return Err(MemrlError::InvalidDimension {
            expected: 2,
            actual: dim,
        });
    }
    let chars: Vec<char> = [PAD_START, PAD_START]
        .into_iter()
        .chain(text.chars())
        .chain([PAD_END, PAD_END])
        .collect();
    let mut counts = vec![0i64; dim];
    let mut buf = [0u8; 12];
    for gram in chars.windows(3) {
        let mut len = 0;
        for c in gram {
            len += c.encode_utf8(&mut buf[len..]).len();
        }
        let h = mix(fnv1a(seed, &buf[..len]));
        let bucket = (h % dim as u64) as usize;
        counts[bucket] += if h >> 63 == 1 { -1 } else { 1 };
    }
    let mut values: Vec<f64> = counts.into_iter().map(|c| c as f64).collect();
    let norm = l2_norm(&values);
    if norm == 0.0 {
        let h = mix(fnv1a(seed, text.as_bytes()));
        values.iter_mut().for_each(|v| *v = 0.0);
        values[(h % dim as u64) as usize] = 1.0;
        return Ok(EmbeddingVector { values });
    }
    for v in &mut values {
        *v /= norm;
    }
    Ok(EmbeddingVector { values })
}

/// Source of intent embeddings for a memory bank of fixed dimension.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector>;
    fn dim(&self) -> usize;
}

#[derive(Debug, Clone)]
pub struct DeterministicEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl DeterministicEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(MemrlError::InvalidDimension {
                expected: 2,
                actual: dim,
            });
        }
        Ok(Self { dim, seed })
    }
}

impl Embedder for DeterministicEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        embed_deterministic(text, self.dim, self.seed)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

pub const ENV_ENDPOINT: &str = "MEMRL_EMBED_ENDPOINT";
pub const ENV_MODEL: &str = "MEMRL_EMBED_MODEL";
pub const ENV_TIMEOUT_MS: &str = "MEMRL_EMBED_TIMEOUT_MS";

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: [&'a str; 1],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Client for an external embedding service.
///
/// Sends `{"model": .., "input": [text]}` and expects
/// `{"data": [{"embedding": [..]}]}`. Results are normalized and cached by
/// SHA-256 of `(model, text)`, so replaying the same texts costs one call each.
pub struct RemoteEmbedder {
    endpoint: String,
    model: String,
    dim: usize,
    agent: ureq::Agent,
    cache: RwLock<HashMap<[u8; 32], EmbeddingVector>>,
    calls: AtomicU64,
}

impl std::fmt::Debug for RemoteEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEmbedder")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        dim: usize,
        timeout: Duration,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(MemrlError::InvalidDimension {
                expected: 2,
                actual: dim,
            });
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            dim,
            agent,
            cache: RwLock::new(HashMap::new()),
            calls: AtomicU64::new(0),
        })
    }

    /// Builds a client from `MEMRL_EMBED_ENDPOINT`, `MEMRL_EMBED_MODEL` and
    /// `MEMRL_EMBED_TIMEOUT_MS` (default 10 s).
    pub fn from_env(dim: usize) -> Result<Self> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| MemrlError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let model = std::env::var(ENV_MODEL)
            .map_err(|_| MemrlError::Config(format!("{ENV_MODEL} is not set")))?;
        let timeout_ms = match std::env::var(ENV_TIMEOUT_MS) {
            Ok(raw) => raw
                .parse::<u64>()
                .map_err(|_| MemrlError::Config(format!("{ENV_TIMEOUT_MS} must be an integer")))?,
            Err(_) => 10_000,
        };
        Self::new(endpoint, model, dim, Duration::from_millis(timeout_ms))
    }

    /// Number of HTTP requests issued so far (cache hits excluded).
    pub fn network_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn cache_key(&self, text: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update((self.model.len() as u64).to_le_bytes());
        hasher.update(self.model.as_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        key
    }

    /// Embeds `text`, serving repeated texts from the cache.
    pub fn fetch(&self, text: &str) -> Result<EmbeddingVector> {
        let key = self.cache_key(text);
        if let Some(hit) = self.cache.read().get(&key) {
            return Ok(hit.clone());
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let request = EmbeddingRequest {
            model: &self.model,
            input: [text],
        };
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(&request)
            .map_err(|e| MemrlError::RemoteEmbedding(e.to_string()))?;
        let body: EmbeddingResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| MemrlError::RemoteEmbedding(format!("bad response body: {e}")))?;
        let raw = body
            .data
            .into_iter()
            .next()
            .ok_or_else(|| MemrlError::RemoteEmbedding("response has no data".into()))?
            .embedding;
        if raw.len() != self.dim {
            return Err(MemrlError::InvalidDimension {
                expected: self.dim,
                actual: raw.len(),
            });
        }
        let vector = EmbeddingVector::normalize(raw)?;
        self.cache.write().entry(key).or_insert_with(|| vector.clone());
        Ok(vector)
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        self.fetch(text)
    }

    fn dim(&self) -> usize {
        self.dim
    }
}
