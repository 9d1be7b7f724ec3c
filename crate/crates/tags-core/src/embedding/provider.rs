//! Embedding providers: the frozen-encoder abstraction, a deterministic
//! test provider, and an HTTP client for remote encoders.

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{EmbeddingError, EmbeddingVector};

/// A frozen text encoder. Implementations return raw (unnormalized)
/// vectors; normalization happens at ingestion so that ranking is
/// invariant to positive rescaling of provider outputs.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Stable identifier for the provider and model version. Persisted
    /// in index files and checked at load time.
    fn fingerprint(&self) -> String;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError>;
}

/// Embed one text and normalize it to unit length.
pub fn embed_text<P: EmbeddingProvider + ?Sized>(
    provider: &P,
    text: &str,
) -> Result<EmbeddingVector, EmbeddingError> {
    if text.is_empty() {
        return Err(EmbeddingError::EmptyText);
    }
    let mut batch = provider.embed_batch(&[text])?;
    if batch.len() != 1 {
        return Err(EmbeddingError::InvalidVector(format!(
            "provider returned {} vectors for 1 text",
            batch.len()
        )));
    }
    let raw = batch.pop().expect("length checked");
    if raw.len() != provider.dim() {
        return Err(EmbeddingError::DimensionMismatch { expected: provider.dim(), got: raw.len() });
    }
    EmbeddingVector::from_raw(&raw)
}

/// Anything that can turn text into a unit vector. The harness layers a
/// cache and call counting behind this; plain providers go through
/// [`ProviderEmbedder`].
pub trait TextEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;
}

/// Adapter from an [`EmbeddingProvider`] to [`TextEmbedder`].
pub struct ProviderEmbedder<'a, P: EmbeddingProvider + ?Sized>(pub &'a P);

impl<P: EmbeddingProvider + ?Sized> TextEmbedder for ProviderEmbedder<'_, P> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        embed_text(self.0, text)
    }
}

/// Deterministic test provider: each text maps to a pseudo-random
/// Gaussian vector seeded from a SHA-256 digest of the fingerprint and
/// the text, so outputs are identical across processes and platforms.
#[derive(Debug, Clone)]
pub struct DeterministicProvider {
    dim: usize,
    tag: String,
}

impl DeterministicProvider {
    pub fn new(dim: usize) -> Self {
        Self::with_tag(dim, "det-v1")
    }

    /// A provider with a distinct version tag. Different tags produce
    /// different fingerprints and different vectors.
    pub fn with_tag(dim: usize, tag: impl Into<String>) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self { dim, tag: tag.into() }
    }

    fn raw_vector(&self, text: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.fingerprint().as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha20Rng::from_seed(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}

impl EmbeddingProvider for DeterministicProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("{}:d{}", self.tag, self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.raw_vector(t)).collect())
    }
}

/// Settings for a remote embedding endpoint. The endpoint accepts a
/// JSON body `{"model": ..., "input": [texts...]}` and answers
/// `{"data": [{"embedding": [floats...]}, ...]}` in input order.
#[derive(Debug, Clone)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    pub model: String,
    /// Bearer token, typically read from the environment variable named
    /// in the run configuration.
    pub api_key: Option<String>,
    pub dim: usize,
    pub batch_size: usize,
    pub timeout: Duration,
    pub retries: u32,
    pub backoff: Duration,
}

impl HttpProviderConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            dim,
            batch_size: 64,
            timeout: Duration::from_secs(120),
            retries: 3,
            backoff: Duration::from_millis(250),
        }
    }
}

/// HTTP client for a remote encoder, with bounded retries and
/// exponential backoff on transport errors and 5xx responses.
pub struct HttpEmbeddingProvider {
    config: HttpProviderConfig,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl HttpEmbeddingProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| EmbeddingError::ProviderUnavailable { cause: e.to_string() })?;
        Ok(Self { config, client })
    }

    fn request_chunk(&self, chunk: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let body = serde_json::json!({ "model": self.config.model, "input": chunk });
        let mut last_error = String::new();
        for attempt in 0..self.config.retries {
            if attempt > 0 {
                std::thread::sleep(self.config.backoff * 2u32.pow(attempt - 1));
            }
            let mut req = self.client.post(&self.config.endpoint).json(&body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let parsed: EmbeddingResponse = resp.json().map_err(|e| {
                            EmbeddingError::ProviderUnavailable { cause: format!("bad response body: {e}") }
                        })?;
                        if parsed.data.len() != chunk.len() {
                            return Err(EmbeddingError::InvalidVector(format!(
                                "provider returned {} vectors for {} texts",
                                parsed.data.len(),
                                chunk.len()
                            )));
                        }
                        return Ok(parsed.data.into_iter().map(|d| d.embedding).collect());
                    }
                    let retryable = status.is_server_error() || status.as_u16() == 429;
                    last_error = format!("status {status}");
                    if !retryable {
                        break;
                    }
                }
                Err(e) => last_error = e.to_string(),
            }
        }
        Err(EmbeddingError::ProviderUnavailable {
            cause: format!("{} after {} attempts: {last_error}", self.config.endpoint, self.config.retries),
        })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn fingerprint(&self) -> String {
        format!("http:{}:d{}", self.config.model, self.config.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.config.batch_size.max(1)) {
            out.extend(self.request_chunk(chunk)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_provider_is_bitwise_stable() {
        let provider = DeterministicProvider::new(16);
        let a = embed_text(&provider, "abc").unwrap();
        let b = embed_text(&provider, "abc").unwrap();
        assert_eq!(a, b);
        let c = embed_text(&provider, "abd").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn deterministic_provider_pins_known_values() {
        // Regression pin for cross-run and cross-platform stability of the
        // digest -> rng -> normalize chain. Regenerate only if the seeding
        // scheme deliberately changes.
        let provider = DeterministicProvider::new(4);
        let v = embed_text(&provider, "abc").unwrap();
        let expected = [
            -0.16123542129377536,
            -0.3183436773403794,
            -0.8515239128202798,
            0.3841451130925182,
        ];
        for (got, want) in v.values().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "got {got}, want {want}");
        }
    }

    #[test]
    fn embed_text_normalizes_and_checks_dims() {
        let provider = DeterministicProvider::new(8);
        let v = embed_text(&provider, "hello").unwrap();
        let norm: f64 = v.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(matches!(embed_text(&provider, "").unwrap_err(), EmbeddingError::EmptyText));
    }

    #[test]
    fn wrong_dim_provider_is_rejected() {
        struct WrongDim;
        impl EmbeddingProvider for WrongDim {
            fn dim(&self) -> usize {
                1024
            }
            fn fingerprint(&self) -> String {
                "wrong:d1024".into()
            }
            fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbeddingError> {
                Ok(texts.iter().map(|_| vec![1.0; 768]).collect())
            }
        }
        assert!(matches!(
            embed_text(&WrongDim, "x").unwrap_err(),
            EmbeddingError::DimensionMismatch { expected: 1024, got: 768 }
        ));
    }

    #[test]
    fn distinct_tags_change_fingerprint_and_vectors() {
        let v1 = DeterministicProvider::with_tag(8, "det-v1");
        let v2 = DeterministicProvider::with_tag(8, "det-v2");
        assert_ne!(v1.fingerprint(), v2.fingerprint());
        assert_ne!(embed_text(&v1, "abc").unwrap(), embed_text(&v2, "abc").unwrap());
    }
}
