use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{content_words, fnv1a64};

/// Tolerance on the unit norm of stored vectors.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// A unit-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// L2-normalize `values`. Rejects empty, zero and non-finite vectors.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("embedding has dimension 0".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Input(format!("embedding norm {norm} is not usable")));
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self { values })
    }

    /// Wrap values that are already unit length within [`NORM_TOLERANCE`].
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let v = Self { values };
        if v.values.is_empty() || (v.norm() - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Integrity(format!("stored vector has norm {}", v.norm())));
        }
        Ok(v)
    }

    /// Widen a stored single-precision row.
    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::from_unit(values.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&x| x as f32).collect()
    }

    /// The vector as it reads back after a single-precision round trip.
    pub fn quantized(&self) -> Self {
        Self {
            values: self.to_f32().into_iter().map(f64::from).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity; both vectors are unit length so this is a dot product.
    pub fn cosine(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        dot.clamp(-1.0, 1.0)
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    /// One vector per text, in input order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>>;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed(&[text])?.remove(0))
    }
}

pub(crate) fn check_texts(texts: &[&str]) -> Result<()> {
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::Input(format!("text #{i} to embed is empty")));
    }
    Ok(())
}

pub const MOCK_BUCKETS: usize = 256;

/// Hashed bag-of-words embedding: content words hashed into 256 unigram
/// buckets, adjacent word pairs into 256 bigram buckets, then L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockEmbedder;

impl MockEmbedder {
    pub fn raw_counts(text: &str) -> Vec<f64> {
        let words = content_words(text);
        let mut v = vec![0.0; 2 * MOCK_BUCKETS];
        for w in &words {
            v[(fnv1a64(w.as_bytes()) % MOCK_BUCKETS as u64) as usize] += 1.0;
        }
        for pair in words.windows(2) {
            let bigram = format!("{} {}", pair[0], pair[1]);
            v[MOCK_BUCKETS + (fnv1a64(bigram.as_bytes()) % MOCK_BUCKETS as u64) as usize] += 1.0;
        }
        v
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn name(&self) -> &str {
        "mock-hashed-bow"
    }

    fn dim(&self) -> usize {
        2 * MOCK_BUCKETS
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        check_texts(texts)?;
        texts
            .iter()
            .map(|t| {
                EmbeddingVector::normalized(Self::raw_counts(t)).map_err(|_| {
                    Error::Input(format!("text {t:?} has no tokens to embed"))
                })
            })
            .collect()
    }
}
