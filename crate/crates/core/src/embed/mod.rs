//! The embedding function behind instruction similarity.
//!
//! Backends produce raw vectors; [`Embedder`] validates, L2-normalizes and
//! caches them, and counts how many texts actually reached the backend.

mod cache;
mod reference;
mod remote;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use cache::{cache_key, EmbeddingCache, CACHE_FILE_NAME};
pub use reference::{fnv1a64, ReferenceBackend, DEFAULT_REFERENCE_DIM};
pub use remote::{RemoteBackend, RemoteConfig};

use crate::error::{Error, Result};

/// Norms below this are rejected instead of normalized.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    /// Scale `raw` to unit L2 norm.
    pub fn normalized(raw: &[f32]) -> Result<Self> {
        let norm = l2_norm(raw);
        if norm.is_nan() || norm < MIN_NORM {
            return Err(Error::ZeroNorm { norm });
        }
        Ok(EmbeddingVector {
            values: raw.iter().map(|&x| (x as f64 / norm) as f32).collect(),
        })
    }

    /// Wrap values that are already normalized, e.g. read back from a cache.
    pub(crate) fn from_normalized(values: Vec<f32>) -> Self {
        EmbeddingVector { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&x| x as f64).collect()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity computed in f64 and clamped to [-1, 1].
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub trait EmbeddingBackend: Send + Sync {
    /// Backend family, e.g. `ref` or `remote`.
    fn id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn deterministic(&self) -> bool;
    /// Raw (unnormalized) vectors, one per text, in input order.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>>;
}

pub struct Embedder {
    backend: Arc<dyn EmbeddingBackend>,
    cache: Option<Arc<EmbeddingCache>>,
    encoded: AtomicU64,
}

impl Embedder {
    pub fn new(backend: Arc<dyn EmbeddingBackend>) -> Self {
        Embedder {
            backend,
            cache: None,
            encoded: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: Arc<EmbeddingCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn backend(&self) -> &dyn EmbeddingBackend {
        self.backend.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.backend.dim()
    }

    /// Texts sent to the backend since construction or the last reset.
    pub fn encode_count(&self) -> u64 {
        self.encoded.load(Ordering::Relaxed)
    }

    pub fn reset_count(&self) {
        self.encoded.store(0, Ordering::Relaxed);
    }

    pub fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_texts(&[text])?.pop().expect("one text in, one vector out"))
    }

    pub fn embed_texts(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        let backend = self.backend.as_ref();
        let mut out: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        let mut keys = Vec::with_capacity(texts.len());
        let mut misses = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            let key = cache_key(backend.id(), backend.model_id(), text);
            match self.cache.as_ref().and_then(|c| c.get(&key)) {
                Some(values) if values.len() == backend.dim() => {
                    out[i] = Some(EmbeddingVector::from_normalized(values));
                }
                _ => misses.push(i),
            }
            keys.push(key);
        }

        if !misses.is_empty() {
            let batch: Vec<&str> = misses.iter().map(|&i| texts[i]).collect();
            self.encoded.fetch_add(batch.len() as u64, Ordering::Relaxed);
            let raw = backend.embed_batch(&batch)?;
            if raw.len() != batch.len() {
                return Err(Error::Protocol(format!(
                    "backend returned {} vectors for {} texts",
                    raw.len(),
                    batch.len()
                )));
            }
            let mut fresh = Vec::with_capacity(raw.len());
            for v in &raw {
                if v.len() != backend.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: backend.dim(),
                        actual: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Protocol("backend returned a non-finite value".into()));
                }
                fresh.push(EmbeddingVector::normalized(v)?);
            }
            for (&i, v) in misses.iter().zip(fresh) {
                if let Some(cache) = &self.cache {
                    cache.put(keys[i], v.values())?;
                }
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("every slot filled")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference(dim: usize) -> Embedder {
        Embedder::new(Arc::new(ReferenceBackend::new(dim).unwrap()))
    }

    #[test]
    fn identical_texts_identical_vectors() {
        let e = reference(1024);
        let v = e.embed_texts(&["same text", "same text"]).unwrap();
        assert_eq!(v[0], v[1]);
        assert_eq!(e.encode_count(), 2);
    }

    #[test]
    fn zero_vector_is_rejected() {
        assert!(matches!(
            EmbeddingVector::normalized(&[0.0, 0.0]),
            Err(Error::ZeroNorm { .. })
        ));
        // Too short for any 3-gram.
        assert!(matches!(reference(64).embed_one("ab"), Err(Error::ZeroNorm { .. })));
    }

    struct Broken {
        dim: usize,
        emit: Vec<f32>,
    }

    impl EmbeddingBackend for Broken {
        fn id(&self) -> &str {
            "broken"
        }
        fn model_id(&self) -> &str {
            "broken"
        }
        fn dim(&self) -> usize {
            self.dim
        }
        fn deterministic(&self) -> bool {
            true
        }
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
            Ok(texts.iter().map(|_| self.emit.clone()).collect())
        }
    }

    #[test]
    fn wrong_dim_and_non_finite_rejected() {
        let e = Embedder::new(Arc::new(Broken {
            dim: 3,
            emit: vec![1.0, 2.0],
        }));
        assert!(matches!(
            e.embed_one("x"),
            Err(Error::DimensionMismatch { expected: 3, actual: 2 })
        ));
        let e = Embedder::new(Arc::new(Broken {
            dim: 2,
            emit: vec![1.0, f32::INFINITY],
        }));
        assert!(matches!(e.embed_one("x"), Err(Error::Protocol(_))));
    }

    #[test]
    fn cache_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let texts = ["Suppose {{text}} Can we infer", "Write a summary of the article"];
        let cold = reference(256).embed_texts(&texts).unwrap();

        let cache = Arc::new(EmbeddingCache::open(dir.path().join(CACHE_FILE_NAME)).unwrap());
        let warm_up = reference(256).with_cache(Arc::clone(&cache));
        assert_eq!(warm_up.embed_texts(&texts).unwrap(), cold);
        drop(warm_up);
        drop(cache);

        let reopened = Arc::new(EmbeddingCache::open(dir.path().join(CACHE_FILE_NAME)).unwrap());
        let warm = reference(256).with_cache(reopened);
        let got = warm.embed_texts(&texts).unwrap();
        assert_eq!(warm.encode_count(), 0);
        for (a, b) in got.iter().zip(&cold) {
            let bits_a: Vec<u32> = a.values().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = b.values().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn cache_keys_separate_models() {
        let cache = Arc::new(EmbeddingCache::in_memory());
        let a = reference(64).with_cache(Arc::clone(&cache));
        let b = reference(128).with_cache(Arc::clone(&cache));
        a.embed_one("shared text").unwrap();
        assert_eq!(b.embed_one("shared text").unwrap().dim(), 128);
        assert_eq!(b.encode_count(), 1);
    }

    proptest! {
        #[test]
        fn normalized_and_equivariant(texts in proptest::collection::vec("[a-z ]{3,30}", 1..8), rot in 0usize..8) {
            let texts: Vec<String> = texts.into_iter().map(|t| format!("x{t}")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let e = reference(128);
            let out = e.embed_texts(&refs).unwrap();
            for v in &out {
                prop_assert!((v.norm() - 1.0).abs() < 1e-6);
            }
            for a in &out {
                for b in &out {
                    let c = cosine(a.values(), b.values());
                    prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
                }
            }
            let mut perm = refs.clone();
            perm.rotate_left(rot % refs.len());
            let mut expected = out.clone();
            expected.rotate_left(rot % refs.len());
            prop_assert_eq!(e.embed_texts(&perm).unwrap(), expected);
        }
    }
}
