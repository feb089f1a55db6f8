use super::EmbeddingBackend;
use crate::error::{Error, Result};

pub const DEFAULT_REFERENCE_DIM: usize = 1024;
const NGRAM_SIZES: [usize; 3] = [3, 4, 5];

/// Deterministic hashed character n-gram embedder.
///
/// Lowercases the text, hashes every character 3-, 4- and 5-gram with
/// FNV-1a 64 into `dim` buckets, and weights each bucket by `ln(1 + count)`.
#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    dim: usize,
    model_id: String,
}

impl ReferenceBackend {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("reference backend dim must be >= 2, got {dim}")));
        }
        Ok(ReferenceBackend {
            dim,
            model_id: format!("char-ngram-3-5-fnv1a64-d{dim}"),
        })
    }

    pub fn featurize(&self, text: &str) -> Vec<f32> {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut counts = vec![0u32; self.dim];
        let mut gram = String::new();
        for n in NGRAM_SIZES {
            for window in chars.windows(n) {
                gram.clear();
                gram.extend(window);
                let bucket = (fnv1a64(gram.as_bytes()) % self.dim as u64) as usize;
                counts[bucket] += 1;
            }
        }
        counts.into_iter().map(|c| (c as f64).ln_1p() as f32).collect()
    }
}

impl EmbeddingBackend for ReferenceBackend {
    fn id(&self) -> &str {
        "ref"
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.featurize(t)).collect())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{cosine, Embedder};
    use std::hash::Hasher;
    use std::sync::Arc;

    // Independent FNV-1a implementation from the `fnv` crate.
    fn oracle_hash(s: &str) -> u64 {
        let mut h = fnv::FnvHasher::default();
        h.write(s.as_bytes());
        h.finish()
    }

    fn oracle_buckets(text: &str, dim: usize) -> Vec<usize> {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        let mut out = Vec::new();
        for n in 3..=5 {
            for i in 0..chars.len().saturating_sub(n - 1) {
                let g: String = chars[i..i + n].iter().collect();
                out.push((oracle_hash(&g) % dim as u64) as usize);
            }
        }
        out.sort();
        out
    }

    #[test]
    fn known_fnv_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"abc"), oracle_hash("abc"));
    }

    #[test]
    fn aaa_populates_exactly_its_trigram_bucket() {
        let e = Embedder::new(Arc::new(ReferenceBackend::new(1024).unwrap()));
        let v = e.embed_one("aaa").unwrap();
        let expected = oracle_buckets("aaa", 1024);
        assert_eq!(expected.len(), 1);
        let nonzero: Vec<usize> = (0..1024).filter(|&i| v.values()[i] != 0.0).collect();
        assert_eq!(nonzero, expected);
        assert!((v.norm() - 1.0).abs() < 1e-6);
        assert_eq!(v.values()[expected[0]], 1.0);
    }

    #[test]
    fn repeated_grams_weighted_by_log_count() {
        let b = ReferenceBackend::new(1024).unwrap();
        // "aaaa" has two "aaa" trigrams and one "aaaa" 4-gram.
        let raw = b.featurize("AAAA");
        let tri = (oracle_hash("aaa") % 1024) as usize;
        let quad = (oracle_hash("aaaa") % 1024) as usize;
        assert_ne!(tri, quad);
        assert!((raw[tri] as f64 - 3f64.ln()).abs() < 1e-6);
        assert!((raw[quad] as f64 - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn disjoint_texts_have_zero_cosine() {
        let a = oracle_buckets("abc", 1024);
        let b = oracle_buckets("xyz", 1024);
        assert!(a.iter().all(|x| !b.contains(x)), "bucket collision in fixture");
        let e = Embedder::new(Arc::new(ReferenceBackend::new(1024).unwrap()));
        let v = e.embed_texts(&["abc", "xyz", "abc"]).unwrap();
        assert_eq!(cosine(v[0].values(), v[1].values()), 0.0);
        assert!((cosine(v[0].values(), v[2].values()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn paraphrase_is_closer_than_unrelated_text() {
        let e = Embedder::new(Arc::new(ReferenceBackend::new(1024).unwrap()));
        let v = e
            .embed_texts(&[
                "does the word have the same meaning",
                "do the words share a meaning",
                "write a summary of the article",
            ])
            .unwrap();
        let close = cosine(v[0].values(), v[1].values());
        let far = cosine(v[0].values(), v[2].values());
        assert!(close > far, "{close} <= {far}");
    }

    #[test]
    fn tiny_dim_rejected() {
        assert!(ReferenceBackend::new(1).is_err());
    }
}
