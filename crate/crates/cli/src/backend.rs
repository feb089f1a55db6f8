use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use insta_core::embed::{
    Embedder, EmbeddingBackend, EmbeddingCache, ReferenceBackend, RemoteBackend, RemoteConfig, CACHE_FILE_NAME,
    DEFAULT_REFERENCE_DIM,
};
use serde::Serialize;

use crate::config::BackendSection;

pub const CACHE_ENV: &str = "INSTA_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Reference { dim: usize },
    Remote { url: String },
}

impl FromStr for BackendSpec {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ref" {
            return Ok(BackendSpec::Reference {
                dim: DEFAULT_REFERENCE_DIM,
            });
        }
        if let Some(dim) = s.strip_prefix("ref:") {
            let dim: usize = dim.parse().with_context(|| format!("bad reference dimension in {s:?}"))?;
            if dim == 0 {
                bail!("reference dimension must be positive");
            }
            return Ok(BackendSpec::Reference { dim });
        }
        if let Some(url) = s.strip_prefix("remote:") {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                bail!("remote backend needs an http(s) URL, got {url:?}");
            }
            return Ok(BackendSpec::Remote { url: url.to_owned() });
        }
        bail!("unknown backend {s:?}; expected ref, ref:DIM or remote:URL")
    }
}

/// Cache location: the environment wins over the config file.
pub fn cache_dir(section: &BackendSection) -> Option<PathBuf> {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => Some(PathBuf::from(dir)),
        _ => section.cache_dir.clone(),
    }
}

pub fn build_embedder(spec: &BackendSpec, section: &BackendSection, use_cache: bool) -> Result<Embedder> {
    let backend: Arc<dyn EmbeddingBackend> = match spec {
        BackendSpec::Reference { dim } => Arc::new(ReferenceBackend::new(*dim)?),
        BackendSpec::Remote { url } => {
            let mut cfg = RemoteConfig::new(url.as_str());
            cfg.model_id = section.model.clone();
            if let Some(b) = section.batch_size {
                cfg.batch_size = b;
            }
            if let Some(t) = section.timeout_secs {
                cfg.timeout = Duration::from_secs(t);
            }
            Arc::new(RemoteBackend::connect(cfg)?)
        }
    };
    log::info!("backend {} model {} dim {}", backend.id(), backend.model_id(), backend.dim());
    let mut embedder = Embedder::new(backend);
    if use_cache {
        if let Some(dir) = cache_dir(section) {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating cache dir {}", dir.display()))?;
            let cache = EmbeddingCache::open(dir.join(CACHE_FILE_NAME))?;
            log::info!("embedding cache {} ({} entries)", dir.display(), cache.len());
            embedder = embedder.with_cache(Arc::new(cache));
        }
    }
    Ok(embedder)
}
