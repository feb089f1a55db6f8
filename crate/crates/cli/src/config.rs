//! Pipeline configuration file (TOML). Every field is optional; command-line
//! flags take precedence over the file, and the file over built-in defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use insta_core::align::TrainConfig;
use insta_core::mixture::Rendering;
use insta_core::refine::{RefinementConfig, RefinementSettings};
use insta_core::select::{Aggregation, Method};
use serde::{Deserialize, Serialize};

use crate::backend::BackendSpec;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub corpus: CorpusSection,
    pub refine: Option<RefinementSettings>,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub select: SelectSection,
    #[serde(default)]
    pub mixture: MixtureSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub manifest: Option<PathBuf>,
    /// Load corpora whose clusters mix splits, reporting instead of failing.
    pub lenient: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    /// `ref`, `ref:DIM` or `remote:URL`.
    pub spec: Option<String>,
    /// Model the remote service must serve.
    pub model: Option<String>,
    pub batch_size: Option<usize>,
    pub timeout_secs: Option<u64>,
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    P3,
    Niv2,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub preset: Option<Preset>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub val_fraction: Option<f64>,
    pub auxiliary_pairs: Option<PathBuf>,
    pub n_pos: Option<usize>,
    pub n_neg: Option<usize>,
    pub use_refined: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectSection {
    pub target: Option<String>,
    pub k: Option<usize>,
    pub method: Option<Method>,
    pub aggregation: Option<Aggregation>,
    pub use_refined: Option<bool>,
    /// Instances per instruction for sample-based selection.
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub head: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSection {
    pub cap: Option<usize>,
    pub seed: Option<u64>,
    pub render: Option<Rendering>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.corpus.manifest);
        fix(&mut self.backend.cache_dir);
        fix(&mut self.train.auxiliary_pairs);
        fix(&mut self.select.head);
        fix(&mut self.output.dir);
    }

    /// Check every section before any stage runs.
    pub fn validate(&self) -> Result<()> {
        if let Some(spec) = &self.backend.spec {
            BackendSpec::from_str(spec)?;
        }
        if self.backend.batch_size == Some(0) {
            bail!("backend.batch_size must be positive");
        }
        if let Some(r) = &self.refine {
            RefinementConfig::new(r)?;
        }
        self.train_config(None)?.validate()?;
        for (name, v) in [
            ("select.k", self.select.k),
            ("select.samples", self.select.samples),
            ("mixture.cap", self.mixture.cap),
        ] {
            if v == Some(0) {
                bail!("{name} must be positive");
            }
        }
        Ok(())
    }

    /// Training settings: preset defaults overlaid with the file's values.
    pub fn train_config(&self, preset_flag: Option<Preset>) -> Result<TrainConfig> {
        let t = &self.train;
        let mut cfg = match preset_flag.or(t.preset).unwrap_or(Preset::P3) {
            Preset::P3 => TrainConfig::p3(),
            Preset::Niv2 => TrainConfig::niv2(),
        };
        if let Some(v) = t.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = t.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = t.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = t.seed {
            cfg.seed = v;
        }
        if let Some(v) = t.val_fraction {
            cfg.val_fraction = v;
        }
        if let Some(v) = &t.auxiliary_pairs {
            cfg.auxiliary_pairs_path = Some(v.clone());
        }
        if t.n_pos.is_some() {
            cfg.n_pos = t.n_pos;
        }
        if t.n_neg.is_some() {
            cfg.n_neg = t.n_neg;
        }
        if let Some(v) = t.use_refined {
            cfg.use_refined = v;
        }
        Ok(cfg)
    }

    pub fn refinement(&self) -> Result<RefinementConfig> {
        Ok(RefinementConfig::new(&self.refine.clone().unwrap_or_default())?)
    }
}
