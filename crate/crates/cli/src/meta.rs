//! Run metadata written next to every artifact, and its verification.

use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TOOL: &str = "insta";
pub const META_SUFFIX: &str = ".meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Command line after the program name.
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// Effective settings after merging flags, config and defaults.
    pub settings: serde_json::Value,
    /// Absolute paths.
    pub inputs: Vec<FileHash>,
    /// Paths relative to the metadata file's directory.
    pub outputs: Vec<FileHash>,
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Metadata path for an artifact: `dir/stem.meta.json`.
pub fn meta_path(artifact: &Path) -> PathBuf {
    let stem = artifact
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    artifact.with_file_name(format!("{stem}{META_SUFFIX}"))
}

/// Collects inputs as a command reads them.
#[derive(Debug, Default)]
pub struct Recorder {
    inputs: Vec<FileHash>,
}

impl Recorder {
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let abs = std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))?;
        if self.inputs.iter().any(|f| f.path == abs) {
            return Ok(());
        }
        let sha256 = sha256_file(&abs).with_context(|| format!("hashing {}", abs.display()))?;
        self.inputs.push(FileHash { path: abs, sha256 });
        Ok(())
    }

    /// Write `meta` for `outputs` to `meta_file`.
    pub fn finish(
        self,
        meta_file: &Path,
        command: &str,
        seed: Option<u64>,
        settings: serde_json::Value,
        outputs: &[PathBuf],
    ) -> Result<()> {
        let base = meta_file.parent().unwrap_or_else(|| Path::new("."));
        let mut hashed = Vec::with_capacity(outputs.len());
        for out in outputs {
            let sha256 = sha256_file(out).with_context(|| format!("hashing {}", out.display()))?;
            let rel = out.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| {
                std::path::absolute(out).unwrap_or_else(|_| out.clone())
            });
            hashed.push(FileHash { path: rel, sha256 });
        }
        let meta = RunMeta {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            seed,
            settings,
            inputs: self.inputs,
            outputs: hashed,
        };
        let text = serde_json::to_string_pretty(&meta)? + "\n";
        std::fs::write(meta_file, text).with_context(|| format!("writing {}", meta_file.display()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Drift {
    Missing,
    Changed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub meta: PathBuf,
    pub path: PathBuf,
    pub kind: Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub ok: bool,
    pub runs: usize,
    pub checked: usize,
    pub mismatches: Vec<Mismatch>,
}

fn meta_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            meta_files(&path, out)?;
        } else if path.to_string_lossy().ends_with(META_SUFFIX) {
            out.push(path);
        }
    }
    Ok(())
}

/// Re-hash every artifact and input recorded under `run_dir`.
pub fn verify(run_dir: &Path) -> Result<VerifyReport> {
    let mut metas = Vec::new();
    meta_files(run_dir, &mut metas)?;
    metas.sort();
    let mut report = VerifyReport {
        ok: true,
        runs: metas.len(),
        checked: 0,
        mismatches: Vec::new(),
    };
    for meta_file in metas {
        let text = std::fs::read_to_string(&meta_file)?;
        let meta: RunMeta =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", meta_file.display()))?;
        let base = meta_file.parent().unwrap_or_else(|| Path::new("."));
        let files = meta
            .outputs
            .iter()
            .map(|f| (base.join(&f.path), &f.sha256))
            .chain(meta.inputs.iter().map(|f| (f.path.clone(), &f.sha256)));
        for (path, want) in files {
            report.checked += 1;
            let kind = match sha256_file(&path) {
                Err(e) if e.kind() == io::ErrorKind::NotFound => Some(Drift::Missing),
                Err(e) => return Err(e).with_context(|| format!("hashing {}", path.display())),
                Ok(got) if &got != want => Some(Drift::Changed),
                Ok(_) => None,
            };
            if let Some(kind) = kind {
                report.mismatches.push(Mismatch {
                    meta: meta_file.clone(),
                    path,
                    kind,
                });
            }
        }
    }
    report.ok = report.mismatches.is_empty();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn meta_path_replaces_extension() {
        assert_eq!(meta_path(Path::new("out/sel.json")), PathBuf::from("out/sel.meta.json"));
        assert_eq!(meta_path(Path::new("head.bin")), PathBuf::from("head.meta.json"));
    }
}
