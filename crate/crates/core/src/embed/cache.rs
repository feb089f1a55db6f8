use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CACHE_FILE_NAME: &str = "embeddings.bin";

/// sha256(backend id, NUL, model id, NUL, text).
pub fn cache_key(backend_id: &str, model_id: &str, text: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(backend_id.as_bytes());
    h.update([0]);
    h.update(model_id.as_bytes());
    h.update([0]);
    h.update(text.as_bytes());
    h.finalize().into()
}

/// Content-addressed embedding store.
///
/// On disk it is an append-only sequence of records
/// `key (32 bytes) | dim (u32 LE) | dim x f32 LE`. Later records win.
#[derive(Debug)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<[u8; 32], Vec<f32>>>,
    file: Mutex<Option<File>>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        EmbeddingCache {
            entries: RwLock::new(HashMap::new()),
            file: Mutex::new(None),
            path: None,
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ctx = || path.display().to_string();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(ctx(), e))?;
        }
        let mut entries = HashMap::new();
        let mut valid_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(path).map_err(|e| Error::io(ctx(), e))?);
            loop {
                let mut key = [0u8; 32];
                match read_exact_or_eof(&mut reader, &mut key) {
                    Ok(true) => {}
                    Ok(false) => break,
                    Err(e) => return Err(Error::io(ctx(), e)),
                }
                let mut dim = [0u8; 4];
                let mut ok = read_exact_or_eof(&mut reader, &mut dim).map_err(|e| Error::io(ctx(), e))?;
                let dim = u32::from_le_bytes(dim) as usize;
                let mut raw = vec![0u8; dim * 4];
                ok = ok && read_exact_or_eof(&mut reader, &mut raw).map_err(|e| Error::io(ctx(), e))?;
                if !ok {
                    log::warn!("{}: ignoring truncated trailing record", path.display());
                    break;
                }
                let values = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                entries.insert(key, values);
                valid_len += 36 + dim as u64 * 4;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(ctx(), e))?;
        file.set_len(valid_len).map_err(|e| Error::io(ctx(), e))?;
        Ok(EmbeddingCache {
            entries: RwLock::new(entries),
            file: Mutex::new(Some(file)),
            path: Some(path.to_owned()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &[u8; 32]) -> Option<Vec<f32>> {
        self.entries.read().expect("cache poisoned").get(key).cloned()
    }

    pub fn put(&self, key: [u8; 32], values: &[f32]) -> Result<()> {
        let mut file = self.file.lock().expect("cache file poisoned");
        if let Some(f) = file.as_mut() {
            let mut rec = Vec::with_capacity(36 + values.len() * 4);
            rec.extend_from_slice(&key);
            rec.extend_from_slice(&(values.len() as u32).to_le_bytes());
            for v in values {
                rec.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&rec).map_err(|e| {
                Error::io(
                    self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                    e,
                )
            })?;
        }
        self.entries
            .write()
            .expect("cache poisoned")
            .insert(key, values.to_vec());
        Ok(())
    }
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => return Ok(false),
            n => filled += n,
        }
    }
    Ok(true)
}
