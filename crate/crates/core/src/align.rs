//! Aligning the selector to a meta-dataset's instruction style.
//!
//! A linear projection head `W` (dim_in x dim_out) is trained on top of
//! frozen base embeddings so that `cos(Wᵀa, Wᵀb)` regresses onto the pair
//! label with a squared loss: positives are two instructions of the same
//! task, negatives come from different clusters. Two distinct tasks of the
//! same cluster are never paired.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Instruction, InstructionId, MetaDataset, Split, Task};
use crate::embed::{Embedder, EmbeddingVector, MIN_NORM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrigin {
    SameTask,
    CrossCluster,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub a: InstructionId,
    pub b: InstructionId,
    pub y: u8,
    pub origin: PairOrigin,
}

impl PairSample {
    pub fn label(&self) -> f64 {
        self.y as f64
    }
}

/// Sample labelled instruction pairs from the train split.
///
/// With `n_pos = None` every unordered same-task pair is emitted once;
/// otherwise `n_pos` positives are drawn as (random anchor, random other
/// instruction of its task). `n_neg` defaults to the positive count.
pub fn sample_pairs(
    ds: &MetaDataset,
    n_pos: Option<usize>,
    n_neg: Option<usize>,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let tasks: Vec<(&Task, Vec<&Instruction>)> = ds
        .tasks
        .iter()
        .filter(|t| t.split == Split::Train)
        .map(|t| (t, t.instructions.iter().filter(|i| i.is_alignment_eligible()).collect::<Vec<_>>()))
        .filter(|(_, instrs)| !instrs.is_empty())
        .collect();

    let clusters: std::collections::BTreeSet<_> = tasks.iter().map(|(t, _)| &t.cluster_id).collect();
    if clusters.len() < 2 {
        return Err(Error::InsufficientPairs(format!(
            "need training instructions in at least 2 clusters, found {}",
            clusters.len()
        )));
    }
    let multi: Vec<usize> = (0..tasks.len()).filter(|&i| tasks[i].1.len() >= 2).collect();
    if multi.is_empty() {
        return Err(Error::InsufficientPairs(
            "no training task has two alignment instructions; add paraphrases".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let positive = |a: &Instruction, b: &Instruction| PairSample {
        a: a.id.clone(),
        b: b.id.clone(),
        y: 1,
        origin: PairOrigin::SameTask,
    };
    match n_pos {
        None => {
            for &ti in &multi {
                let instrs = &tasks[ti].1;
                for i in 0..instrs.len() {
                    for j in i + 1..instrs.len() {
                        pairs.push(positive(instrs[i], instrs[j]));
                    }
                }
            }
        }
        Some(n) => {
            let anchors: Vec<(usize, usize)> = multi
                .iter()
                .flat_map(|&ti| (0..tasks[ti].1.len()).map(move |ii| (ti, ii)))
                .collect();
            for _ in 0..n {
                let (ti, ii) = anchors[rng.random_range(0..anchors.len())];
                let instrs = &tasks[ti].1;
                let mut jj = rng.random_range(0..instrs.len() - 1);
                if jj >= ii {
                    jj += 1;
                }
                pairs.push(positive(instrs[ii], instrs[jj]));
            }
        }
    }

    let n_neg = n_neg.unwrap_or(pairs.len());
    let anchors: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|ti| (0..tasks[ti].1.len()).map(move |ii| (ti, ii)))
        .collect();
    let mut foreign_cache: HashMap<usize, Vec<usize>> = HashMap::new();
    for _ in 0..n_neg {
        let (ti, ii) = anchors[rng.random_range(0..anchors.len())];
        let foreign = foreign_cache.entry(ti).or_insert_with(|| {
            (0..tasks.len())
                .filter(|&o| tasks[o].0.cluster_id != tasks[ti].0.cluster_id)
                .collect()
        });
        let other = foreign[rng.random_range(0..foreign.len())];
        let partner = tasks[other].1[rng.random_range(0..tasks[other].1.len())];
        pairs.push(PairSample {
            a: tasks[ti].1[ii].id.clone(),
            b: partner.id.clone(),
            y: 0,
            origin: PairOrigin::CrossCluster,
        });
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryPair {
    pub text_a: String,
    pub text_b: String,
    pub label: u8,
    pub source: String,
}

pub fn load_auxiliary_pairs(path: &Path) -> Result<Vec<AuxiliaryPair>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: AuxiliaryPair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if pair.label > 1 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                message: format!("label must be 0 or 1, got {}", pair.label),
            });
        }
        out.push(pair);
    }
    Ok(out)
}

/// Resolves pair ids to the texts that get embedded.
#[derive(Debug, Clone, Default)]
pub struct PairTexts {
    texts: HashMap<InstructionId, String>,
}

impl PairTexts {
    pub fn from_corpus(ds: &MetaDataset, use_refined: bool) -> Self {
        let texts = ds
            .tasks
            .iter()
            .flat_map(|t| &t.instructions)
            .map(|i| (i.id.clone(), i.text_for(use_refined).to_owned()))
            .collect();
        PairTexts { texts }
    }

    pub fn get(&self, id: &InstructionId) -> Option<&str> {
        self.texts.get(id).map(String::as_str)
    }

    /// Register auxiliary pairs under synthetic ids and return their samples.
    pub fn add_auxiliary(&mut self, aux: &[AuxiliaryPair]) -> Vec<PairSample> {
        aux.iter()
            .enumerate()
            .map(|(n, p)| {
                let a = InstructionId(format!("aux:{}:{n}:a", p.source));
                let b = InstructionId(format!("aux:{}:{n}:b", p.source));
                self.texts.insert(a.clone(), p.text_a.clone());
                self.texts.insert(b.clone(), p.text_b.clone());
                PairSample {
                    a,
                    b,
                    y: p.label,
                    origin: PairOrigin::Auxiliary,
                }
            })
            .collect()
    }
}

const HEAD_MAGIC: &[u8; 8] = b"INSTAHDW";

/// Linear map applied to base embeddings: `aligned = Wᵀ · base`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    dim_in: usize,
    dim_out: usize,
    /// Row-major, `dim_in` rows of `dim_out`.
    weights: Vec<f64>,
}

impl ProjectionHead {
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        ProjectionHead {
            dim_in: dim,
            dim_out: dim,
            weights,
        }
    }

    pub fn from_weights(dim_in: usize, dim_out: usize, weights: Vec<f64>) -> Result<Self> {
        if dim_in == 0 || dim_out == 0 || weights.len() != dim_in * dim_out {
            return Err(Error::Config(format!(
                "head of {dim_in}x{dim_out} needs {} weights, got {}",
                dim_in * dim_out,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("head weights must be finite".into()));
        }
        Ok(ProjectionHead {
            dim_in,
            dim_out,
            weights,
        })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn project(&self, e: &[f64]) -> Vec<f64> {
        assert_eq!(e.len(), self.dim_in, "embedding dim does not match head");
        let mut out = vec![0.0; self.dim_out];
        for (i, &x) in e.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.dim_out..(i + 1) * self.dim_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
        out
    }

    /// Aligned embedding, re-normalized.
    pub fn apply(&self, e: &EmbeddingVector) -> Result<EmbeddingVector> {
        let projected: Vec<f32> = self.project(&e.to_f64()).into_iter().map(|x| x as f32).collect();
        EmbeddingVector::normalized(&projected)
    }

    /// Short content hash identifying the weights.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.weights.len() * 4);
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&(self.dim_in as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim_out as u32).to_le_bytes());
        for &w in &self.weights {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != HEAD_MAGIC {
            return Err(Error::Schema("not a projection head file (bad magic)".into()));
        }
        let dim_in = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let dim_out = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() != dim_in * dim_out * 4 {
            return Err(Error::Schema(format!(
                "head {dim_in}x{dim_out} expects {} weight bytes, found {}",
                dim_in * dim_out * 4,
                body.len()
            )));
        }
        let weights = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        ProjectionHead::from_weights(dim_in, dim_out, weights).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        ProjectionHead::from_bytes(&bytes)
    }
}

struct Projected {
    u: Vec<f64>,
    v: Vec<f64>,
    nu: f64,
    nv: f64,
    cos: f64,
}

fn project_pair(head: &ProjectionHead, ea: &[f64], eb: &[f64]) -> Result<Projected> {
    let u = head.project(ea);
    let v = head.project(eb);
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for norm in [nu, nv] {
        if norm.is_nan() || norm < MIN_NORM {
            return Err(Error::ZeroNorm { norm });
        }
    }
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    Ok(Projected {
        cos: dot / (nu * nv),
        u,
        v,
        nu,
        nv,
    })
}

/// Cosine between the projected vectors.
pub fn projected_cosine(head: &ProjectionHead, ea: &[f64], eb: &[f64]) -> Result<f64> {
    Ok(project_pair(head, ea, eb)?.cos)
}

/// `(y - cos(Wᵀa, Wᵀb))²`.
pub fn pair_loss(head: &ProjectionHead, ea: &[f64], eb: &[f64], y: f64) -> Result<f64> {
    let c = project_pair(head, ea, eb)?.cos;
    Ok((y - c).powi(2))
}

/// Analytic `∂L/∂W`, row-major `dim_in x dim_out`.
pub fn pair_grad(head: &ProjectionHead, ea: &[f64], eb: &[f64], y: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; head.dim_in * head.dim_out];
    accumulate_grad(head, ea, eb, y, 1.0, &mut grad)?;
    Ok(grad)
}

/// Add `scale · ∂L/∂W` into `grad` and return the pair's loss.
fn accumulate_grad(
    head: &ProjectionHead,
    ea: &[f64],
    eb: &[f64],
    y: f64,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let p = project_pair(head, ea, eb)?;
    let g = -2.0 * (y - p.cos) * scale;
    let loss = (y - p.cos).powi(2);
    if g == 0.0 {
        return Ok(loss);
    }
    let inv = 1.0 / (p.nu * p.nv);
    // dc/du = v/(|u||v|) - c·u/|u|², symmetric for v.
    let dcu: Vec<f64> = p
        .u
        .iter()
        .zip(&p.v)
        .map(|(&u, &v)| g * (v * inv - p.cos * u / (p.nu * p.nu)))
        .collect();
    let dcv: Vec<f64> = p
        .u
        .iter()
        .zip(&p.v)
        .map(|(&u, &v)| g * (u * inv - p.cos * v / (p.nv * p.nv)))
        .collect();
    let d = head.dim_out;
    for (e, dc) in [(ea, &dcu), (eb, &dcv)] {
        for (i, &x) in e.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (gr, &dd) in grad[i * d..(i + 1) * d].iter_mut().zip(dc.iter()) {
                *gr += x * dd;
            }
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub auxiliary_pairs_path: Option<PathBuf>,
    /// Positive pair count; `None` takes every same-task pair.
    pub n_pos: Option<usize>,
    /// Negative pair count; `None` matches the positive count.
    pub n_neg: Option<usize>,
    pub use_refined: bool,
}

impl TrainConfig {
    /// Defaults for many-instructions-per-task corpora (P3 style).
    pub fn p3() -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            epochs: 5,
            batch_size: 32,
            seed: 0,
            val_fraction: 0.1,
            auxiliary_pairs_path: None,
            n_pos: None,
            n_neg: None,
            use_refined: true,
        }
    }

    /// Defaults for single-definition corpora with paraphrases (NIV2 style).
    pub fn niv2() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            ..TrainConfig::p3()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must be in (0,1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::p3()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained (identity) head.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub auxiliary_pairs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

/// Weight norm growth beyond this factor of the initial head counts as divergence.
pub const MAX_WEIGHT_GROWTH: f64 = 1e3;

/// Split pairs into (train, validation) with a seeded shuffle.
pub fn split_pairs(
    mut pairs: Vec<PairSample>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<PairSample>, Vec<PairSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5a11);
    pairs.shuffle(&mut rng);
    let n_val = if pairs.len() < 2 {
        0
    } else {
        ((pairs.len() as f64 * val_fraction).round() as usize).clamp(1, pairs.len() - 1)
    };
    let train = pairs.split_off(n_val);
    (train, pairs)
}

pub fn train_head(
    ds: &MetaDataset,
    embedder: &Embedder,
    cfg: &TrainConfig,
) -> Result<(ProjectionHead, TrainReport)> {
    cfg.validate()?;
    let mut pairs = sample_pairs(ds, cfg.n_pos, cfg.n_neg, cfg.seed)?;
    let mut texts = PairTexts::from_corpus(ds, cfg.use_refined);
    let mut n_aux = 0;
    if let Some(path) = &cfg.auxiliary_pairs_path {
        let aux = load_auxiliary_pairs(path)?;
        n_aux = aux.len();
        pairs.extend(texts.add_auxiliary(&aux));
    }
    let (train, val) = split_pairs(pairs, cfg.val_fraction, cfg.seed);
    let (head, mut report) = train_head_on_pairs(&train, &val, &texts, embedder, cfg)?;
    report.auxiliary_pairs = n_aux;
    Ok((head, report))
}

/// Base embeddings (f64) for every id referenced by `pairs`.
pub fn embed_pair_texts(
    pairs: &[&PairSample],
    texts: &PairTexts,
    embedder: &Embedder,
) -> Result<HashMap<InstructionId, Vec<f64>>> {
    let mut ids: Vec<&InstructionId> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for p in pairs {
        for id in [&p.a, &p.b] {
            if seen.insert(id) {
                ids.push(id);
            }
        }
    }
    let strs = ids
        .iter()
        .map(|id| {
            texts
                .get(id)
                .ok_or_else(|| Error::Schema(format!("no text for pair member {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let vecs = embedder.embed_texts(&strs)?;
    Ok(ids.into_iter().cloned().zip(vecs.iter().map(|v| v.to_f64())).collect())
}

fn mean_loss(head: &ProjectionHead, pairs: &[PairSample], emb: &HashMap<InstructionId, Vec<f64>>) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in pairs {
        total += pair_loss(head, &emb[&p.a], &emb[&p.b], p.label())?;
    }
    Ok(total / pairs.len() as f64)
}

pub fn train_head_on_pairs(
    train: &[PairSample],
    val: &[PairSample],
    texts: &PairTexts,
    embedder: &Embedder,
    cfg: &TrainConfig,
) -> Result<(ProjectionHead, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InsufficientPairs("no training pairs after the validation split".into()));
    }
    let all: Vec<&PairSample> = train.iter().chain(val).collect();
    let emb = embed_pair_texts(&all, texts, embedder)?;

    let mut head = ProjectionHead::identity(embedder.dim());
    let initial_norm = head.frobenius_norm();
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: mean_loss(&head, train, &emb)?,
        val_loss: mean_loss(&head, val, &emb)?,
    }];
    let mut best = (0usize, records[0].val_loss, head.clone());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x000a_119e));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; head.dim_in * head.dim_out];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let p = &train[i];
                accumulate_grad(&head, &emb[&p.a], &emb[&p.b], p.label(), scale, &mut grad)
                    .map_err(|e| Error::Divergence {
                        epoch,
                        reason: e.to_string(),
                    })?;
            }
            for (w, g) in head.weights.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
            let norm = head.frobenius_norm();
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: "non-finite weights".into(),
                });
            }
            if norm > MAX_WEIGHT_GROWTH * initial_norm {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("weight norm {norm:.3e} exceeds {MAX_WEIGHT_GROWTH}x its initial value"),
                });
            }
        }
        let train_loss = mean_loss(&head, train, &emb);
        let val_loss = mean_loss(&head, val, &emb);
        let (train_loss, val_loss) = match (train_loss, val_loss) {
            (Ok(t), Ok(v)) if t.is_finite() && v.is_finite() => (t, v),
            (Err(e), _) | (_, Err(e)) => {
                return Err(Error::Divergence {
                    epoch,
                    reason: e.to_string(),
                })
            }
            _ => {
                return Err(Error::Divergence {
                    epoch,
                    reason: "non-finite loss".into(),
                })
            }
        };
        log::info!("epoch {epoch}: train loss {train_loss:.6}, val loss {val_loss:.6}");
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.1 {
            best = (epoch, val_loss, head.clone());
        }
    }
    let report = TrainReport {
        epochs: records,
        best_epoch: best.0,
        best_val_loss: best.1,
        train_pairs: train.len(),
        val_pairs: val.len(),
        auxiliary_pairs: 0,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
    };
    Ok((best.2, report))
}

/// Mean positive cosine minus mean negative cosine under `head`.
pub fn cosine_margin(
    head: &ProjectionHead,
    pairs: &[PairSample],
    emb: &HashMap<InstructionId, Vec<f64>>,
) -> Result<f64> {
    let (mut pos, mut np, mut neg, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for p in pairs {
        let c = projected_cosine(head, &emb[&p.a], &emb[&p.b])?;
        if p.y == 1 {
            pos += c;
            np += 1;
        } else {
            neg += c;
            nn += 1;
        }
    }
    if np == 0 || nn == 0 {
        return Err(Error::InsufficientPairs("margin needs both positive and negative pairs".into()));
    }
    Ok(pos / np as f64 - neg / nn as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{InstructionRole, LoadOptions};
    use crate::embed::ReferenceBackend;
    use std::sync::Arc;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn loss_examples() {
        let id = ProjectionHead::identity(2);
        assert_eq!(pair_loss(&id, &[1.0, 0.0], &[1.0, 0.0], 1.0).unwrap(), 0.0);
        assert_eq!(pair_loss(&id, &[1.0, 0.0], &[0.0, 3.0], 0.0).unwrap(), 0.0);
        // cos = 0.5
        let b = [0.5, 3f64.sqrt() / 2.0];
        assert!((pair_loss(&id, &[1.0, 0.0], &b, 1.0).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_projection_is_an_error() {
        let head = ProjectionHead::from_weights(2, 1, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            pair_loss(&head, &[0.0, 1.0], &[1.0, 0.0], 1.0),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn identical_positive_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_vec(&mut rng, 32);
        let head = ProjectionHead::from_weights(8, 4, w).unwrap();
        let e = rand_vec(&mut rng, 8);
        let g = pair_grad(&head, &e, &e, 1.0).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = ProjectionHead::from_weights(8, 4, rand_vec(&mut rng, 32)).unwrap();
        let a = rand_vec(&mut rng, 8);
        let b = rand_vec(&mut rng, 8);
        let a2: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        let c1 = projected_cosine(&head, &a, &b).unwrap();
        let c2 = projected_cosine(&head, &a2, &b).unwrap();
        assert!((c1 - c2).abs() < 1e-12);
    }

    #[test]
    fn loss_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let head = ProjectionHead::from_weights(6, 3, rand_vec(&mut rng, 18)).unwrap();
            let a = rand_vec(&mut rng, 6);
            let b = rand_vec(&mut rng, 6);
            for y in [0.0, 1.0] {
                let l = pair_loss(&head, &a, &b, y).unwrap();
                assert!((0.0..=4.0).contains(&l));
            }
        }
    }

    #[test]
    fn head_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let head = ProjectionHead::from_weights(3, 2, vec![1.0, -2.0, 0.5, 0.25, 3.0, 4.0]).unwrap();
        let p = dir.path().join("head.bin");
        head.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"INSTAHDW");
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(ProjectionHead::load(&p).unwrap(), head);
        assert!(ProjectionHead::from_bytes(&bytes[..20]).is_err());
        assert!(ProjectionHead::from_bytes(b"NOTAHEAD\0\0\0\0\0\0\0\0").is_err());
    }

    fn tiny_corpus() -> MetaDataset {
        let t = |id: &str, cluster: &str, instrs: &[&str]| {
            Task::new(
                id,
                cluster,
                Split::Train,
                instrs
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (format!("{id}/{i}"), s.to_string(), InstructionRole::Original))
                    .collect(),
            )
        };
        MetaDataset::from_tasks(
            "tiny",
            vec![
                t("a", "NLI", &["does the premise entail it", "is the hypothesis implied"]),
                t("b", "NLI", &["premise and hypothesis agree?", "entailment check now"]),
                t("c", "Summ", &["summarize the news article", "write a short summary"]),
            ],
            LoadOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn all_positive_pairs_enumerated() {
        let ds = tiny_corpus();
        let pairs = sample_pairs(&ds, None, None, 1).unwrap();
        let pos = pairs.iter().filter(|p| p.y == 1).count();
        assert_eq!(pos, 3);
        assert_eq!(pairs.len(), 6);
        assert!(pairs.contains(&PairSample {
            a: "a/0".into(),
            b: "a/1".into(),
            y: 1,
            origin: PairOrigin::SameTask
        }));
        assert_eq!(pairs, sample_pairs(&ds, None, None, 1).unwrap());
    }

    #[test]
    fn single_instruction_tasks_without_paraphrases_fail() {
        let ds = MetaDataset::from_tasks(
            "x",
            vec![
                Task::new("a", "X", Split::Train, vec![("a/0".into(), "one".into(), InstructionRole::Original)]),
                Task::new("b", "Y", Split::Train, vec![("b/0".into(), "two".into(), InstructionRole::Original)]),
            ],
            LoadOptions::default(),
        )
        .unwrap();
        assert!(matches!(sample_pairs(&ds, None, None, 0), Err(Error::InsufficientPairs(_))));
    }

    #[test]
    fn zero_epochs_returns_identity() {
        let ds = tiny_corpus();
        let embedder = Embedder::new(Arc::new(ReferenceBackend::new(64).unwrap()));
        let cfg = TrainConfig {
            epochs: 0,
            learning_rate: 0.1,
            ..TrainConfig::p3()
        };
        let (head, report) = train_head(&ds, &embedder, &cfg).unwrap();
        assert_eq!(head, ProjectionHead::identity(64));
        assert_eq!(report.epochs.len(), 1);
        assert_eq!(report.best_val_loss, report.epochs[0].val_loss);
    }

    #[test]
    fn absurd_learning_rate_diverges() {
        let ds = tiny_corpus();
        let embedder = Embedder::new(Arc::new(ReferenceBackend::new(64).unwrap()));
        let cfg = TrainConfig {
            learning_rate: 1e6,
            ..TrainConfig::p3()
        };
        assert!(matches!(train_head(&ds, &embedder, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = TrainConfig {
            val_fraction: 1.0,
            ..TrainConfig::p3()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::p3().learning_rate, 1e-6);
        assert_eq!(TrainConfig::niv2().learning_rate, 1e-5);
        assert_eq!(TrainConfig::default().epochs, 5);
    }
}
