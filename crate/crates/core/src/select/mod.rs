//! Instruction-similarity task selection.
//!
//! For a target task, every selection-visible target instruction is compared
//! with every instruction of every eligible training task. A task's score is
//! its best cell, and the `k` best tasks are selected. Ties are broken by
//! ascending task id.

mod correlation;
mod cost;
mod dsta;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use correlation::{average_ranks, rank_correlation, spearman, TransferMatrix};
pub use cost::{cost_report, CostComparison, CostReport};
pub use dsta::{dsta_select, sample_text, DstaRun, DEFAULT_SAMPLES_PER_INSTRUCTION};

use crate::align::ProjectionHead;
use crate::corpus::{InstructionId, MetaDataset, TaskId};
use crate::embed::{cosine, Embedder, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Insta,
    InstaAligned,
    Dsta,
    Random,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Insta => "insta",
            Method::InstaAligned => "insta_aligned",
            Method::Dsta => "dsta",
            Method::Random => "random",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "insta" => Ok(Method::Insta),
            "insta_aligned" => Ok(Method::InstaAligned),
            "dsta" => Ok(Method::Dsta),
            "random" => Ok(Method::Random),
            other => Err(Error::Config(format!("unknown selection method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    /// Ablation only.
    Mean,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Cosine scores between target rows and training columns.
///
/// Rows and columns are labelled by instruction id. In sample-based mode an
/// instruction labels one row or column per rendered sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub target: TaskId,
    pub target_instructions: Vec<InstructionId>,
    pub train_instructions: Vec<InstructionId>,
    /// Owning task of each column.
    pub train_tasks: Vec<TaskId>,
    /// Row-major, `rows x cols`.
    pub values: Vec<f64>,
    pub backend_id: String,
    pub head_id: Option<String>,
    /// Cosine evaluations performed to fill the matrix.
    pub sim_ops: u64,
}

impl ScoreMatrix {
    pub fn rows(&self) -> usize {
        self.target_instructions.len()
    }

    pub fn cols(&self) -> usize {
        self.train_instructions.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    /// Fill a matrix from embedded rows and columns, one cosine per cell.
    pub(crate) fn compute(
        target: TaskId,
        rows: Vec<(InstructionId, EmbeddingVector)>,
        cols: Vec<(InstructionId, TaskId, EmbeddingVector)>,
        backend_id: String,
        head_id: Option<String>,
    ) -> Self {
        let n_cols = cols.len();
        let mut values = vec![0.0; rows.len() * n_cols];
        if n_cols > 0 {
            values
                .par_chunks_mut(n_cols)
                .zip(rows.par_iter())
                .for_each(|(out, (_, r))| {
                    for (cell, (_, _, c)) in out.iter_mut().zip(&cols) {
                        *cell = cosine(r.values(), c.values());
                    }
                });
        }
        let sim_ops = values.len() as u64;
        let (train_instructions, train_tasks) = cols.into_iter().map(|(i, t, _)| (i, t)).unzip();
        ScoreMatrix {
            target,
            target_instructions: rows.into_iter().map(|(i, _)| i).collect(),
            train_instructions,
            train_tasks,
            values,
            backend_id,
            head_id,
            sim_ops,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTask {
    pub task: TaskId,
    pub score: f64,
    /// (target instruction, training instruction) achieving the score.
    pub via: Option<(InstructionId, InstructionId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub target: TaskId,
    pub method: Method,
    pub k: usize,
    pub ranked: Vec<RankedTask>,
    /// Set when `k` exceeded the eligible pool.
    #[serde(skip)]
    pub truncated: bool,
}

impl SelectionResult {
    pub fn task_ids(&self) -> Vec<TaskId> {
        self.ranked.iter().map(|r| r.task.clone()).collect()
    }

    pub fn scores(&self) -> BTreeMap<TaskId, f64> {
        self.ranked.iter().map(|r| (r.task.clone(), r.score)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("selection serializes") + "\n"
    }
}

/// Embeds instructions for one or many targets, sharing the training side.
pub struct InstructionScorer<'a> {
    pub ds: &'a MetaDataset,
    pub embedder: &'a Embedder,
    pub head: Option<&'a ProjectionHead>,
    pub use_refined: bool,
}

impl<'a> InstructionScorer<'a> {
    /// One matrix per target. Every distinct instruction is encoded once.
    pub fn score_all(&self, targets: &[TaskId]) -> Result<Vec<ScoreMatrix>> {
        let mut pools = Vec::with_capacity(targets.len());
        let mut slot: HashMap<InstructionId, usize> = HashMap::new();
        let mut texts: Vec<&str> = Vec::new();
        let mut register = |id: &InstructionId, text: &'a str| {
            if !slot.contains_key(id) {
                slot.insert(id.clone(), texts.len());
                texts.push(text);
            }
        };
        for target in targets {
            let task = self.ds.task(target)?;
            let visible: Vec<_> = task.selection_instructions().collect();
            if visible.is_empty() {
                return Err(Error::NoInstructions(target.clone()));
            }
            for i in visible {
                register(&i.id, i.text_for(self.use_refined));
            }
            let pool: Vec<_> = self
                .ds
                .eligible_pool(target)?
                .into_iter()
                .filter(|t| t.selection_instructions().next().is_some())
                .collect();
            if pool.is_empty() {
                return Err(Error::NoEligibleTasks(target.clone()));
            }
            for t in &pool {
                for i in t.selection_instructions() {
                    register(&i.id, i.text_for(self.use_refined));
                }
            }
            pools.push(pool);
        }
        let mut vectors = self.embedder.embed_texts(&texts)?;
        if let Some(head) = self.head {
            vectors = vectors.iter().map(|v| head.apply(v)).collect::<Result<_>>()?;
        }
        let backend_id = format!(
            "{}:{}",
            self.embedder.backend().id(),
            self.embedder.backend().model_id()
        );
        let head_id = self.head.map(ProjectionHead::fingerprint);

        let mut out = Vec::with_capacity(targets.len());
        for (target, pool) in targets.iter().zip(pools) {
            let task = self.ds.task(target)?;
            let rows = task
                .selection_instructions()
                .map(|i| (i.id.clone(), vectors[slot[&i.id]].clone()))
                .collect();
            let cols = pool
                .iter()
                .flat_map(|t| t.selection_instructions())
                .map(|i| (i.id.clone(), i.task_id.clone(), vectors[slot[&i.id]].clone()))
                .collect();
            out.push(ScoreMatrix::compute(
                target.clone(),
                rows,
                cols,
                backend_id.clone(),
                head_id.clone(),
            ));
        }
        Ok(out)
    }
}

pub fn score_matrix(
    target: &TaskId,
    ds: &MetaDataset,
    embedder: &Embedder,
    head: Option<&ProjectionHead>,
    use_refined: bool,
) -> Result<ScoreMatrix> {
    let scorer = InstructionScorer {
        ds,
        embedder,
        head,
        use_refined,
    };
    Ok(scorer.score_all(std::slice::from_ref(target))?.remove(0))
}

/// Per-task aggregate scores and their achieving cells, columns grouped by task.
pub fn task_scores(sm: &ScoreMatrix, aggregation: Aggregation) -> Vec<RankedTask> {
    let mut groups: Vec<(TaskId, Vec<usize>)> = Vec::new();
    let mut index: HashMap<&TaskId, usize> = HashMap::new();
    for (j, t) in sm.train_tasks.iter().enumerate() {
        let g = *index.entry(t).or_insert_with(|| {
            groups.push((t.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(j);
    }
    groups
        .into_iter()
        .filter_map(|(task, cols)| {
            let mut best: Option<(f64, usize, usize)> = None;
            let mut sum = 0.0;
            for i in 0..sm.rows() {
                for &j in &cols {
                    let v = sm.get(i, j);
                    sum += v;
                    if best.is_none_or(|(b, _, _)| v > b) {
                        best = Some((v, i, j));
                    }
                }
            }
            let (max, i, j) = best?;
            let score = match aggregation {
                Aggregation::Max => max,
                Aggregation::Mean => sum / (sm.rows() * cols.len()) as f64,
            };
            Some(RankedTask {
                task,
                score,
                via: Some((sm.target_instructions[i].clone(), sm.train_instructions[j].clone())),
            })
        })
        .collect()
}

/// Sort by score descending, then task id ascending.
pub fn rank_tasks(scores: &mut [RankedTask]) {
    scores.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.task.cmp(&b.task)));
}

pub fn select_top_k(
    sm: &ScoreMatrix,
    ds: &MetaDataset,
    k: usize,
    aggregation: Aggregation,
    method: Method,
) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let target = ds.task(&sm.target)?;
    let mut scores: Vec<RankedTask> = task_scores(sm, aggregation)
        .into_iter()
        .filter(|r| {
            ds.task(&r.task)
                .map(|t| t.cluster_id != target.cluster_id)
                .unwrap_or(false)
        })
        .collect();
    rank_tasks(&mut scores);
    let truncated = k > scores.len();
    if truncated {
        log::warn!(
            "k={k} exceeds the {} eligible tasks for {}; returning the whole pool",
            scores.len(),
            sm.target
        );
    }
    scores.truncate(k);
    Ok(SelectionResult {
        target: sm.target.clone(),
        method,
        k,
        ranked: scores,
        truncated,
    })
}

/// Uniform draw without replacement from the eligible pool, in draw order.
pub fn random_select(ds: &MetaDataset, target: &TaskId, k: usize, seed: u64) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let pool = ds.eligible_pool(target)?;
    if pool.is_empty() {
        return Err(Error::NoEligibleTasks(target.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = k.min(pool.len());
    let picks = rand::seq::index::sample(&mut rng, pool.len(), take);
    Ok(SelectionResult {
        target: target.clone(),
        method: Method::Random,
        k,
        ranked: picks
            .into_iter()
            .map(|i| RankedTask {
                task: pool[i].id.clone(),
                score: 0.0,
                via: None,
            })
            .collect(),
        truncated: k > pool.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{InstructionRole, LoadOptions, Split, Task};
    use crate::embed::ReferenceBackend;
    use std::sync::Arc;

    fn task(id: &str, cluster: &str, split: Split, instrs: &[&str]) -> Task {
        Task::new(
            id,
            cluster,
            split,
            instrs
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("{id}/{i}"), s.to_string(), InstructionRole::Original))
                .collect(),
        )
    }

    fn corpus() -> MetaDataset {
        MetaDataset::from_tasks(
            "t",
            vec![
                task("target", "E", Split::Eval, &["Suppose the premise holds", "Is it implied?"]),
                task("a", "A", Split::Train, &["summarize the text", "Suppose the premise holds"]),
                task("b", "B", Split::Train, &["translate into french"]),
                task("c", "C", Split::Train, &["answer the question", "pick the option", "sort words", "count words"]),
                task("d", "E", Split::Eval, &["sibling eval task"]),
            ],
            LoadOptions::default(),
        )
        .unwrap()
    }

    fn embedder() -> Embedder {
        Embedder::new(Arc::new(ReferenceBackend::new(1024).unwrap()))
    }

    #[test]
    fn shape_and_identical_cell() {
        let ds = corpus();
        let sm = score_matrix(&"target".into(), &ds, &embedder(), None, false).unwrap();
        assert_eq!((sm.rows(), sm.cols()), (2, 7));
        assert_eq!(sm.sim_ops, 14);
        let j = sm.train_instructions.iter().position(|i| i.as_str() == "a/1").unwrap();
        assert!((sm.get(0, j) - 1.0).abs() < 1e-12);
        let sel = select_top_k(&sm, &ds, 1, Aggregation::Max, Method::Insta).unwrap();
        assert_eq!(sel.ranked[0].task.as_str(), "a");
        assert_eq!(
            sel.ranked[0].via,
            Some((InstructionId::from("target/0"), InstructionId::from("a/1")))
        );
    }

    #[test]
    fn augmented_and_excluded_never_scored() {
        let mut ds_tasks = corpus().tasks;
        ds_tasks[1].instructions[0].role = InstructionRole::Augmented;
        ds_tasks[3].instructions[1].role = InstructionRole::Excluded;
        let ds = MetaDataset::from_tasks("t", ds_tasks, LoadOptions::default()).unwrap();
        let sm = score_matrix(&"target".into(), &ds, &embedder(), None, false).unwrap();
        let cols: Vec<&str> = sm.train_instructions.iter().map(|i| i.as_str()).collect();
        assert_eq!(cols, ["a/1", "b/0", "c/0", "c/2", "c/3"]);
    }

    #[test]
    fn k_larger_than_pool_returns_pool() {
        let ds = corpus();
        let sm = score_matrix(&"target".into(), &ds, &embedder(), None, false).unwrap();
        let sel = select_top_k(&sm, &ds, 10, Aggregation::Max, Method::Insta).unwrap();
        assert_eq!(sel.ranked.len(), 3);
        assert!(sel.truncated);
        assert!(select_top_k(&sm, &ds, 0, Aggregation::Max, Method::Insta).is_err());
    }

    #[test]
    fn mean_aggregation_is_available() {
        let ds = corpus();
        let sm = score_matrix(&"target".into(), &ds, &embedder(), None, false).unwrap();
        let max = task_scores(&sm, Aggregation::Max);
        let mean = task_scores(&sm, Aggregation::Mean);
        for (a, b) in max.iter().zip(&mean) {
            assert!(b.score <= a.score + 1e-12);
        }
    }

    #[test]
    fn no_pool_is_an_error() {
        let ds = MetaDataset::from_tasks(
            "t",
            vec![task("x", "E", Split::Eval, &["abc def"])],
            LoadOptions::default(),
        )
        .unwrap();
        assert!(matches!(
            score_matrix(&"x".into(), &ds, &embedder(), None, false),
            Err(Error::NoEligibleTasks(_))
        ));
    }

    #[test]
    fn random_selection_is_seeded() {
        let ds = corpus();
        let a = random_select(&ds, &"target".into(), 2, 7).unwrap();
        assert_eq!(a, random_select(&ds, &"target".into(), 2, 7).unwrap());
        let all = random_select(&ds, &"target".into(), 3, 7).unwrap();
        let mut ids = all.task_ids();
        ids.sort();
        assert_eq!(ids, vec![TaskId::from("a"), "b".into(), "c".into()]);
    }

    #[test]
    fn selection_json_layout() {
        let sel = SelectionResult {
            target: "rte".into(),
            method: Method::InstaAligned,
            k: 1,
            ranked: vec![RankedTask {
                task: "qqp".into(),
                score: 0.5,
                via: Some(("rte/0".into(), "qqp/3".into())),
            }],
            truncated: false,
        };
        let v: serde_json::Value = serde_json::from_str(&sel.to_json()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"target": "rte", "method": "insta_aligned", "k": 1,
                "ranked": [{"task": "qqp", "score": 0.5, "via": ["rte/0", "qqp/3"]}]})
        );
        let back: SelectionResult = serde_json::from_str(&sel.to_json()).unwrap();
        assert_eq!(back, sel);
    }
}
