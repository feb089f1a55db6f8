//! Sample-based selection: instructions are rendered with up to `n` sampled
//! instances each, and similarity is taken over the rendered samples.

use std::collections::HashMap;

use super::{select_top_k, Aggregation, Method, ScoreMatrix, SelectionResult};
use crate::corpus::{Instance, Instruction, InstructionId, MetaDataset, Task, TaskId};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::mixture::fill_placeholders;
use crate::refine::parse_placeholders;
use crate::seeding::derived_rng;

pub const DEFAULT_SAMPLES_PER_INSTRUCTION: usize = 32;

/// Text embedded for one (instruction, instance) sample.
///
/// Placeholders in the raw instruction are filled from the instance. An
/// instruction without placeholders is followed by the instance's `input`
/// field, or by all field values in key order when there is no `input`.
pub fn sample_text(instruction: &str, instance: &Instance) -> Result<String> {
    if !parse_placeholders(instruction)?.is_empty() {
        return fill_placeholders(instruction, &instance.fields);
    }
    let body = match instance.fields.get("input") {
        Some(input) => input.clone(),
        None => instance.fields.values().cloned().collect::<Vec<_>>().join("\n"),
    };
    Ok(format!("{instruction}\n{body}"))
}

pub struct DstaRun<'a> {
    pub ds: &'a MetaDataset,
    pub embedder: &'a Embedder,
    /// Instances sampled per instruction.
    pub n: usize,
    pub seed: u64,
}

impl DstaRun<'_> {
    fn samples_for(&self, task: &Task, instr: &Instruction) -> Result<Vec<String>> {
        if !task.has_instances() {
            return Err(Error::MissingInstances(task.id.clone()));
        }
        let take = self.n.min(task.instance_count);
        let mut rng = derived_rng(self.seed, &["dsta", instr.id.as_str()]);
        let positions = rand::seq::index::sample(&mut rng, task.instance_count, take).into_vec();
        task.instances_at(&positions)?
            .iter()
            .map(|inst| sample_text(&instr.text, inst))
            .collect()
    }

    /// Selections for several targets; each instruction's samples are
    /// rendered and encoded once.
    pub fn select_many(&self, targets: &[TaskId], k: usize) -> Result<Vec<(SelectionResult, ScoreMatrix)>> {
        if self.n == 0 {
            return Err(Error::Config("samples per instruction must be positive".into()));
        }
        let mut order: Vec<(InstructionId, TaskId, usize, usize)> = Vec::new();
        let mut seen: HashMap<InstructionId, usize> = HashMap::new();
        let mut texts: Vec<String> = Vec::new();
        let mut pools = Vec::new();
        let mut add_task = |task: &Task, texts: &mut Vec<String>| -> Result<()> {
            for instr in task.selection_instructions() {
                if seen.contains_key(&instr.id) {
                    continue;
                }
                let samples = self.samples_for(task, instr)?;
                seen.insert(instr.id.clone(), order.len());
                order.push((instr.id.clone(), task.id.clone(), texts.len(), samples.len()));
                texts.extend(samples);
            }
            Ok(())
        };
        for target in targets {
            let task = self.ds.task(target)?;
            if task.selection_instructions().next().is_none() {
                return Err(Error::NoInstructions(target.clone()));
            }
            add_task(task, &mut texts)?;
            let pool = self.ds.eligible_pool(target)?;
            if pool.is_empty() {
                return Err(Error::NoEligibleTasks(target.clone()));
            }
            for t in &pool {
                add_task(t, &mut texts)?;
            }
            pools.push(pool);
        }

        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let vectors = self.embedder.embed_texts(&refs)?;
        let backend_id = format!(
            "{}:{}",
            self.embedder.backend().id(),
            self.embedder.backend().model_id()
        );
        let expand = |task: &Task| {
            task.selection_instructions()
                .flat_map(|i| {
                    let (id, tid, start, len) = order[seen[&i.id]].clone();
                    (start..start + len).map(move |s| (id.clone(), tid.clone(), s))
                })
                .collect::<Vec<_>>()
        };

        let mut out = Vec::with_capacity(targets.len());
        for (target, pool) in targets.iter().zip(pools) {
            let rows = expand(self.ds.task(target)?)
                .into_iter()
                .map(|(id, _, s)| (id, vectors[s].clone()))
                .collect();
            let cols = pool
                .iter()
                .flat_map(|t| expand(t))
                .map(|(id, tid, s)| (id, tid, vectors[s].clone()))
                .collect();
            let sm = ScoreMatrix::compute(target.clone(), rows, cols, backend_id.clone(), None);
            let sel = select_top_k(&sm, self.ds, k, Aggregation::Max, Method::Dsta)?;
            out.push((sel, sm));
        }
        Ok(out)
    }
}

pub fn dsta_select(
    target: &TaskId,
    ds: &MetaDataset,
    embedder: &Embedder,
    n: usize,
    seed: u64,
    k: usize,
) -> Result<SelectionResult> {
    let run = DstaRun { ds, embedder, n, seed };
    Ok(run.select_many(std::slice::from_ref(target), k)?.remove(0).0)
}
