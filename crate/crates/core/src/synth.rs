//! Deterministic synthetic corpora for tests, benchmarks and demos.
//!
//! Two shapes mirror the public meta-datasets' statistics (many templated
//! instructions per task, or one definition plus one paraphrase per task).
//! Instruction wording is built from per-cluster vocabularies so that tasks in
//! one cluster read alike and tasks in different clusters do not.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    load_manifest, InstructionRole, LoadOptions, ManifestSchema, MetaDataset, Split, Task, TaskExample,
    TaskExamples,
};
use crate::error::{Error, Result};
use crate::seeding::derived_rng;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INSTANCES_FILE: &str = "instances.jsonl";

/// Fields present on every synthetic instance.
pub const INSTANCE_FIELDS: [&str; 5] = ["input", "output", "premise", "question", "answer_choices"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    /// Several templated prompts per task with `{{field}}` slots.
    Templated,
    /// One task definition per task plus one paraphrase used only for alignment.
    Definition,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape {
    pub train_tasks: usize,
    pub train_clusters: usize,
    pub eval_tasks: usize,
    pub eval_clusters: usize,
    /// Total original instructions across all tasks (templated style), spread
    /// as evenly as possible.
    pub total_instructions: usize,
    /// Instances in the shard every task reads from.
    pub instances_per_task: usize,
    pub style: Style,
    pub seed: u64,
}

impl Shape {
    /// 35 train tasks in 8 clusters, 11 eval tasks in 4 clusters, 389
    /// instructions over 46 tasks (8.46 on average, the closest two-decimal
    /// mean to 8.45 that 46 tasks allow).
    pub fn p3(instances_per_task: usize) -> Self {
        Shape {
            train_tasks: 35,
            train_clusters: 8,
            eval_tasks: 11,
            eval_clusters: 4,
            total_instructions: 389,
            instances_per_task,
            style: Style::Templated,
            seed: 3,
        }
    }

    /// 756 train tasks in 63 clusters, 33 eval tasks in 12 clusters, one
    /// definition and one paraphrase each.
    pub fn niv2(instances_per_task: usize) -> Self {
        Shape {
            train_tasks: 756,
            train_clusters: 63,
            eval_tasks: 33,
            eval_clusters: 12,
            total_instructions: 756 + 33,
            instances_per_task,
            style: Style::Definition,
            seed: 2,
        }
    }

    pub fn tasks(&self) -> usize {
        self.train_tasks + self.eval_tasks
    }
}

const THEMES: [&[&str]; 12] = [
    &["paraphrase", "same meaning", "restate", "equivalent wording", "reworded"],
    &["sentiment", "positive or negative", "review", "opinion", "feeling"],
    &["trivia question", "short answer", "recall the fact", "general knowledge", "answer briefly"],
    &["passage", "extract the span", "read the text", "locate the answer", "quote the line"],
    &["summarize", "summary", "condense", "headline", "key points"],
    &["topic", "category", "classify the article", "subject area", "theme label"],
    &["table", "structured record", "describe the attributes", "data fields", "write a sentence"],
    &["which option", "best choice", "pick one", "alternatives", "correct option"],
    &["entailment", "hypothesis", "premise", "contradiction", "follows from"],
    &["pronoun", "refers to", "coreference", "mention", "antecedent"],
    &["complete the sentence", "ending", "continuation", "what happens next", "finish the story"],
    &["word meaning", "same sense", "usage", "context of the word", "definition of the term"],
];

const SYLLABLES: [&str; 20] = [
    "ka", "lo", "mi", "zu", "te", "ra", "no", "vi", "sa", "pe", "do", "gu", "fi", "ha", "xo", "be", "qui", "wy",
    "jo", "re",
];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables).map(|_| *SYLLABLES.choose(rng).expect("nonempty")).collect()
}

/// Phrases characterizing cluster `c`. The first twelve clusters use
/// readable themes; beyond that, pseudo-word vocabularies.
fn cluster_vocab(c: usize, seed: u64) -> Vec<String> {
    if c < THEMES.len() {
        return THEMES[c].iter().map(|s| s.to_string()).collect();
    }
    let mut rng = derived_rng(seed, &["vocab", &c.to_string()]);
    (0..5).map(|_| pseudo_word(&mut rng, 3)).collect()
}

fn cluster_name(c: usize) -> String {
    format!("c{c:02}")
}

fn task_name(split: Split, n: usize) -> String {
    match split {
        Split::Train => format!("train_{n:03}"),
        Split::Eval => format!("eval_{n:03}"),
    }
}

fn templated_instruction(rng: &mut ChaCha8Rng, vocab: &[String], task_word: &str) -> String {
    let mut picks: Vec<&String> = vocab.iter().collect();
    picks.shuffle(rng);
    let field = *["premise", "question", "input"].choose(rng).expect("nonempty");
    let choices = if rng.random_bool(0.5) {
        " Options: {{answer_choices}}"
    } else {
        ""
    };
    match rng.random_range(0..3) {
        0 => format!("{{{{{field}}}}} {} about {task_word}: {} or {}?{choices}", picks[0], picks[1], picks[2]),
        1 => format!("Given {{{{{field}}}}}, {} and {} for {task_word}.{choices}", picks[0], picks[1]),
        _ => format!("{task_word}. {} {} {{{{{field}}}}} {}{choices}", picks[0], picks[1], picks[2]),
    }
}

fn definition(rng: &mut ChaCha8Rng, vocab: &[String], task_word: &str) -> (String, String) {
    let mut picks: Vec<&String> = vocab.iter().collect();
    picks.shuffle(rng);
    let def = format!(
        "In this task you are given a {task_word} text. Focus on {} with respect to {} and {}.",
        picks[0], picks[1], picks[2]
    );
    let para = format!(
        "You receive a {task_word} input; the focus is {}, considering {} as well as {}.",
        picks[0], picks[2], picks[1]
    );
    (def, para)
}

/// Write `n` instances carrying every field in [`INSTANCE_FIELDS`].
pub fn write_instance_shard(path: &Path, n: usize, seed: u64) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut rng = derived_rng(seed, &["instances"]);
    for i in 0..n {
        let a = pseudo_word(&mut rng, 2);
        let b = pseudo_word(&mut rng, 2);
        let rec = serde_json::json!({
            "id": format!("i{i:06}"),
            "fields": {
                "input": format!("{a} {b} sample {i}"),
                "output": if i % 2 == 0 { "yes" } else { "no" },
                "premise": format!("The {a} met the {b}."),
                "question": format!("Did the {a} meet anyone?"),
                "answer_choices": "yes ||| no",
            }
        });
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::io(path.display().to_string(), e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Generate a corpus of the given shape under `dir`, write its manifest and
/// instance shard, and load it back.
pub fn generate(shape: &Shape, dir: &Path) -> Result<MetaDataset> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let shard = dir.join(INSTANCES_FILE);
    write_instance_shard(&shard, shape.instances_per_task, shape.seed)?;

    let n_tasks = shape.tasks();
    let base = shape.total_instructions / n_tasks;
    let extra = shape.total_instructions % n_tasks;
    // Tasks receiving one extra instruction, spread over both splits.
    let mut bonus = vec![false; n_tasks];
    for i in 0..extra {
        bonus[i * n_tasks / extra.max(1)] = true;
    }

    let mut tasks = Vec::with_capacity(n_tasks);
    let plan = [
        (Split::Train, shape.train_tasks, shape.train_clusters, 0),
        (Split::Eval, shape.eval_tasks, shape.eval_clusters, shape.train_clusters),
    ];
    let mut global = 0;
    for (split, count, clusters, cluster_base) in plan {
        for n in 0..count {
            let c = cluster_base + n % clusters;
            let vocab = cluster_vocab(c, shape.seed);
            let id = task_name(split, n);
            let mut rng = derived_rng(shape.seed, &["task", &id]);
            let task_word = pseudo_word(&mut rng, 2);
            let instructions = match shape.style {
                Style::Templated => {
                    let k = base + usize::from(bonus[global]);
                    (0..k)
                        .map(|j| {
                            (
                                format!("{id}/{j}"),
                                templated_instruction(&mut rng, &vocab, &task_word),
                                InstructionRole::Original,
                            )
                        })
                        .collect()
                }
                Style::Definition => {
                    let (def, para) = definition(&mut rng, &vocab, &task_word);
                    vec![
                        (format!("{id}/def"), def, InstructionRole::Original),
                        (format!("{id}/para"), para, InstructionRole::Augmented),
                    ]
                }
            };
            let mut task = Task::new(id.as_str(), cluster_name(c).as_str(), split, instructions)
                .with_instances(INSTANCES_FILE, shard.clone(), shape.instances_per_task);
            if shape.style == Style::Definition {
                task.examples = Some(TaskExamples {
                    positive: (1..=2)
                        .map(|e| TaskExample {
                            input: format!("{task_word} example {e}"),
                            output: if e == 1 { "yes".into() } else { "no".into() },
                        })
                        .collect(),
                    negative: vec![],
                });
            }
            tasks.push(task);
            global += 1;
        }
    }
    let ds = MetaDataset::from_tasks("synthetic", tasks, LoadOptions::default())?;
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, ds.to_manifest_string()).map_err(|e| Error::io(manifest.display().to_string(), e))?;
    load_manifest(&manifest, ManifestSchema::V1)
}

const BOILERPLATE: &str = "Please read the following input carefully, think about it step by step, \
and then write the single best response you can for the request described here";

/// In-memory train-split corpus of four clusters for selector alignment.
///
/// Every instruction starts with the same long boilerplate; the cluster is
/// signalled only by a short cue phrase, so raw embeddings score every pair
/// as similar. `variant` changes task wording while keeping cluster cues,
/// which gives a held-out corpus with the same cluster structure.
pub fn alignment_corpus(tasks_per_cluster: usize, instructions_per_task: usize, variant: u64) -> Result<MetaDataset> {
    let mut tasks = Vec::new();
    for c in 0..4 {
        let vocab = cluster_vocab(c, 0);
        for t in 0..tasks_per_cluster {
            let id = format!("v{variant}_c{c}_t{t}");
            let mut rng = derived_rng(variant, &["align", &id]);
            let noise = pseudo_word(&mut rng, 2);
            let instructions = (0..instructions_per_task)
                .map(|j| {
                    let cue = vocab.choose(&mut rng).expect("nonempty");
                    let cue2 = vocab.choose(&mut rng).expect("nonempty");
                    (
                        format!("{id}/{j}"),
                        format!("{BOILERPLATE} ({noise}): {cue}, {cue2}."),
                        InstructionRole::Original,
                    )
                })
                .collect();
            tasks.push(Task::new(id.as_str(), cluster_name(c).as_str(), Split::Train, instructions));
        }
    }
    MetaDataset::from_tasks(format!("alignment-{variant}"), tasks, LoadOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::corpus_stats;

    #[test]
    fn small_templated_corpus_loads() {
        let dir = tempfile::tempdir().unwrap();
        let shape = Shape {
            train_tasks: 6,
            train_clusters: 3,
            eval_tasks: 2,
            eval_clusters: 1,
            total_instructions: 17,
            instances_per_task: 10,
            style: Style::Templated,
            seed: 1,
        };
        let ds = generate(&shape, dir.path()).unwrap();
        let stats = corpus_stats(&ds);
        assert_eq!((stats.train_tasks, stats.eval_tasks), (6, 2));
        assert_eq!((stats.train_clusters, stats.eval_clusters), (3, 1));
        let total: usize = ds.tasks.iter().map(|t| t.selection_instructions().count()).sum();
        assert_eq!(total, 17);
        for t in &ds.tasks {
            assert_eq!(t.instance_ids().unwrap().len(), 10);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let shape = Shape {
            instances_per_task: 5,
            ..Shape::p3(5)
        };
        generate(&shape, a.path()).unwrap();
        generate(&shape, b.path()).unwrap();
        for f in [MANIFEST_FILE, INSTANCES_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
