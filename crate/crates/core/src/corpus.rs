//! Meta-dataset manifests: tasks grouped into clusters, their instructions,
//! and lazily indexed instance files.
//!
//! A manifest is JSON Lines with one task per line. Instance files are only
//! opened when something asks for instances (sample-based selection, mixture
//! building), so instruction-only selection never touches them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refine;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

id_newtype!(TaskId);
id_newtype!(ClusterId);
id_newtype!(InstructionId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionRole {
    /// Scored during selection and used for alignment.
    Original,
    /// Paraphrase that only serves as an alignment positive.
    Augmented,
    /// Ignored everywhere.
    Excluded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub id: InstructionId,
    pub task_id: TaskId,
    pub text: String,
    pub refined_text: Option<String>,
    pub role: InstructionRole,
}

impl Instruction {
    pub fn is_selection_visible(&self) -> bool {
        self.role == InstructionRole::Original
    }

    pub fn is_alignment_eligible(&self) -> bool {
        self.role != InstructionRole::Excluded
    }

    /// Text fed to the embedder: the refined form when requested and present.
    pub fn text_for(&self, use_refined: bool) -> &str {
        match (&self.refined_text, use_refined) {
            (Some(refined), true) => refined,
            _ => &self.text,
        }
    }
}

/// One input/output demonstration attached to a task (NIV2 positive and
/// negative task examples). Used for prompt rendering only, never scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskExamples {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positive: Vec<TaskExample>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negative: Vec<TaskExample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub fields: BTreeMap<String, String>,
    /// Byte offset of the record's line in its instance file.
    pub source_offset: u64,
}

#[derive(Debug, Clone)]
struct InstanceRef {
    id: String,
    offset: u64,
}

#[derive(Debug, Default)]
struct InstanceStore {
    path: Option<PathBuf>,
    index: Mutex<Option<Arc<Vec<InstanceRef>>>>,
}

impl Clone for InstanceStore {
    fn clone(&self) -> Self {
        InstanceStore {
            path: self.path.clone(),
            index: Mutex::new(self.index.lock().expect("instance index poisoned").clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub id: TaskId,
    pub cluster_id: ClusterId,
    pub name: String,
    pub split: Split,
    pub instructions: Vec<Instruction>,
    /// Instance file as written in the manifest (relative to the manifest).
    pub instances_path: Option<String>,
    pub instance_count: usize,
    pub examples: Option<TaskExamples>,
    store: InstanceStore,
}

impl Task {
    pub fn new(
        id: impl Into<TaskId>,
        cluster_id: impl Into<ClusterId>,
        split: Split,
        instructions: Vec<(String, String, InstructionRole)>,
    ) -> Self {
        let id = id.into();
        let instructions = instructions
            .into_iter()
            .map(|(iid, text, role)| Instruction {
                id: InstructionId(iid),
                task_id: id.clone(),
                text,
                refined_text: None,
                role,
            })
            .collect();
        Task {
            name: id.0.clone(),
            id,
            cluster_id: cluster_id.into(),
            split,
            instructions,
            instances_path: None,
            instance_count: 0,
            examples: None,
            store: InstanceStore::default(),
        }
    }

    /// Attach an instance file. `resolved` is the path used for reading,
    /// `recorded` is what the manifest stores.
    pub fn with_instances(mut self, recorded: &str, resolved: PathBuf, count: usize) -> Self {
        self.instances_path = Some(recorded.to_owned());
        self.instance_count = count;
        self.store = InstanceStore {
            path: Some(resolved),
            index: Mutex::new(None),
        };
        self
    }

    pub fn selection_instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.instructions.iter().filter(|i| i.is_selection_visible())
    }

    /// Resolved location of the instance file.
    pub fn instances_file(&self) -> Option<&Path> {
        self.store.path.as_deref()
    }

    pub fn has_instances(&self) -> bool {
        self.store.path.is_some() && self.instance_count > 0
    }

    /// Instance ids in file order. Loads the index on first use.
    pub fn instance_ids(&self) -> Result<Vec<String>> {
        Ok(self.index()?.iter().map(|r| r.id.clone()).collect())
    }

    /// Read the instances at the given positions (file order indices).
    pub fn instances_at(&self, positions: &[usize]) -> Result<Vec<Instance>> {
        let index = self.index()?;
        let path = self.store.path.as_ref().expect("index implies path");
        let mut file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut out = Vec::with_capacity(positions.len());
        let mut line = String::new();
        for &pos in positions {
            let r = index.get(pos).ok_or_else(|| {
                Error::Schema(format!("task {}: instance position {pos} out of range", self.id))
            })?;
            file.seek(SeekFrom::Start(r.offset))
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            line.clear();
            BufReader::new(&mut file)
                .read_line(&mut line)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            let rec: InstanceLine = serde_json::from_str(line.trim_end()).map_err(|e| {
                Error::Schema(format!("task {}: instance at offset {}: {e}", self.id, r.offset))
            })?;
            out.push(Instance {
                id: rec.id,
                fields: rec.fields,
                source_offset: r.offset,
            });
        }
        Ok(out)
    }

    fn index(&self) -> Result<Arc<Vec<InstanceRef>>> {
        let Some(path) = &self.store.path else {
            return Err(Error::MissingInstances(self.id.clone()));
        };
        let mut guard = self.store.index.lock().expect("instance index poisoned");
        if let Some(idx) = guard.as_ref() {
            return Ok(Arc::clone(idx));
        }
        let idx = Arc::new(self.build_index(path)?);
        *guard = Some(Arc::clone(&idx));
        Ok(idx)
    }

    fn build_index(&self, path: &Path) -> Result<Vec<InstanceRef>> {
        let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut reader = BufReader::new(file);
        let required: BTreeSet<String> = self
            .instructions
            .iter()
            .filter(|i| i.is_selection_visible())
            .filter_map(|i| refine::parse_placeholders(&i.text).ok())
            .flatten()
            .map(|p| p.name)
            .collect();

        let mut refs = Vec::with_capacity(self.instance_count);
        let mut seen = HashSet::new();
        let mut offset = 0u64;
        let mut line = String::new();
        let mut lineno = 0usize;
        loop {
            line.clear();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            if n == 0 {
                break;
            }
            lineno += 1;
            let start = offset;
            offset += n as u64;
            if line.trim().is_empty() {
                continue;
            }
            let rec: InstanceLine =
                serde_json::from_str(line.trim_end()).map_err(|e| Error::Parse {
                    path: path.to_owned(),
                    line: lineno,
                    message: e.to_string(),
                })?;
            if let Some(missing) = required.iter().find(|f| !rec.fields.contains_key(*f)) {
                return Err(Error::Schema(format!(
                    "task {}: instance {} lacks field {missing:?} referenced by a placeholder",
                    self.id, rec.id
                )));
            }
            if !seen.insert(rec.id.clone()) {
                return Err(Error::DuplicateId {
                    kind: "instance",
                    id: rec.id,
                });
            }
            refs.push(InstanceRef {
                id: rec.id,
                offset: start,
            });
        }
        if refs.len() != self.instance_count {
            return Err(Error::Schema(format!(
                "task {}: instance_count is {} but {} has {} instances",
                self.id,
                self.instance_count,
                path.display(),
                refs.len()
            )));
        }
        Ok(refs)
    }
}

#[derive(Debug, Deserialize)]
struct InstanceLine {
    id: String,
    #[serde(default)]
    fields: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SplitPolicy {
    pub train_clusters: BTreeSet<ClusterId>,
    pub eval_clusters: BTreeSet<ClusterId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ManifestSchema {
    #[default]
    V1,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub schema: ManifestSchema,
    /// Reject clusters that hold both train and eval tasks. Turning this off
    /// lets callers load a broken corpus and report it via [`validate_heldout`].
    pub enforce_split: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            schema: ManifestSchema::V1,
            enforce_split: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetaDataset {
    pub name: String,
    pub clusters: BTreeSet<ClusterId>,
    pub tasks: Vec<Task>,
    pub split_policy: SplitPolicy,
    task_index: HashMap<TaskId, usize>,
    instruction_index: HashMap<InstructionId, (usize, usize)>,
}

impl MetaDataset {
    pub fn from_tasks(name: impl Into<String>, tasks: Vec<Task>, opts: LoadOptions) -> Result<Self> {
        let mut clusters = BTreeSet::new();
        let mut policy = SplitPolicy::default();
        let mut task_index = HashMap::new();
        let mut instruction_index = HashMap::new();
        for (ti, task) in tasks.iter().enumerate() {
            if task_index.insert(task.id.clone(), ti).is_some() {
                return Err(Error::DuplicateId {
                    kind: "task",
                    id: task.id.0.clone(),
                });
            }
            clusters.insert(task.cluster_id.clone());
            match task.split {
                Split::Train => policy.train_clusters.insert(task.cluster_id.clone()),
                Split::Eval => policy.eval_clusters.insert(task.cluster_id.clone()),
            };
            for (ii, instr) in task.instructions.iter().enumerate() {
                if instr.task_id != task.id {
                    return Err(Error::Schema(format!(
                        "instruction {} claims task {} but sits under {}",
                        instr.id, instr.task_id, task.id
                    )));
                }
                if instruction_index.insert(instr.id.clone(), (ti, ii)).is_some() {
                    return Err(Error::DuplicateId {
                        kind: "instruction",
                        id: instr.id.0.clone(),
                    });
                }
            }
        }
        if opts.enforce_split {
            if let Some(c) = policy.train_clusters.intersection(&policy.eval_clusters).next() {
                return Err(Error::Split {
                    cluster: c.0.clone(),
                });
            }
        }
        Ok(MetaDataset {
            name: name.into(),
            clusters,
            tasks,
            split_policy: policy,
            task_index,
            instruction_index,
        })
    }

    pub fn task(&self, id: &TaskId) -> Result<&Task> {
        self.task_index
            .get(id)
            .map(|&i| &self.tasks[i])
            .ok_or_else(|| Error::UnknownTask(id.clone()))
    }

    pub fn instruction(&self, id: &InstructionId) -> Option<&Instruction> {
        self.instruction_index
            .get(id)
            .map(|&(t, i)| &self.tasks[t].instructions[i])
    }

    pub fn train_tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.iter().filter(|t| t.split == Split::Train)
    }

    pub fn eval_tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.iter().filter(|t| t.split == Split::Eval)
    }

    /// Train-split tasks outside the target's cluster, sorted by id.
    pub fn eligible_pool(&self, target: &TaskId) -> Result<Vec<&Task>> {
        let target = self.task(target)?;
        let mut pool: Vec<&Task> = self
            .train_tasks()
            .filter(|t| t.cluster_id != target.cluster_id && t.id != target.id)
            .collect();
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(pool)
    }

    /// Replace instructions' refined text, keyed by instruction id.
    pub fn set_refined(&mut self, refined: &HashMap<InstructionId, String>) {
        for task in &mut self.tasks {
            for instr in &mut task.instructions {
                if let Some(text) = refined.get(&instr.id) {
                    instr.refined_text = Some(text.clone());
                }
            }
        }
    }

    /// Canonical JSON Lines form: fixed key order, LF endings, one task per line.
    pub fn to_manifest_string(&self) -> String {
        let mut out = String::new();
        for task in &self.tasks {
            let rec = ManifestRecord::from_task(task);
            out.push_str(&serde_json::to_string(&rec).expect("manifest records serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestInstruction {
    id: String,
    text: String,
    role: InstructionRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    refined_text: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    task_id: String,
    cluster_id: String,
    split: Split,
    name: String,
    instructions: Vec<ManifestInstruction>,
    instances_path: Option<String>,
    instance_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    examples: Option<TaskExamples>,
}

impl ManifestRecord {
    fn from_task(task: &Task) -> Self {
        ManifestRecord {
            task_id: task.id.0.clone(),
            cluster_id: task.cluster_id.0.clone(),
            split: task.split,
            name: task.name.clone(),
            instructions: task
                .instructions
                .iter()
                .map(|i| ManifestInstruction {
                    id: i.id.0.clone(),
                    text: i.text.clone(),
                    role: i.role,
                    refined_text: i.refined_text.clone(),
                })
                .collect(),
            instances_path: task.instances_path.clone(),
            instance_count: task.instance_count,
            examples: task.examples.clone(),
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>, schema: ManifestSchema) -> Result<MetaDataset> {
    load_manifest_with(
        path,
        LoadOptions {
            schema,
            ..LoadOptions::default()
        },
    )
}

pub fn load_manifest_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<MetaDataset> {
    let path = path.as_ref();
    let ManifestSchema::V1 = opts.schema;
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tasks = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: n + 1,
                message: e.to_string(),
            })?;
        let rec: ManifestRecord = serde_json::from_value(value)
            .map_err(|e| Error::Schema(format!("{}:{}: {e}", path.display(), n + 1)))?;
        tasks.push(task_from_record(rec, base)?);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    MetaDataset::from_tasks(name, tasks, opts)
}

fn task_from_record(rec: ManifestRecord, base: &Path) -> Result<Task> {
    let instructions = rec
        .instructions
        .into_iter()
        .map(|i| (i.id, i.text, i.role, i.refined_text))
        .collect::<Vec<_>>();
    let mut task = Task::new(
        rec.task_id.as_str(),
        rec.cluster_id.as_str(),
        rec.split,
        instructions
            .iter()
            .map(|(id, text, role, _)| (id.clone(), text.clone(), *role))
            .collect(),
    );
    for (instr, (_, _, _, refined)) in task.instructions.iter_mut().zip(instructions) {
        instr.refined_text = refined;
    }
    task.name = rec.name;
    task.examples = rec.examples;
    task.instance_count = rec.instance_count;
    if let Some(p) = rec.instances_path {
        let resolved = base.join(&p);
        task = task.with_instances(&p, resolved, rec.instance_count);
    }
    Ok(task)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub train_tasks: usize,
    pub eval_tasks: usize,
    pub train_clusters: usize,
    pub eval_clusters: usize,
    /// Mean count of original instructions per task, over all tasks.
    pub mean_instructions_per_task: f64,
    pub mean_instructions_train: f64,
    pub mean_instructions_eval: f64,
    /// Mean count of augmented (paraphrase) instructions per task.
    pub mean_augmented_per_task: f64,
    pub max_instances_per_task: usize,
}

pub fn corpus_stats(ds: &MetaDataset) -> StatsReport {
    let mean = |tasks: &[&Task], role: InstructionRole| -> f64 {
        if tasks.is_empty() {
            return 0.0;
        }
        let total: usize = tasks
            .iter()
            .map(|t| t.instructions.iter().filter(|i| i.role == role).count())
            .sum();
        total as f64 / tasks.len() as f64
    };
    let all: Vec<&Task> = ds.tasks.iter().collect();
    let train: Vec<&Task> = ds.train_tasks().collect();
    let eval: Vec<&Task> = ds.eval_tasks().collect();
    StatsReport {
        train_tasks: train.len(),
        eval_tasks: eval.len(),
        train_clusters: ds.split_policy.train_clusters.len(),
        eval_clusters: ds.split_policy.eval_clusters.len(),
        mean_instructions_per_task: mean(&all, InstructionRole::Original),
        mean_instructions_train: mean(&train, InstructionRole::Original),
        mean_instructions_eval: mean(&eval, InstructionRole::Original),
        mean_augmented_per_task: mean(&all, InstructionRole::Augmented),
        max_instances_per_task: ds.tasks.iter().map(|t| t.instance_count).max().unwrap_or(0),
    }
}

/// Train tasks that share the target's cluster. Empty means the held-out
/// discipline holds for this target.
pub fn validate_heldout(ds: &MetaDataset, target: &TaskId) -> Result<Vec<TaskId>> {
    let target = ds.task(target)?;
    Ok(ds
        .train_tasks()
        .filter(|t| t.id != target.id && t.cluster_id == target.cluster_id)
        .map(|t| t.id.clone())
        .collect())
}
