//! Training-mixture manifests built from a selection.
//!
//! Each selected task contributes `min(cap, instance_count)` instances drawn
//! uniformly without replacement from its own seeded stream. Entries are
//! written in task-id order and instance ids in file order, so the same
//! (selection, cap, seed) always yields the same bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Instance, Instruction, MetaDataset, TaskExamples, TaskId};
use crate::error::{Error, Result};
use crate::refine::parse_placeholders;
use crate::seeding::derived_rng;
use crate::select::{Method, SelectionResult};

/// Instance fields tried, in order, for a record's target text.
const TARGET_FIELDS: [&str; 3] = ["output", "target", "label"];
const INPUT_FIELD: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Task definition followed by the query.
    Def,
    /// Task definition, two positive examples, then the query.
    DefPos2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rendering {
    #[default]
    None,
    Def,
    DefPos2,
}

impl Rendering {
    pub fn style(self) -> Option<PromptStyle> {
        match self {
            Rendering::None => None,
            Rendering::Def => Some(PromptStyle::Def),
            Rendering::DefPos2 => Some(PromptStyle::DefPos2),
        }
    }
}

impl fmt::Display for Rendering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rendering::None => "none",
            Rendering::Def => "def",
            Rendering::DefPos2 => "def_pos2",
        })
    }
}

impl FromStr for Rendering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Rendering::None),
            "def" => Ok(Rendering::Def),
            "def_pos2" => Ok(Rendering::DefPos2),
            other => Err(Error::Config(format!("unknown rendering {other:?}"))),
        }
    }
}

/// Substitute `{{name}}` slots with the instance field of the same name.
pub fn fill_placeholders(template: &str, fields: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut cursor = 0;
    for tok in parse_placeholders(template)? {
        let value = fields
            .get(&tok.name)
            .ok_or_else(|| Error::UnresolvedPlaceholder { name: tok.name.clone() })?;
        out.push_str(&template[cursor..tok.span.0]);
        out.push_str(value);
        cursor = tok.span.1;
    }
    out.push_str(&template[cursor..]);
    Ok(out)
}

/// Render one instance with its task's raw instruction as the definition.
pub fn render_prompt(
    instr: &Instruction,
    inst: &Instance,
    style: PromptStyle,
    examples: Option<&TaskExamples>,
) -> Result<String> {
    let definition = fill_placeholders(&instr.text, &inst.fields)?;
    let input = inst
        .fields
        .get(INPUT_FIELD)
        .ok_or_else(|| Error::UnresolvedPlaceholder { name: INPUT_FIELD.into() })?;
    let mut out = format!("Definition: {definition}\n\n");
    if style == PromptStyle::DefPos2 {
        let positives = examples.map(|e| e.positive.as_slice()).unwrap_or_default();
        if positives.len() < 2 {
            return Err(Error::MissingExamples {
                task: instr.task_id.clone(),
                found: positives.len(),
            });
        }
        for (n, ex) in positives.iter().take(2).enumerate() {
            out.push_str(&format!(
                "Positive Example {}-\nInput: {}\nOutput: {}\n\n",
                n + 1,
                ex.input,
                ex.output
            ));
        }
    }
    out.push_str(&format!("Now complete the following example-\nInput: {input}\nOutput:"));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderedInstance {
    pub rendered_input: String,
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEntry {
    pub task: TaskId,
    pub instance_ids: Vec<String>,
    /// Parallel to `instance_ids` when rendering is on.
    pub rendered: Option<Vec<RenderedInstance>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureManifest {
    pub target: TaskId,
    pub method: Method,
    pub entries: Vec<MixtureEntry>,
    pub cap_per_task: usize,
    pub seed: u64,
    pub total_instances: usize,
    pub rendering: Rendering,
}

#[derive(Serialize)]
struct HeaderTask<'a> {
    task: &'a TaskId,
    count: usize,
}

#[derive(Serialize)]
struct HeaderRecord<'a> {
    kind: &'static str,
    target: &'a TaskId,
    method: Method,
    cap_per_task: usize,
    seed: u64,
    rendering: Rendering,
    total_instances: usize,
    tasks: Vec<HeaderTask<'a>>,
}

#[derive(Serialize)]
struct InstanceRecord<'a> {
    kind: &'static str,
    task: &'a TaskId,
    instance: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    rendered_input: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<&'a str>,
}

impl MixtureManifest {
    /// JSON Lines: one header record, then one record per sampled instance.
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = HeaderRecord {
            kind: "header",
            target: &self.target,
            method: self.method,
            cap_per_task: self.cap_per_task,
            seed: self.seed,
            rendering: self.rendering,
            total_instances: self.total_instances,
            tasks: self
                .entries
                .iter()
                .map(|e| HeaderTask {
                    task: &e.task,
                    count: e.instance_ids.len(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for entry in &self.entries {
            for (i, id) in entry.instance_ids.iter().enumerate() {
                let rendered = entry.rendered.as_ref().map(|r| &r[i]);
                let rec = InstanceRecord {
                    kind: "instance",
                    task: &entry.task,
                    instance: id,
                    rendered_input: rendered.map(|r| r.rendered_input.as_str()),
                    target: rendered.and_then(|r| r.target.as_deref()),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

pub fn build_mixture(
    sel: &SelectionResult,
    ds: &MetaDataset,
    cap_per_task: usize,
    seed: u64,
    rendering: Rendering,
) -> Result<MixtureManifest> {
    if cap_per_task == 0 {
        return Err(Error::Config("cap per task must be positive".into()));
    }
    let mut tasks: Vec<&TaskId> = sel.ranked.iter().map(|r| &r.task).collect();
    tasks.sort();
    tasks.dedup();

    let mut entries = Vec::with_capacity(tasks.len());
    for tid in tasks {
        let task = ds.task(tid)?;
        if !task.has_instances() {
            return Err(Error::MissingInstances(tid.clone()));
        }
        let ids = task.instance_ids()?;
        let take = cap_per_task.min(ids.len());
        let mut rng = derived_rng(seed, &["mixture", tid.as_str()]);
        let mut positions = rand::seq::index::sample(&mut rng, ids.len(), take).into_vec();
        positions.sort_unstable();

        let rendered = match rendering.style() {
            None => None,
            Some(style) => {
                let instr = task
                    .selection_instructions()
                    .next()
                    .ok_or_else(|| Error::NoInstructions(tid.clone()))?;
                let instances = task.instances_at(&positions)?;
                Some(
                    instances
                        .iter()
                        .map(|inst| {
                            Ok(RenderedInstance {
                                rendered_input: render_prompt(instr, inst, style, task.examples.as_ref())?,
                                target: TARGET_FIELDS
                                    .iter()
                                    .find_map(|f| inst.fields.get(*f).cloned()),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        };
        entries.push(MixtureEntry {
            task: tid.clone(),
            instance_ids: positions.into_iter().map(|p| ids[p].clone()).collect(),
            rendered,
        });
    }
    let total_instances = entries.iter().map(|e| e.instance_ids.len()).sum();
    Ok(MixtureManifest {
        target: sel.target.clone(),
        method: sel.method,
        entries,
        cap_per_task,
        seed,
        total_instances,
        rendering,
    })
}
