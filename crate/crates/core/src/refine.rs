//! Placeholder parsing and normalization of P3-style instruction templates.
//!
//! Every `{{name}}` slot is rewritten to either `{{text}}` (an input snippet)
//! or `{{candidate}}` (an answer option listed inside the instruction). All
//! bytes outside the slots are preserved.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Instruction, InstructionId, InstructionRole, MetaDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placeholder {
    /// Byte range of the whole `{{...}}` token in the raw text.
    pub span: (usize, usize),
    /// Inner content, trimmed.
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaceholderKind {
    Text,
    Candidate,
}

impl PlaceholderKind {
    pub fn canonical(self) -> &'static str {
        match self {
            PlaceholderKind::Text => "{{text}}",
            PlaceholderKind::Candidate => "{{candidate}}",
        }
    }
}

pub const DEFAULT_CANDIDATE_PATTERNS: &[&str] = &["choices[*]", "answer_choices*", "options[*]"];

/// Name patterns are globs (`*` any run, `?` one char) unless prefixed with
/// `re:`, in which case the rest is an anchored regular expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinementSettings {
    #[serde(default = "default_enabled")]
    pub enabled: bool,
    #[serde(default = "default_patterns")]
    pub candidate_patterns: Vec<String>,
}

fn default_enabled() -> bool {
    true
}

fn default_patterns() -> Vec<String> {
    DEFAULT_CANDIDATE_PATTERNS.iter().map(|s| s.to_string()).collect()
}

impl Default for RefinementSettings {
    fn default() -> Self {
        RefinementSettings {
            enabled: true,
            candidate_patterns: default_patterns(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefinementConfig {
    pub enabled: bool,
    patterns: Vec<Regex>,
}

impl RefinementConfig {
    pub fn new(settings: &RefinementSettings) -> Result<Self> {
        let mut patterns = settings
            .candidate_patterns
            .iter()
            .map(|p| compile_pattern(p))
            .collect::<Result<Vec<_>>>()?;
        // Refined output must refine to itself.
        if !patterns.is_empty() {
            patterns.push(Regex::new("^candidate$").expect("literal regex"));
        }
        Ok(RefinementConfig {
            enabled: settings.enabled,
            patterns,
        })
    }

    pub fn disabled() -> Self {
        RefinementConfig {
            enabled: false,
            patterns: Vec::new(),
        }
    }
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig::new(&RefinementSettings::default()).expect("default patterns compile")
    }
}

fn compile_pattern(pattern: &str) -> Result<Regex> {
    let source = match pattern.strip_prefix("re:") {
        Some(re) => format!("^(?:{re})$"),
        None => {
            let mut re = String::from("^");
            for c in pattern.chars() {
                match c {
                    '*' => re.push_str(".*"),
                    '?' => re.push('.'),
                    c => re.push_str(&regex::escape(&c.to_string())),
                }
            }
            re.push('$');
            re
        }
    };
    Regex::new(&source).map_err(|e| Error::Config(format!("candidate pattern {pattern:?}: {e}")))
}

pub fn parse_placeholders(raw: &str) -> Result<Vec<Placeholder>> {
    let bytes = raw.as_bytes();
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    let mut i = 0;
    while i < bytes.len() {
        let pair = |c: u8| i + 1 < bytes.len() && bytes[i] == c && bytes[i + 1] == c;
        if pair(b'{') {
            if open.is_some() {
                return Err(Error::UnbalancedPlaceholder {
                    position: i,
                    detail: "nested `{{` inside a placeholder",
                });
            }
            open = Some(i);
            i += 2;
        } else if pair(b'}') {
            let Some(start) = open.take() else {
                return Err(Error::UnbalancedPlaceholder {
                    position: i,
                    detail: "`}}` without a matching `{{`",
                });
            };
            out.push(Placeholder {
                span: (start, i + 2),
                name: raw[start + 2..i].trim().to_owned(),
            });
            i += 2;
        } else {
            if open.is_some() && (bytes[i] == b'{' || bytes[i] == b'}') {
                return Err(Error::UnbalancedPlaceholder {
                    position: i,
                    detail: "brace inside a placeholder",
                });
            }
            i += 1;
        }
    }
    if let Some(start) = open {
        return Err(Error::UnbalancedPlaceholder {
            position: start,
            detail: "`{{` is never closed",
        });
    }
    Ok(out)
}

pub fn classify_placeholder(tok: &Placeholder, cfg: &RefinementConfig) -> PlaceholderKind {
    if cfg.patterns.iter().any(|p| p.is_match(&tok.name)) {
        PlaceholderKind::Candidate
    } else {
        PlaceholderKind::Text
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Replacement {
    pub original: String,
    pub kind: PlaceholderKind,
    pub span: (usize, usize),
}

/// Rewrite every placeholder in `raw` to its canonical form.
pub fn refine_text(raw: &str, cfg: &RefinementConfig) -> Result<(String, Vec<Replacement>)> {
    if !cfg.enabled {
        return Ok((raw.to_owned(), Vec::new()));
    }
    if raw.contains("{%") {
        log::warn!("template control block passed through verbatim: {raw:?}");
    }
    let tokens = parse_placeholders(raw)?;
    let mut out = String::with_capacity(raw.len());
    let mut replacements = Vec::with_capacity(tokens.len());
    let mut cursor = 0;
    for tok in tokens {
        let kind = classify_placeholder(&tok, cfg);
        out.push_str(&raw[cursor..tok.span.0]);
        out.push_str(kind.canonical());
        cursor = tok.span.1;
        replacements.push(Replacement {
            original: tok.name,
            kind,
            span: tok.span,
        });
    }
    out.push_str(&raw[cursor..]);
    Ok((out, replacements))
}

pub fn refine_instruction(instr: &Instruction, cfg: &RefinementConfig) -> Result<Instruction> {
    let (refined, _) = refine_text(&instr.text, cfg)?;
    Ok(Instruction {
        refined_text: Some(refined),
        ..instr.clone()
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct InstructionReport {
    pub instruction: InstructionId,
    pub replacements: Vec<Replacement>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RefineReport {
    pub enabled: bool,
    pub instructions: Vec<InstructionReport>,
    pub candidate_slots: usize,
    pub text_slots: usize,
}

/// Refine every non-excluded instruction in place.
pub fn refine_corpus(ds: &mut MetaDataset, cfg: &RefinementConfig) -> Result<RefineReport> {
    let mut report = RefineReport {
        enabled: cfg.enabled,
        ..RefineReport::default()
    };
    for task in &mut ds.tasks {
        for instr in &mut task.instructions {
            if instr.role == InstructionRole::Excluded {
                continue;
            }
            let (refined, replacements) = refine_text(&instr.text, cfg)?;
            for r in &replacements {
                match r.kind {
                    PlaceholderKind::Text => report.text_slots += 1,
                    PlaceholderKind::Candidate => report.candidate_slots += 1,
                }
            }
            instr.refined_text = Some(refined);
            report.instructions.push(InstructionReport {
                instruction: instr.id.clone(),
                replacements,
            });
        }
    }
    Ok(report)
}
