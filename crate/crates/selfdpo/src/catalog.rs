//! Domain model for verticals, attributes, and listings, plus construction
//! of the exact prompt strings the generating model is queried with.
//!
//! Prompt construction is pure: equal tasks produce byte-equal prompts, so
//! downstream files are reproducible from `tasks.jsonl` alone.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

/// Fixed system prompt instructing the tagged output format. Intra-tag
/// spacing is normalized to single spaces; tests pin these exact bytes.
pub const SYSTEM_PROMPT: &str =
    "Respond in the following format:<reasoning> ... </reasoning><answer> ... </answer>";

pub const REASONING_OPEN: &str = "<reasoning>";
pub const REASONING_CLOSE: &str = "</reasoning>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

/// Maximum number of product images carried per task.
pub const MAX_IMAGES: usize = 5;

/// Canonical form used for value comparison: trim, collapse internal
/// whitespace runs to single spaces, case-fold.
pub fn normalize_value(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// One vertical-specific attribute: its description and closed value set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSpec {
    vertical: String,
    attribute_name: String,
    description: String,
    allowed_values: Vec<String>,
}

impl AttributeSpec {
    /// Validates that the value set is non-empty and free of duplicates
    /// under [`normalize_value`].
    pub fn new(
        vertical: impl Into<String>,
        attribute_name: impl Into<String>,
        description: impl Into<String>,
        allowed_values: Vec<String>,
    ) -> Result<Self> {
        if allowed_values.is_empty() {
            return Err(Error::InvalidSpec("allowed_values must be non-empty".into()));
        }
        let mut seen = HashSet::new();
        for v in &allowed_values {
            let norm = normalize_value(v);
            if norm.is_empty() {
                return Err(Error::InvalidSpec(format!("blank allowed value `{v}`")));
            }
            if !seen.insert(norm) {
                return Err(Error::InvalidSpec(format!(
                    "allowed value `{v}` duplicates another after normalization"
                )));
            }
        }
        Ok(Self {
            vertical: vertical.into(),
            attribute_name: attribute_name.into(),
            description: description.into(),
            allowed_values,
        })
    }

    pub fn vertical(&self) -> &str {
        &self.vertical
    }

    pub fn attribute_name(&self) -> &str {
        &self.attribute_name
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn allowed_values(&self) -> &[String] {
        &self.allowed_values
    }

    /// Canonical spelling for a raw answer, if it matches an allowed value
    /// after normalization.
    pub fn canonical_value(&self, raw: &str) -> Option<&str> {
        let norm = normalize_value(raw);
        self.allowed_values
            .iter()
            .find(|v| normalize_value(v) == norm)
            .map(String::as_str)
    }
}

/// One (listing, attribute) prediction unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeTask {
    task_id: String,
    spec: AttributeSpec,
    image_refs: Vec<String>,
    ground_truth: Option<String>,
}

impl AttributeTask {
    pub fn new(
        task_id: impl Into<String>,
        spec: AttributeSpec,
        image_refs: Vec<String>,
        ground_truth: Option<String>,
    ) -> Result<Self> {
        let task_id = task_id.into();
        if task_id.is_empty() {
            return Err(Error::InvalidTask {
                task_id,
                msg: "task_id must be non-empty".into(),
            });
        }
        if image_refs.len() > MAX_IMAGES {
            return Err(Error::InvalidTask {
                task_id,
                msg: format!("at most {MAX_IMAGES} images allowed, got {}", image_refs.len()),
            });
        }
        if let Some(gt) = &ground_truth {
            if !spec.allowed_values().contains(gt) {
                return Err(Error::InvalidTask {
                    task_id,
                    msg: format!("ground_truth `{gt}` is not an allowed value"),
                });
            }
        }
        Ok(Self { task_id, spec, image_refs, ground_truth })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn spec(&self) -> &AttributeSpec {
        &self.spec
    }

    /// Opaque image references, forwarded to the generation endpoint in
    /// listing order (the true ordering convention is unspecified upstream).
    pub fn image_refs(&self) -> &[String] {
        &self.image_refs
    }

    pub fn ground_truth(&self) -> Option<&str> {
        self.ground_truth.as_deref()
    }
}

/// System and user prompt for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
}

/// The fixed system prompt; byte-identical on every call.
pub fn build_system_prompt() -> String {
    SYSTEM_PROMPT.to_string()
}

/// Renders the value set as a bracketed, single-quoted, comma-separated
/// list, the way the answer options are displayed to the model.
fn render_allowed_values(values: &[String]) -> String {
    let quoted: Vec<String> = values.iter().map(|v| format!("'{v}'")).collect();
    format!("[{}]", quoted.join(", "))
}

/// User prompt naming the attribute, vertical, description, and options.
pub fn build_user_prompt(task: &AttributeTask) -> String {
    let spec = task.spec();
    format!(
        "what is the most suitable value for {} for this {}. {} Options: {}",
        spec.attribute_name(),
        spec.vertical(),
        spec.description(),
        render_allowed_values(spec.allowed_values()),
    )
}

/// Both prompts for a task.
pub fn prompt_bundle(task: &AttributeTask) -> PromptBundle {
    PromptBundle {
        system_text: build_system_prompt(),
        user_text: build_user_prompt(task),
    }
}

/// Renders a completion in the tagged answer format. Payloads may not
/// contain the tag substrings themselves, and the answer must be non-empty,
/// so the result always parses back to `(reasoning, answer)`.
pub fn build_answer_text(reasoning: &str, answer: &str) -> Result<String> {
    if answer.is_empty() {
        return Err(Error::InvalidSpec("answer must be non-empty".into()));
    }
    const TAGS: [&str; 4] = [REASONING_OPEN, REASONING_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];
    for payload in [reasoning, answer] {
        for tag in TAGS {
            if payload.contains(tag) {
                return Err(Error::InvalidSpec(format!("payload contains literal tag `{tag}`")));
            }
        }
    }
    Ok(format!("{REASONING_OPEN}{reasoning}{REASONING_CLOSE}{ANSWER_OPEN}{answer}{ANSWER_CLOSE}"))
}

/// Wire schema of one `tasks.jsonl` line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub vertical: String,
    pub attribute: String,
    pub description: String,
    pub allowed_values: Vec<String>,
    #[serde(default)]
    pub images: Vec<String>,
    #[serde(default)]
    pub ground_truth: Option<String>,
}

impl TaskRecord {
    pub fn into_task(self) -> Result<AttributeTask> {
        let spec = AttributeSpec::new(self.vertical, self.attribute, self.description, self.allowed_values)
            .map_err(|e| Error::InvalidTask {
                task_id: self.task_id.clone(),
                msg: e.to_string(),
            })?;
        AttributeTask::new(self.task_id, spec, self.images, self.ground_truth)
    }

    pub fn from_task(task: &AttributeTask) -> Self {
        Self {
            task_id: task.task_id().to_string(),
            vertical: task.spec().vertical().to_string(),
            attribute: task.spec().attribute_name().to_string(),
            description: task.spec().description().to_string(),
            allowed_values: task.spec().allowed_values().to_vec(),
            images: task.image_refs().to_vec(),
            ground_truth: task.ground_truth().map(str::to_owned),
        }
    }
}

/// Loads tasks in file order. Duplicate `task_id`s are rejected.
pub fn load_tasks(path: &Path) -> Result<Vec<AttributeTask>> {
    let records: Vec<TaskRecord> = jsonl::read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut tasks = Vec::with_capacity(records.len());
    for record in records {
        if !seen.insert(record.task_id.clone()) {
            return Err(Error::DuplicateTaskId(record.task_id));
        }
        tasks.push(record.into_task()?);
    }
    Ok(tasks)
}

/// Writes tasks back out in the `tasks.jsonl` schema.
pub fn save_tasks(tasks: &[AttributeTask], path: &Path) -> Result<usize> {
    let records: Vec<TaskRecord> = tasks.iter().map(TaskRecord::from_task).collect();
    jsonl::write_jsonl(path, &records)
}
