//! `<Reason>` / `<target>` response protocol for semantic target extraction.

use thiserror::Error;

pub const PROMPT_TEMPLATE_VERSION: u32 = 1;

const PROMPT_TEMPLATE: &str = include_str!("../assets/target_extraction_prompt.v1.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TargetError {
    #[error("response has no <target> span")]
    MissingTargetTag,
    #[error("<target> span contains no targets")]
    EmptyTargetSet,
    #[error("question is empty")]
    EmptyQuestion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetExtraction {
    pub reason: String,
    pub targets: Vec<String>,
}

impl TargetExtraction {
    /// Renders the response form accepted by [`parse_target_response`].
    pub fn to_response(&self) -> String {
        format!(
            "<Reason>{}</Reason><target>{}</target>",
            self.reason,
            self.targets.join(", ")
        )
    }
}

/// Content of the first `<name>...</name>` span, tag names matched ASCII case-insensitively.
fn tag_span<'a>(text: &'a str, lowered: &str, name: &str) -> Option<&'a str> {
    let open = format!("<{name}>");
    let close = format!("</{name}>");
    let start = lowered.find(&open)? + open.len();
    let end = start + lowered[start..].find(&close)?;
    Some(&text[start..end])
}

pub fn parse_target_response(response: &str) -> Result<TargetExtraction, TargetError> {
    // ASCII lowering keeps byte offsets aligned with `response`
    let lowered = response.to_ascii_lowercase();
    let span = tag_span(response, &lowered, "target").ok_or(TargetError::MissingTargetTag)?;
    let targets: Vec<String> = span
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect();
    if targets.is_empty() {
        return Err(TargetError::EmptyTargetSet);
    }
    let reason = tag_span(response, &lowered, "reason")
        .map(|r| r.trim().to_string())
        .unwrap_or_default();
    Ok(TargetExtraction { reason, targets })
}

/// The raw extraction template without a question.
pub fn prompt_template() -> &'static str {
    PROMPT_TEMPLATE
}

/// Few-shot extraction prompt with `question` appended.
pub fn extraction_prompt(question: &str) -> Result<String, TargetError> {
    let q = question.trim();
    if q.is_empty() {
        return Err(TargetError::EmptyQuestion);
    }
    Ok(format!("{}\nQuestion: {q}\nResponse:", PROMPT_TEMPLATE))
}
