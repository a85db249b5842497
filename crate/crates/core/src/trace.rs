//! On-disk trace and decision formats.
//!
//! A trace is one sample's exported model introspection: image geometry,
//! answer-token probabilities and one attention record per extracted target.
//! Traces are JSON documents with a top-level `format_version` (currently 1).
//! Large attention tensors may live in a sidecar file of little-endian `f32`
//! values referenced by a path relative to the trace file.
//!
//! All grids are flattened row-major: cell `(r, c)` is element `r * cols + c`.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::Value;
use crate::gate::Action;
use crate::localizer::CropRegion;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed trace: {0}")]
    MalformedTrace(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("invariant violation: {}", join_violations(.0))]
    InvariantViolation(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    Syntax,
    Schema,
    Invariant,
}

/// One violated rule, located by a field path such as `answer_token_probs[2]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub field: String,
    pub message: String,
}

impl Violation {
    fn invariant(field: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            kind: ViolationKind::Invariant,
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "ok");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGeometry {
    pub width_px: u32,
    pub height_px: u32,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Pixels per grid column.
    pub cell_w_px: f64,
    /// Pixels per grid row.
    pub cell_h_px: f64,
}

impl ImageGeometry {
    /// Geometry whose cells tile the image exactly.
    pub fn uniform(width_px: u32, height_px: u32, grid_rows: usize, grid_cols: usize) -> Self {
        ImageGeometry {
            width_px,
            height_px,
            grid_rows,
            grid_cols,
            cell_w_px: width_px as f64 / grid_cols as f64,
            cell_h_px: height_px as f64 / grid_rows as f64,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn violations(&self, prefix: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut positive = |name: &str, ok: bool| {
            if !ok {
                out.push(Violation::invariant(
                    format!("{prefix}.{name}"),
                    "ImageGeometry fields must be strictly positive",
                ));
            }
        };
        positive("width_px", self.width_px > 0);
        positive("height_px", self.height_px > 0);
        positive("grid_rows", self.grid_rows > 0);
        positive("grid_cols", self.grid_cols > 0);
        positive(
            "cell_w_px",
            self.cell_w_px.is_finite() && self.cell_w_px > 0.0,
        );
        positive(
            "cell_h_px",
            self.cell_h_px.is_finite() && self.cell_h_px > 0.0,
        );
        if !out.is_empty() {
            return out;
        }
        let cover =
            |cells: usize, size: f64, px: u32| (cells as f64 * size - px as f64).abs() < size;
        if !cover(self.grid_cols, self.cell_w_px, self.width_px) {
            out.push(Violation::invariant(
                format!("{prefix}.cell_w_px"),
                "grid_cols * cell_w_px must cover width_px to within one cell",
            ));
        }
        if !cover(self.grid_rows, self.cell_h_px, self.height_px) {
            out.push(Violation::invariant(
                format!("{prefix}.cell_h_px"),
                "grid_rows * cell_h_px must cover height_px to within one cell",
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeHint {
    SingleTarget,
    MultiInstance,
}

impl ModeHint {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeHint::SingleTarget => "single_target",
            ModeHint::MultiInstance => "multi_instance",
        }
    }
}

/// Cross-attention from one target's query tokens to the image tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub target: String,
    pub layer_index: u32,
    /// `Some(h)` when `values` holds `h` stacked per-head maps.
    pub heads: Option<usize>,
    pub values: Vec<f64>,
}

impl AttentionRecord {
    pub fn violations(&self, prefix: &str, geometry: &ImageGeometry) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.target.trim().is_empty() {
            out.push(Violation::invariant(
                format!("{prefix}.target"),
                "target must be non-empty",
            ));
        }
        let n = geometry.cells();
        let expected = match self.heads {
            Some(0) => {
                out.push(Violation::invariant(
                    format!("{prefix}.heads"),
                    "heads must be at least 1",
                ));
                None
            }
            Some(h) => Some(h * n),
            None => Some(n),
        };
        if let Some(expected) = expected {
            if self.values.len() != expected {
                out.push(Violation::invariant(
                    format!("{prefix}.values"),
                    format!(
                        "length {} does not match expected {} ({} heads x {}x{} grid)",
                        self.values.len(),
                        expected,
                        self.heads.unwrap_or(1),
                        geometry.grid_rows,
                        geometry.grid_cols
                    ),
                ));
            }
        }
        for (i, v) in self.values.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 {
                out.push(Violation::invariant(
                    format!("{prefix}.values[{i}]"),
                    format!("attention value {v} must be finite and >= 0"),
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub sample_id: String,
    pub geometry: ImageGeometry,
    pub question: String,
    pub preliminary_answer: String,
    pub answer_token_probs: Vec<f64>,
    pub attention: Vec<AttentionRecord>,
    pub mode_hint: ModeHint,
    /// Mean answer-token probability after fusion, when the adapter measured it.
    pub confidence_after_fusion: Option<f64>,
}

impl Trace {
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.sample_id.is_empty() {
            out.push(Violation::invariant(
                "sample_id",
                "sample_id must be non-empty",
            ));
        }
        let geometry = self.geometry.violations("geometry");
        let geometry_ok = geometry.is_empty();
        out.extend(geometry);
        if self.answer_token_probs.is_empty() {
            out.push(Violation::invariant(
                "answer_token_probs",
                "answer_token_probs must be non-empty",
            ));
        }
        for (i, p) in self.answer_token_probs.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                out.push(Violation::invariant(
                    format!("answer_token_probs[{i}]"),
                    format!("probability {p} outside range [0, 1]"),
                ));
            }
        }
        if geometry_ok {
            for (i, rec) in self.attention.iter().enumerate() {
                out.extend(rec.violations(&format!("attention[{i}]"), &self.geometry));
            }
        }
        if let Some(c) = self.confidence_after_fusion {
            if !(0.0..=1.0).contains(&c) {
                out.push(Violation::invariant(
                    "confidence_after_fusion",
                    format!("probability {c} outside range [0, 1]"),
                ));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let file = TraceFile::from_trace(self, |_, _| None);
        let mut s = serde_json::to_string_pretty(&file).expect("trace encodes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionFile {
    target: String,
    layer_index: u32,
    #[serde(default)]
    heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values_file: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceFile {
    format_version: u32,
    sample_id: String,
    geometry: ImageGeometry,
    question: String,
    preliminary_answer: String,
    answer_token_probs: Vec<f64>,
    attention: Vec<AttentionFile>,
    mode_hint: ModeHint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence_after_fusion: Option<f64>,
}

impl TraceFile {
    fn from_trace(
        t: &Trace,
        mut sidecar: impl FnMut(usize, &AttentionRecord) -> Option<String>,
    ) -> Self {
        TraceFile {
            format_version: FORMAT_VERSION,
            sample_id: t.sample_id.clone(),
            geometry: t.geometry.clone(),
            question: t.question.clone(),
            preliminary_answer: t.preliminary_answer.clone(),
            answer_token_probs: t.answer_token_probs.clone(),
            attention: t
                .attention
                .iter()
                .enumerate()
                .map(|(i, a)| {
                    let file = sidecar(i, a);
                    AttentionFile {
                        target: a.target.clone(),
                        layer_index: a.layer_index,
                        heads: a.heads,
                        values: if file.is_some() {
                            None
                        } else {
                            Some(a.values.clone())
                        },
                        values_file: file,
                    }
                })
                .collect(),
            mode_hint: t.mode_hint,
            confidence_after_fusion: t.confidence_after_fusion,
        }
    }
}

fn io_err(path: &Path, source: io::Error) -> TraceError {
    TraceError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_sidecar(path: &Path) -> Result<Vec<f64>, String> {
    let bytes =
        fs::read(path).map_err(|e| format!("cannot read sidecar {}: {e}", path.display()))?;
    if bytes.len() % 4 != 0 {
        return Err(format!(
            "sidecar {} length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

enum Parsed {
    Trace(Trace),
    Rejected(TraceError),
}

/// Parses trace text. `base_dir` resolves sidecar paths.
fn parse(text: &str, base_dir: &Path) -> Parsed {
    let raw: serde_json::Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return Parsed::Rejected(TraceError::MalformedTrace(e.to_string())),
    };
    let file: TraceFile = match serde_json::from_value(raw) {
        Ok(f) => f,
        Err(e) => return Parsed::Rejected(TraceError::SchemaViolation(e.to_string())),
    };
    if file.format_version != FORMAT_VERSION {
        return Parsed::Rejected(TraceError::SchemaViolation(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    let mut attention = Vec::with_capacity(file.attention.len());
    for (i, a) in file.attention.into_iter().enumerate() {
        let values = match (a.values, a.values_file) {
            (Some(v), None) => v,
            (None, Some(rel)) => match read_sidecar(&base_dir.join(&rel)) {
                Ok(v) => v,
                Err(msg) => {
                    return Parsed::Rejected(TraceError::SchemaViolation(format!(
                        "attention[{i}].values_file: {msg}"
                    )))
                }
            },
            _ => {
                return Parsed::Rejected(TraceError::SchemaViolation(format!(
                    "attention[{i}]: exactly one of `values` and `values_file` is required"
                )))
            }
        };
        attention.push(AttentionRecord {
            target: a.target,
            layer_index: a.layer_index,
            heads: a.heads,
            values,
        });
    }
    let trace = Trace {
        sample_id: file.sample_id,
        geometry: file.geometry,
        question: file.question,
        preliminary_answer: file.preliminary_answer,
        answer_token_probs: file.answer_token_probs,
        attention,
        mode_hint: file.mode_hint,
        confidence_after_fusion: file.confidence_after_fusion,
    };
    let violations = trace.violations();
    if violations.is_empty() {
        Parsed::Trace(trace)
    } else {
        Parsed::Rejected(TraceError::InvariantViolation(violations))
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Parses a trace from text; sidecar paths resolve against `base_dir`.
pub fn parse_trace(text: &str, base_dir: &Path) -> Result<Trace, TraceError> {
    match parse(text, base_dir) {
        Parsed::Trace(t) => Ok(t),
        Parsed::Rejected(e) => Err(e),
    }
}

/// Reads and fully validates a trace file.
pub fn load_trace(path: &Path) -> Result<Trace, TraceError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_trace(&text, &base_dir(path))
}

/// Lists every violated rule; empty exactly when [`load_trace`] succeeds.
pub fn validate_trace(path: &Path) -> Result<ValidationReport, TraceError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let violations = match parse(&text, &base_dir(path)) {
        Parsed::Trace(_) => Vec::new(),
        Parsed::Rejected(TraceError::MalformedTrace(m)) => vec![Violation {
            kind: ViolationKind::Syntax,
            field: "$".into(),
            message: m,
        }],
        Parsed::Rejected(TraceError::SchemaViolation(m)) => vec![Violation {
            kind: ViolationKind::Schema,
            field: "$".into(),
            message: m,
        }],
        Parsed::Rejected(TraceError::InvariantViolation(v)) => v,
        Parsed::Rejected(e @ TraceError::Io { .. }) => return Err(e),
    };
    Ok(ValidationReport { violations })
}

/// Writes a trace with every attention tensor inline.
pub fn write_trace(trace: &Trace, path: &Path) -> Result<(), TraceError> {
    fs::write(path, trace.to_json()).map_err(|e| io_err(path, e))
}

/// Writes a trace, moving attention tensors with at least `min_values`
/// entries into `f32` sidecar files next to it. Sidecar values are rounded to
/// single precision.
pub fn write_trace_with_sidecars(
    trace: &Trace,
    path: &Path,
    min_values: usize,
) -> Result<(), TraceError> {
    let dir = base_dir(path);
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trace".into());
    let mut pending = Vec::new();
    let file = TraceFile::from_trace(trace, |i, rec| {
        if rec.values.len() < min_values {
            return None;
        }
        let name = format!("{stem}.attention{i}.f32");
        let bytes: Vec<u8> = rec
            .values
            .iter()
            .flat_map(|v| (*v as f32).to_le_bytes())
            .collect();
        pending.push((dir.join(&name), bytes));
        Some(name)
    });
    for (p, bytes) in pending {
        fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
    }
    let mut s = serde_json::to_string_pretty(&file).expect("trace encodes");
    s.push('\n');
    fs::write(path, s).map_err(|e| io_err(path, e))
}

/// Final per-sample output of the pipeline.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DecisionRecord {
    pub sample_id: String,
    pub image_width_px: u32,
    pub image_height_px: u32,
    pub mode: ModeHint,
    pub confidence: f64,
    pub threshold: f64,
    pub action: Action,
    pub crops: Vec<CropRegion>,
    pub merged_crop: Option<CropRegion>,
}

impl DecisionRecord {
    pub fn violations(&self) -> Vec<Violation> {
        self.violations_with_slack(0.0)
    }

    /// Like [`violations`](Self::violations), but the gate rule is not checked
    /// when confidence and threshold are within `gate_slack` of each other.
    /// Records read back from six-digit text need a slack of half a unit in the
    /// last place.
    pub fn violations_with_slack(&self, gate_slack: f64) -> Vec<Violation> {
        let mut out = Vec::new();
        if !(0.0..=1.0).contains(&self.confidence) {
            out.push(Violation::invariant(
                "confidence",
                "confidence outside [0, 1]",
            ));
        }
        let direct = self.confidence >= self.threshold;
        let near = (self.confidence - self.threshold).abs() <= gate_slack;
        if !near && direct != (self.action == Action::AnswerDirectly) {
            out.push(Violation::invariant(
                "action",
                "action must be answer_directly exactly when confidence >= threshold",
            ));
        }
        if self.action == Action::AnswerDirectly
            && (!self.crops.is_empty() || self.merged_crop.is_some())
        {
            out.push(Violation::invariant(
                "crops",
                "answer_directly decisions carry no crops",
            ));
        }
        let all = self
            .crops
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("crops[{i}]"), c))
            .chain(
                self.merged_crop
                    .iter()
                    .map(|c| ("merged_crop".to_string(), c)),
            );
        for (field, c) in all {
            if !c.within(self.image_width_px, self.image_height_px) {
                out.push(Violation::invariant(
                    field,
                    format!(
                        "box ({}, {}, {}, {}) outside the {}x{} image or empty",
                        c.x1, c.y1, c.x2, c.y2, self.image_width_px, self.image_height_px
                    ),
                ));
            }
        }
        out
    }

    pub fn to_canonical(&self) -> Value {
        Value::obj()
            .field("format_version", Value::Int(FORMAT_VERSION as i64))
            .field("sample_id", Value::str(&self.sample_id))
            .field("image_width_px", Value::Int(self.image_width_px as i64))
            .field("image_height_px", Value::Int(self.image_height_px as i64))
            .field("mode", Value::str(self.mode.as_str()))
            .field("confidence", Value::Num(self.confidence))
            .field("threshold", Value::Num(self.threshold))
            .field("action", Value::str(self.action.as_str()))
            .field(
                "crops",
                Value::Arr(self.crops.iter().map(CropRegion::to_canonical).collect()),
            )
            .field(
                "merged_crop",
                Value::opt(self.merged_crop.as_ref(), CropRegion::to_canonical),
            )
            .build()
    }

    /// Canonical text; fails when the record breaks its invariants.
    pub fn render(&self) -> Result<String, TraceError> {
        let v = self.violations();
        if !v.is_empty() {
            return Err(TraceError::InvariantViolation(v));
        }
        Ok(self.to_canonical().render())
    }
}

pub fn write_decision(record: &DecisionRecord, path: &Path) -> Result<(), TraceError> {
    let text = record.render()?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn parse_decision(text: &str) -> Result<DecisionRecord, TraceError> {
    let mut raw: serde_json::Value =
        serde_json::from_str(text).map_err(|e| TraceError::MalformedTrace(e.to_string()))?;
    let version = raw
        .as_object_mut()
        .and_then(|o| o.remove("format_version"))
        .and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(TraceError::SchemaViolation(
            "missing or unsupported format_version".into(),
        ));
    }
    let rec: DecisionRecord =
        serde_json::from_value(raw).map_err(|e| TraceError::SchemaViolation(e.to_string()))?;
    let v = rec.violations_with_slack(1e-6);
    if v.is_empty() {
        Ok(rec)
    } else {
        Err(TraceError::InvariantViolation(v))
    }
}

pub fn load_decision(path: &Path) -> Result<DecisionRecord, TraceError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_decision(&text)
}
