//! End-to-end gating and localization over traces.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::ALWAYS_FUSE_TAU;
use crate::canonical::Value;
use crate::gate::{self, label_sample, Action, GateError, SampleLabel};
use crate::grid::{grid_from_record, AttentionGrid, GridError};
use crate::localizer::{self, CropFlag, CropRegion, LocalizerConfig, LocalizerError};
use crate::multi_instance::{self, ForegroundParams, MultiInstanceError};
use crate::scalar::Scalar;
use crate::trace::{self, DecisionRecord, ImageGeometry, ModeHint, Trace, TraceError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Localizer(#[from] LocalizerError),
    #[error(transparent)]
    MultiInstance(#[from] MultiInstanceError),
    #[error("sample {0} is gated to fuse but carries no attention records")]
    MissingAttention(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no trace files in {0}")]
    EmptyDirectory(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Single-target crops are also merged into their enclosing box.
    #[default]
    UnionBox,
    /// Crops are emitted individually.
    PerBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub threshold: f64,
    pub localizer: LocalizerConfig,
    pub foreground: ForegroundParams,
    pub merge_mode: MergeMode,
    /// Seed for synthetic trace generation.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            threshold: 0.96,
            localizer: LocalizerConfig::default(),
            foreground: ForegroundParams::default(),
            merge_mode: MergeMode::UnionBox,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.threshold >= 0.0 && self.threshold <= ALWAYS_FUSE_TAU) {
            return Err(PipelineError::InvalidConfig(format!(
                "threshold {} outside [0, {ALWAYS_FUSE_TAU}]",
                self.threshold
            )));
        }
        self.localizer.validate()?;
        self.foreground.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Crop for one target grid: the sharpest window, or the full image when the
/// map is uniform and carries no spatial signal.
pub fn localize_target<T: Scalar>(
    grid: &AttentionGrid<T>,
    geometry: &ImageGeometry,
    config: &LocalizerConfig,
    target: &str,
) -> Result<CropRegion, LocalizerError> {
    if grid.is_uniform() {
        return Ok(CropRegion::full_image(
            geometry,
            target,
            CropFlag::UniformAttention,
        ));
    }
    let best = localizer::select_scale(grid, geometry, config)?;
    Ok(localizer::map_to_pixels(
        &best,
        geometry,
        best.size_px,
        target,
    ))
}

/// Crops for `trace`, bypassing the gate.
pub fn localize_trace(
    trace: &Trace,
    config: &PipelineConfig,
) -> Result<(Vec<CropRegion>, Option<CropRegion>), PipelineError> {
    if trace.attention.is_empty() {
        return Err(PipelineError::MissingAttention(trace.sample_id.clone()));
    }
    let geometry = &trace.geometry;
    let mut crops = Vec::new();
    for rec in &trace.attention {
        let grid: AttentionGrid<f64> = grid_from_record(rec, geometry)?;
        match trace.mode_hint {
            ModeHint::SingleTarget => {
                crops.push(localize_target(
                    &grid,
                    geometry,
                    &config.localizer,
                    &rec.target,
                )?);
            }
            ModeHint::MultiInstance => {
                let boxes = if grid.is_uniform() {
                    Vec::new()
                } else {
                    multi_instance::separate_instances(
                        &grid,
                        geometry,
                        &config.foreground,
                        &rec.target,
                    )
                };
                if boxes.is_empty() {
                    crops.push(localize_target(
                        &grid,
                        geometry,
                        &config.localizer,
                        &rec.target,
                    )?);
                } else {
                    crops.extend(boxes);
                }
            }
        }
    }
    let merged = match (trace.mode_hint, config.merge_mode) {
        (ModeHint::SingleTarget, MergeMode::UnionBox) => CropRegion::enclosing(&crops),
        _ => None,
    };
    Ok((crops, merged))
}

/// Gate, then localize when the gate says fuse.
pub fn run_sample(trace: &Trace, config: &PipelineConfig) -> Result<DecisionRecord, PipelineError> {
    let confidence = gate::confidence_score(&trace.answer_token_probs)?;
    let verdict = gate::decide(confidence, config.threshold);
    let (crops, merged_crop) = match verdict.action {
        Action::AnswerDirectly => (Vec::new(), None),
        Action::Fuse => localize_trace(trace, config)?,
    };
    let record = DecisionRecord {
        sample_id: trace.sample_id.clone(),
        image_width_px: trace.geometry.width_px,
        image_height_px: trace.geometry.height_px,
        mode: trace.mode_hint,
        confidence,
        threshold: config.threshold,
        action: verdict.action,
        crops,
        merged_crop,
    };
    let v = record.violations();
    if !v.is_empty() {
        return Err(TraceError::InvariantViolation(v).into());
    }
    Ok(record)
}

/// Gate outcome against Need/No-Need labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GateConfusion {
    pub fuse_need: usize,
    pub fuse_no_need: usize,
    pub skip_need: usize,
    pub skip_no_need: usize,
}

impl GateConfusion {
    pub fn total(&self) -> usize {
        self.fuse_need + self.fuse_no_need + self.skip_need + self.skip_no_need
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub sample_id: String,
    pub source: String,
    pub confidence: f64,
    pub action: Action,
    pub label: Option<SampleLabel>,
    pub n_crops: usize,
    pub decision_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleFailure {
    pub source: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Trace files found, including failures.
    pub n_samples: usize,
    pub n_processed: usize,
    pub n_fused: usize,
    /// Fused share of successfully processed samples.
    pub fuse_fraction: f64,
    pub threshold: f64,
    /// Present when at least one sample carries a post-fusion confidence.
    pub gate_confusion: Option<GateConfusion>,
    pub samples: Vec<SampleSummary>,
    pub errors: Vec<SampleFailure>,
}

impl EvalReport {
    pub fn to_canonical(&self) -> Value {
        let confusion = Value::opt(self.gate_confusion, |c| {
            Value::obj()
                .field("fuse_need", Value::Int(c.fuse_need as i64))
                .field("fuse_no_need", Value::Int(c.fuse_no_need as i64))
                .field("skip_need", Value::Int(c.skip_need as i64))
                .field("skip_no_need", Value::Int(c.skip_no_need as i64))
                .build()
        });
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Value::obj()
                    .field("sample_id", Value::str(&s.sample_id))
                    .field("source", Value::str(&s.source))
                    .field("confidence", Value::Num(s.confidence))
                    .field("action", Value::str(s.action.as_str()))
                    .field("label", Value::opt(s.label, |l| Value::str(l.as_str())))
                    .field("n_crops", Value::Int(s.n_crops as i64))
                    .field("decision_file", Value::str(&s.decision_file))
                    .build()
            })
            .collect();
        let errors = self
            .errors
            .iter()
            .map(|e| {
                Value::obj()
                    .field("source", Value::str(&e.source))
                    .field("message", Value::str(&e.message))
                    .build()
            })
            .collect();
        Value::obj()
            .field("format_version", Value::Int(trace::FORMAT_VERSION as i64))
            .field("n_samples", Value::Int(self.n_samples as i64))
            .field("n_processed", Value::Int(self.n_processed as i64))
            .field("n_errors", Value::Int(self.errors.len() as i64))
            .field("n_fused", Value::Int(self.n_fused as i64))
            .field("fuse_fraction", Value::Num(self.fuse_fraction))
            .field("threshold", Value::Num(self.threshold))
            .field("gate_confusion", confusion)
            .field("samples", Value::Arr(samples))
            .field("errors", Value::Arr(errors))
            .build()
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub report: EvalReport,
    /// Successful decisions, sorted by sample id.
    pub decisions: Vec<DecisionRecord>,
}

/// File name for a sample's decision record.
pub fn decision_file_name(sample_id: &str) -> String {
    let safe: String = sample_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.decision.json")
}

/// Trace files (`*.json`) in `dir`, sorted by file name.
pub fn list_traces(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

enum Outcome {
    Done(Trace, DecisionRecord),
    Failed(String),
}

fn process(path: &Path, config: &PipelineConfig) -> Outcome {
    let trace = match trace::load_trace(path) {
        Ok(t) => t,
        Err(e) => return Outcome::Failed(e.to_string()),
    };
    match run_sample(&trace, config) {
        Ok(d) => Outcome::Done(trace, d),
        Err(e) => Outcome::Failed(e.to_string()),
    }
}

/// Runs every trace in `traces_dir`. `threads <= 1` runs serially.
///
/// Per-sample failures are recorded in the report; the result is identical
/// for any thread count.
pub fn run_batch(
    traces_dir: &Path,
    config: &PipelineConfig,
    threads: usize,
) -> Result<BatchOutput, PipelineError> {
    config.validate()?;
    let files = list_traces(traces_dir)?;
    if files.is_empty() {
        return Err(PipelineError::EmptyDirectory(
            traces_dir.display().to_string(),
        ));
    }
    let outcomes: Vec<Outcome> = if threads <= 1 {
        files.iter().map(|p| process(p, config)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        pool.install(|| files.par_iter().map(|p| process(p, config)).collect())
    };

    let source = |p: &Path| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    };
    let mut names: HashMap<String, usize> = HashMap::new();
    for o in &outcomes {
        if let Outcome::Done(t, _) = o {
            *names.entry(decision_file_name(&t.sample_id)).or_default() += 1;
        }
    }

    let mut samples = Vec::new();
    let mut decisions = Vec::new();
    let mut errors = Vec::new();
    for (path, outcome) in files.iter().zip(outcomes) {
        match outcome {
            Outcome::Failed(message) => errors.push(SampleFailure {
                source: source(path),
                message,
            }),
            Outcome::Done(trace, record) => {
                let file = decision_file_name(&trace.sample_id);
                if names[&file] > 1 {
                    errors.push(SampleFailure {
                        source: source(path),
                        message: format!(
                            "sample_id {:?} collides with another trace's decision file {file}",
                            trace.sample_id
                        ),
                    });
                    continue;
                }
                let label = trace
                    .confidence_after_fusion
                    .map(|after| label_sample(record.confidence, after));
                samples.push(SampleSummary {
                    sample_id: trace.sample_id.clone(),
                    source: source(path),
                    confidence: record.confidence,
                    action: record.action,
                    label,
                    n_crops: record.crops.len(),
                    decision_file: file,
                });
                decisions.push(record);
            }
        }
    }
    samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    decisions.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    let n_fused = samples.iter().filter(|s| s.action == Action::Fuse).count();
    let mut confusion = GateConfusion::default();
    let mut any_label = false;
    for s in &samples {
        let Some(label) = s.label else { continue };
        any_label = true;
        let slot = match (s.action, label) {
            (Action::Fuse, SampleLabel::NeedProcessing) => &mut confusion.fuse_need,
            (Action::Fuse, SampleLabel::NoNeedProcessing) => &mut confusion.fuse_no_need,
            (Action::AnswerDirectly, SampleLabel::NeedProcessing) => &mut confusion.skip_need,
            (Action::AnswerDirectly, SampleLabel::NoNeedProcessing) => &mut confusion.skip_no_need,
        };
        *slot += 1;
    }
    let n_processed = samples.len();
    let report = EvalReport {
        n_samples: files.len(),
        n_processed,
        n_fused,
        fuse_fraction: if n_processed == 0 {
            0.0
        } else {
            n_fused as f64 / n_processed as f64
        },
        threshold: config.threshold,
        gate_confusion: any_label.then_some(confusion),
        samples,
        errors,
    };
    Ok(BatchOutput { report, decisions })
}

/// Writes one decision file per sample plus `report.json` into `out_dir`.
pub fn write_batch(output: &BatchOutput, out_dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    for d in &output.decisions {
        trace::write_decision(d, &out_dir.join(decision_file_name(&d.sample_id)))?;
    }
    let report = out_dir.join("report.json");
    fs::write(&report, output.report.to_canonical().render()).map_err(|e| io_err(&report, e))
}
