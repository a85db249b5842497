//! Training-free "when to fuse / where to fuse" engine for multimodal inference traces.
//!
//! The engine reads serialized model traces (answer-token probabilities plus
//! target-guided cross-attention), gates high-resolution crop fusion on the
//! mean token confidence, and localizes crop boxes from the attention map with
//! an adaptive multi-scale sliding window. All outputs are deterministic.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`, which is what the file formats carry.

pub mod calibration;
pub mod canonical;
pub mod gate;
pub mod grid;
pub mod localizer;
pub mod multi_instance;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod target;
pub mod trace;

pub use calibration::{CalibrationRecord, CalibrationResult, ALWAYS_FUSE_TAU};
pub use gate::{Action, GateDecision, SampleLabel};
pub use grid::AttentionGrid;
pub use localizer::{CropFlag, CropRegion, LocalizerConfig, WindowResult};
pub use multi_instance::{ForegroundParams, ThresholdMode};
pub use pipeline::{EvalReport, MergeMode, PipelineConfig};
pub use scalar::Scalar;
pub use trace::{AttentionRecord, DecisionRecord, ImageGeometry, ModeHint, Trace};

pub type Grid = AttentionGrid<f64>;
pub type Grid32 = AttentionGrid<f32>;
pub type Window = WindowResult<f64>;
pub type Record = CalibrationRecord<f64>;
pub type Calibration = CalibrationResult<f64>;
pub type Decision = GateDecision<f64>;
