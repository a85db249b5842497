//! Token-confidence gate: decides whether a sample needs crop fusion.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum GateError {
    #[error("token probability sequence is empty")]
    EmptySequence,
}

/// Outcome of the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    /// Global view is sufficient; emit the preliminary answer.
    AnswerDirectly,
    /// Localize and fuse a high-resolution crop.
    Fuse,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::AnswerDirectly => "answer_directly",
            Action::Fuse => "fuse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDecision<T> {
    pub confidence: T,
    pub threshold: T,
    pub action: Action,
}

/// Label of a calibration sample, derived from the confidence change under fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleLabel {
    NeedProcessing,
    NoNeedProcessing,
}

impl SampleLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleLabel::NeedProcessing => "need_processing",
            SampleLabel::NoNeedProcessing => "no_need_processing",
        }
    }
}

/// Arithmetic mean of the answer-token probabilities.
///
/// The result is clamped into `[0, 1]` so that rounding in the summation can
/// never push a valid mean outside the probability range.
pub fn confidence_score<T: Scalar>(token_probs: &[T]) -> Result<T, GateError> {
    if token_probs.is_empty() {
        return Err(GateError::EmptySequence);
    }
    let total: T = token_probs.iter().copied().sum();
    let mean = total / T::of_usize(token_probs.len());
    Ok(mean.max(T::zero()).min(T::one()))
}

/// `C >= tau` answers directly, `C < tau` fuses.
pub fn decide<T: Scalar>(confidence: T, threshold: T) -> GateDecision<T> {
    let action = if confidence >= threshold {
        Action::AnswerDirectly
    } else {
        Action::Fuse
    };
    GateDecision {
        confidence,
        threshold,
        action,
    }
}

/// A sample needs processing iff fusion strictly raised its confidence.
pub fn label_sample<T: Scalar>(score_org: T, score_crop: T) -> SampleLabel {
    if score_crop > score_org {
        SampleLabel::NeedProcessing
    } else {
        SampleLabel::NoNeedProcessing
    }
}
