//! Threshold calibration by maximizing `J(tau) = TPR(tau) - lambda * FPR(tau)`.
//!
//! The positive class is [`SampleLabel::NeedProcessing`]; a record is
//! predicted positive (routed to fusion) when its original confidence is
//! strictly below `tau`. A class with no members contributes rate 0.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::Value;
use crate::gate::{label_sample, SampleLabel};
use crate::scalar::Scalar;
use crate::trace::Trace;

/// Threshold meaning "always fuse": strictly above every valid confidence.
pub const ALWAYS_FUSE_TAU: f64 = 1.000001;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration record set is empty")]
    EmptyRecordSet,
    #[error("lambda must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("record {sample_id}: confidence {value} outside [0, 1]")]
    InvalidConfidence { sample_id: String, value: f64 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord<T> {
    pub sample_id: String,
    pub confidence_org: T,
    pub label: SampleLabel,
}

impl CalibrationRecord<f64> {
    /// Builds a labeled record from a trace carrying its post-fusion confidence.
    pub fn from_trace(trace: &Trace) -> Option<Self> {
        let after = trace.confidence_after_fusion?;
        let org = crate::gate::confidence_score(&trace.answer_token_probs).ok()?;
        Some(CalibrationRecord {
            sample_id: trace.sample_id.clone(),
            confidence_org: org,
            label: label_sample(org, after),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint<T> {
    pub tau: T,
    pub tpr: T,
    pub fpr: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult<T> {
    pub lambda: T,
    pub chosen_tau: T,
    pub utility_at_tau: T,
    pub roc_points: Vec<RocPoint<T>>,
}

impl<T: Scalar> CalibrationResult<T> {
    pub fn is_always_fuse(&self) -> bool {
        self.chosen_tau > T::one()
    }

    pub fn to_canonical(&self) -> Value {
        Value::obj()
            .field("format_version", Value::Int(1))
            .field("lambda", Value::Num(self.lambda.as_f64()))
            .field("chosen_tau", Value::Num(self.chosen_tau.as_f64()))
            .field("always_fuse", Value::Bool(self.is_always_fuse()))
            .field("utility_at_tau", Value::Num(self.utility_at_tau.as_f64()))
            .field(
                "roc_points",
                Value::Arr(
                    self.roc_points
                        .iter()
                        .map(|p| {
                            Value::obj()
                                .field("tau", Value::Num(p.tau.as_f64()))
                                .field("tpr", Value::Num(p.tpr.as_f64()))
                                .field("fpr", Value::Num(p.fpr.as_f64()))
                                .build()
                        })
                        .collect(),
                ),
            )
            .build()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow<T> {
    pub tau: T,
    pub tpr: T,
    pub fpr: T,
    pub fuse_fraction: T,
}

pub fn always_fuse_tau<T: Scalar>() -> T {
    T::of(ALWAYS_FUSE_TAU)
}

fn check_records<T: Scalar>(records: &[CalibrationRecord<T>]) -> Result<(), CalibrationError> {
    if records.is_empty() {
        return Err(CalibrationError::EmptyRecordSet);
    }
    for r in records {
        let c = r.confidence_org;
        if !(c >= T::zero() && c <= T::one()) {
            return Err(CalibrationError::InvalidConfidence {
                sample_id: r.sample_id.clone(),
                value: c.as_f64(),
            });
        }
    }
    Ok(())
}

fn rate<T: Scalar>(hits: usize, total: usize) -> T {
    if total == 0 {
        T::zero()
    } else {
        T::of_usize(hits) / T::of_usize(total)
    }
}

/// Utility of a (tpr, fpr) pair.
pub fn utility<T: Scalar>(tpr: T, fpr: T, lambda: T) -> T {
    tpr - lambda * fpr
}

/// True and false positive rates at one threshold.
pub fn tpr_fpr<T: Scalar>(
    records: &[CalibrationRecord<T>],
    tau: T,
) -> Result<(T, T), CalibrationError> {
    check_records(records)?;
    let (mut tp, mut pos, mut fp, mut neg) = (0, 0, 0, 0);
    for r in records {
        let fused = r.confidence_org < tau;
        match r.label {
            SampleLabel::NeedProcessing => {
                pos += 1;
                tp += fused as usize;
            }
            SampleLabel::NoNeedProcessing => {
                neg += 1;
                fp += fused as usize;
            }
        }
    }
    Ok((rate(tp, pos), rate(fp, neg)))
}

/// Sorted unique observed confidences followed by the always-fuse sentinel.
pub fn candidate_thresholds<T: Scalar>(records: &[CalibrationRecord<T>]) -> Vec<T> {
    let mut c: Vec<T> = records.iter().map(|r| r.confidence_org).collect();
    c.sort_by(|a, b| a.partial_cmp(b).expect("confidences are finite"));
    c.dedup();
    c.push(always_fuse_tau());
    c
}

/// Picks the candidate threshold with the highest utility, ties toward the smallest.
///
/// One sort plus a single sweep: at each candidate the predicted-positive set
/// is exactly the prefix of records with a strictly smaller confidence.
pub fn optimal_threshold<T: Scalar>(
    records: &[CalibrationRecord<T>],
    lambda: T,
) -> Result<CalibrationResult<T>, CalibrationError> {
    if !(lambda > T::zero()) {
        return Err(CalibrationError::NonPositiveLambda(lambda.as_f64()));
    }
    check_records(records)?;

    let mut sorted: Vec<(T, bool)> = records
        .iter()
        .map(|r| (r.confidence_org, r.label == SampleLabel::NeedProcessing))
        .collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("confidences are finite"));
    let pos = sorted.iter().filter(|(_, p)| *p).count();
    let neg = sorted.len() - pos;

    let mut roc_points = Vec::new();
    let mut best: Option<(T, T)> = None;
    let (mut tp, mut fp, mut cursor) = (0usize, 0usize, 0usize);
    for tau in candidate_thresholds(records) {
        while cursor < sorted.len() && sorted[cursor].0 < tau {
            if sorted[cursor].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            cursor += 1;
        }
        let tpr = rate(tp, pos);
        let fpr = rate(fp, neg);
        let j = utility(tpr, fpr, lambda);
        roc_points.push(RocPoint { tau, tpr, fpr });
        if best.map_or(true, |(_, bj)| j > bj) {
            best = Some((tau, j));
        }
    }
    let (chosen_tau, utility_at_tau) = best.expect("candidate set is never empty");
    Ok(CalibrationResult {
        lambda,
        chosen_tau,
        utility_at_tau,
        roc_points,
    })
}

/// Rates and fusion fraction at each fixed threshold, in the given order.
pub fn sweep_fixed_thresholds<T: Scalar>(
    records: &[CalibrationRecord<T>],
    taus: &[T],
) -> Result<Vec<SweepRow<T>>, CalibrationError> {
    check_records(records)?;
    taus.iter()
        .map(|&tau| {
            let (tpr, fpr) = tpr_fpr(records, tau)?;
            let fused = records.iter().filter(|r| r.confidence_org < tau).count();
            Ok(SweepRow {
                tau,
                tpr,
                fpr,
                fuse_fraction: rate(fused, records.len()),
            })
        })
        .collect()
}

/// Reads one JSON record per non-blank line.
pub fn load_records(path: &Path) -> Result<Vec<CalibrationRecord<f64>>, CalibrationError> {
    let text = fs::read_to_string(path).map_err(|source| CalibrationError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_records(&text, &path.display().to_string())
}

pub fn parse_records(
    text: &str,
    origin: &str,
) -> Result<Vec<CalibrationRecord<f64>>, CalibrationError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CalibrationRecord<f64> =
            serde_json::from_str(line).map_err(|e| CalibrationError::Parse {
                path: origin.to_string(),
                line: n + 1,
                message: e.to_string(),
            })?;
        out.push(rec);
    }
    check_records(&out)?;
    Ok(out)
}

/// One canonical line per record.
pub fn render_records(records: &[CalibrationRecord<f64>]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{{\"sample_id\": {}, \"confidence_org\": {}, \"label\": \"{}\"}}\n",
            serde_json::to_string(&r.sample_id).expect("string encodes"),
            crate::canonical::format_scalar(r.confidence_org),
            r.label.as_str()
        ));
    }
    out
}
