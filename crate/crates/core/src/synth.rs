//! Seeded synthetic traces with recorded ground truth.
//!
//! Every trace uses an 896x896 image on a 32x32 grid of 28 px cells. Blobs
//! are truncated Gaussians on an exactly-zero background; the ground truth
//! records each blob's peak cell and its non-zero extent.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::canonical::Value;
use crate::gate::Action;
use crate::trace::{self, AttentionRecord, ImageGeometry, ModeHint, Trace, TraceError};

pub const GRID: usize = 32;
pub const CELL_PX: u32 = 28;

/// Cells below this fraction of a blob's peak are zeroed.
const CUTOFF: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// Mean token probability at least 0.97.
    Confident,
    UncertainSingleBlob,
    /// Multi-instance query with two well separated blobs.
    UncertainTwoBlobs,
    /// Uncertain, with constant attention.
    UniformAttention,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Confident,
        Scenario::UncertainSingleBlob,
        Scenario::UncertainTwoBlobs,
        Scenario::UniformAttention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Confident => "confident",
            Scenario::UncertainSingleBlob => "uncertain_single_blob",
            Scenario::UncertainTwoBlobs => "uncertain_two_blobs",
            Scenario::UniformAttention => "uniform_attention",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Scenario::Confident => 1,
            Scenario::UncertainSingleBlob => 2,
            Scenario::UncertainTwoBlobs => 3,
            Scenario::UniformAttention => 4,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBlob {
    pub peak_row: usize,
    pub peak_col: usize,
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub sample_id: String,
    pub scenario: Scenario,
    pub intended_action: Action,
    pub blobs: Vec<PlantedBlob>,
}

impl GroundTruth {
    pub fn to_canonical(&self) -> Value {
        Value::obj()
            .field("sample_id", Value::str(&self.sample_id))
            .field("scenario", Value::str(self.scenario.as_str()))
            .field("intended_action", Value::str(self.intended_action.as_str()))
            .field(
                "blobs",
                Value::Arr(
                    self.blobs
                        .iter()
                        .map(|b| {
                            Value::Arr(
                                [
                                    b.peak_row, b.peak_col, b.row_min, b.row_max, b.col_min,
                                    b.col_max,
                                ]
                                .into_iter()
                                .map(|v| Value::Int(v as i64))
                                .collect(),
                            )
                        })
                        .collect(),
                ),
            )
            .build()
    }
}

fn plant_blob(values: &mut [f64], peak: (usize, usize), sigma: f64, amp: f64) -> PlantedBlob {
    let mut blob = PlantedBlob {
        peak_row: peak.0,
        peak_col: peak.1,
        row_min: peak.0,
        row_max: peak.0,
        col_min: peak.1,
        col_max: peak.1,
    };
    for r in 0..GRID {
        for c in 0..GRID {
            let dr = r as f64 - peak.0 as f64;
            let dc = c as f64 - peak.1 as f64;
            let v = (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp();
            if v < CUTOFF {
                continue;
            }
            values[r * GRID + c] += amp * v;
            blob.row_min = blob.row_min.min(r);
            blob.row_max = blob.row_max.max(r);
            blob.col_min = blob.col_min.min(c);
            blob.col_max = blob.col_max.max(c);
        }
    }
    blob
}

fn probs(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec<f64> {
    let n = rng.gen_range(1..=8);
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// Stores `values` either flat or as two heads whose mean is `values / 2`.
fn attention(rng: &mut ChaCha8Rng, target: &str, values: Vec<f64>) -> AttentionRecord {
    if rng.gen_bool(0.5) {
        return AttentionRecord {
            target: target.into(),
            layer_index: 22,
            heads: None,
            values,
        };
    }
    let e: f64 = rng.gen_range(0.0..0.5);
    let mut stacked: Vec<f64> = values.iter().map(|v| v * 0.5 * (1.0 + e)).collect();
    stacked.extend(values.iter().map(|v| v * 0.5 * (1.0 - e)));
    AttentionRecord {
        target: target.into(),
        layer_index: 22,
        heads: Some(2),
        values: stacked,
    }
}

const OBJECTS: [&str; 6] = ["sign", "cup", "bicycle", "clock", "person", "dog"];

fn one(rng: &mut ChaCha8Rng, scenario: Scenario, sample_id: String) -> (Trace, GroundTruth) {
    let object = OBJECTS[rng.gen_range(0..OBJECTS.len())];
    let mut values = vec![0.0; GRID * GRID];
    let mut blobs = Vec::new();
    let (answer_probs, mode, question) = match scenario {
        Scenario::Confident => {
            let p = probs(rng, 0.97, 1.0);
            let peak = (rng.gen_range(0..GRID), rng.gen_range(0..GRID));
            let (s, a) = (rng.gen_range(0.8..1.5), rng.gen_range(0.5..1.0));
            blobs.push(plant_blob(&mut values, peak, s, a));
            (
                p,
                ModeHint::SingleTarget,
                format!("What color is the {object}?"),
            )
        }
        Scenario::UncertainSingleBlob => {
            let p = probs(rng, 0.1, 0.7);
            let peak = (rng.gen_range(0..GRID), rng.gen_range(0..GRID));
            let (s, a) = (rng.gen_range(0.8..1.5), rng.gen_range(0.5..1.0));
            blobs.push(plant_blob(&mut values, peak, s, a));
            (
                p,
                ModeHint::SingleTarget,
                format!("What is written on the {object}?"),
            )
        }
        Scenario::UncertainTwoBlobs => {
            let p = probs(rng, 0.1, 0.7);
            let first = (rng.gen_range(0..GRID), rng.gen_range(0..GRID));
            let second = loop {
                let cand = (rng.gen_range(0..GRID), rng.gen_range(0..GRID));
                if first.0.abs_diff(cand.0).max(first.1.abs_diff(cand.1)) >= 12 {
                    break cand;
                }
            };
            for peak in [first, second] {
                let (s, a) = (rng.gen_range(0.8..1.3), rng.gen_range(0.7..1.0));
                blobs.push(plant_blob(&mut values, peak, s, a));
            }
            (
                p,
                ModeHint::MultiInstance,
                format!("How many {object}s are there?"),
            )
        }
        Scenario::UniformAttention => {
            let p = probs(rng, 0.1, 0.7);
            values.fill(1.0 / (GRID * GRID) as f64);
            (p, ModeHint::SingleTarget, format!("Is there a {object}?"))
        }
    };
    let mean = answer_probs.iter().sum::<f64>() / answer_probs.len() as f64;
    let after = match scenario {
        Scenario::Confident => (mean - rng.gen_range(0.0..0.02)).max(0.0),
        _ => (mean + rng.gen_range(0.01..0.2)).min(1.0),
    };
    let record = attention(rng, object, values);
    let intended_action = if scenario == Scenario::Confident {
        Action::AnswerDirectly
    } else {
        Action::Fuse
    };
    let size = GRID as u32 * CELL_PX;
    let trace = Trace {
        sample_id: sample_id.clone(),
        geometry: ImageGeometry::uniform(size, size, GRID, GRID),
        question,
        preliminary_answer: "unknown".into(),
        answer_token_probs: answer_probs,
        attention: vec![record],
        mode_hint: mode,
        confidence_after_fusion: Some(after),
    };
    let gt = GroundTruth {
        sample_id,
        scenario,
        intended_action,
        blobs,
    };
    (trace, gt)
}

/// `n` reproducible traces for `scenario`; ids are `<scenario>-<seed>-<index>`.
pub fn generate_synthetic(n: usize, scenario: Scenario, seed: u64) -> Vec<(Trace, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scenario.stream());
    (0..n)
        .map(|i| one(&mut rng, scenario, format!("{scenario}-{seed}-{i:04}")))
        .collect()
}

/// Writes `<sample_id>.json` per trace and `ground_truth.<scenario>-<seed>.jsonl`.
pub fn write_synthetic(
    dir: &Path,
    samples: &[(Trace, GroundTruth)],
    scenario: Scenario,
    seed: u64,
) -> Result<(), TraceError> {
    let io = |p: &Path, source| TraceError::Io {
        path: p.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut gt_lines = String::new();
    for (t, gt) in samples {
        trace::write_trace(t, &dir.join(format!("{}.json", t.sample_id)))?;
        let line: serde_json::Value =
            serde_json::from_str(&gt.to_canonical().render()).expect("canonical output is JSON");
        gt_lines.push_str(&line.to_string());
        gt_lines.push('\n');
    }
    let gt_path = dir.join(format!("ground_truth.{scenario}-{seed}.jsonl"));
    fs::write(&gt_path, gt_lines).map_err(|e| io(&gt_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::confidence_score;

    #[test]
    fn confident_means() {
        for (t, gt) in generate_synthetic(50, Scenario::Confident, 3) {
            assert!(confidence_score(&t.answer_token_probs).unwrap() >= 0.96);
            assert_eq!(gt.intended_action, Action::AnswerDirectly);
            assert!(t.violations().is_empty());
        }
    }

    #[test]
    fn uncertain_means_and_validity() {
        for sc in [
            Scenario::UncertainSingleBlob,
            Scenario::UncertainTwoBlobs,
            Scenario::UniformAttention,
        ] {
            for (t, _) in generate_synthetic(30, sc, 9) {
                assert!(confidence_score(&t.answer_token_probs).unwrap() < 0.96);
                assert!(t.violations().is_empty(), "{:?}", t.violations());
            }
        }
    }

    #[test]
    fn reproducible_bytes() {
        let a: Vec<String> = generate_synthetic(5, Scenario::UncertainTwoBlobs, 42)
            .iter()
            .map(|(t, _)| t.to_json())
            .collect();
        let b: Vec<String> = generate_synthetic(5, Scenario::UncertainTwoBlobs, 42)
            .iter()
            .map(|(t, _)| t.to_json())
            .collect();
        assert_eq!(a, b);
        let c = generate_synthetic(5, Scenario::UncertainTwoBlobs, 43);
        assert_ne!(a[0], c[0].0.to_json());
    }

    #[test]
    fn scenario_names_parse() {
        for s in Scenario::ALL {
            assert_eq!(s.as_str().parse::<Scenario>().unwrap(), s);
        }
        assert!("bogus".parse::<Scenario>().is_err());
    }
}
