//! Separating closely spaced instances of one target.
//!
//! Foreground cells are thresholded out of the attention grid, grouped into
//! 4-connected components, boxed in pixel space and deduplicated with greedy
//! IoU suppression.

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::AttentionGrid;
use crate::localizer::{CropFlag, CropRegion};
use crate::scalar::Scalar;
use crate::trace::ImageGeometry;

#[derive(Debug, Error, PartialEq)]
pub enum MultiInstanceError {
    #[error("invalid foreground params: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// `mean + k_sigma * std` (population standard deviation).
    #[default]
    MeanPlusStd,
    /// `fraction * max`.
    FractionOfMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForegroundParams {
    pub threshold_mode: ThresholdMode,
    pub k_sigma: f64,
    pub fraction: f64,
    pub iou_prune: f64,
}

impl Default for ForegroundParams {
    fn default() -> Self {
        ForegroundParams {
            threshold_mode: ThresholdMode::MeanPlusStd,
            k_sigma: 1.0,
            fraction: 0.5,
            iou_prune: 0.5,
        }
    }
}

impl ForegroundParams {
    pub fn validate(&self) -> Result<(), MultiInstanceError> {
        if !self.k_sigma.is_finite() {
            return Err(MultiInstanceError::InvalidParams(
                "k_sigma must be finite".into(),
            ));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(MultiInstanceError::InvalidParams(
                "fraction must lie in (0, 1]".into(),
            ));
        }
        if !(self.iou_prune > 0.0 && self.iou_prune <= 1.0) {
            return Err(MultiInstanceError::InvalidParams(
                "iou_prune must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Boolean grid, row-major like [`AttentionGrid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

/// A connected set of foreground cells, sorted row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub cells: Vec<(usize, usize)>,
}

impl Component {
    /// `(min_row, min_col, max_row, max_col)`.
    pub fn bounds(&self) -> (usize, usize, usize, usize) {
        let mut b = (usize::MAX, usize::MAX, 0, 0);
        for &(r, c) in &self.cells {
            b.0 = b.0.min(r);
            b.1 = b.1.min(c);
            b.2 = b.2.max(r);
            b.3 = b.3.max(c);
        }
        b
    }
}

/// Foreground threshold for `grid` under `params`.
pub fn foreground_threshold<T: Scalar>(grid: &AttentionGrid<T>, params: &ForegroundParams) -> T {
    let v = grid.values();
    match params.threshold_mode {
        ThresholdMode::MeanPlusStd => {
            let n = T::of_usize(v.len());
            let mean = v.iter().copied().sum::<T>() / n;
            let var = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            mean + T::of(params.k_sigma) * var.sqrt()
        }
        ThresholdMode::FractionOfMax => T::of(params.fraction) * grid.max_value(),
    }
}

/// Cells at or above the threshold; a non-positive threshold additionally
/// requires a strictly positive value, so an all-zero grid has no foreground.
pub fn foreground_cells<T: Scalar>(grid: &AttentionGrid<T>, params: &ForegroundParams) -> Mask {
    let theta = foreground_threshold(grid, params);
    let positive_only = theta <= T::zero();
    Mask {
        rows: grid.rows(),
        cols: grid.cols(),
        cells: grid
            .values()
            .iter()
            .map(|&v| v >= theta && (!positive_only || v > T::zero()))
            .collect(),
    }
}

/// 4-connected components ordered by `(min row, min col)`.
pub fn connected_components(mask: &Mask) -> Vec<Component> {
    let mut seen = vec![false; mask.cells.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.cells.len() {
        if !mask.cells[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut cells = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / mask.cols, i % mask.cols);
            cells.push((r, c));
            let mut visit = |j: usize| {
                if mask.cells[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - mask.cols);
            }
            if r + 1 < mask.rows {
                visit(i + mask.cols);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < mask.cols {
                visit(i + 1);
            }
        }
        cells.sort_unstable();
        out.push(Component { cells });
    }
    out.sort_by_key(|comp| {
        let (r0, c0, _, _) = comp.bounds();
        (r0, c0, comp.cells[0])
    });
    out
}

fn cell_span(lo: usize, hi_inclusive: usize, cell_px: f64, limit: u32) -> (u32, u32) {
    let a = (lo as f64 * cell_px).floor().clamp(0.0, limit as f64) as u32;
    let b = ((hi_inclusive + 1) as f64 * cell_px)
        .ceil()
        .clamp(0.0, limit as f64) as u32;
    if b > a {
        (a, b)
    } else if a < limit {
        (a, a + 1)
    } else {
        (limit - 1, limit)
    }
}

/// Orders by score descending, then `(y1, x1, y2, x2, target)`.
fn box_order(a: &CropRegion, b: &CropRegion) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| (a.y1, a.x1, a.y2, a.x2).cmp(&(b.y1, b.x1, b.y2, b.x2)))
        .then_with(|| a.target.cmp(&b.target))
}

/// Tight pixel box per component, scored by its attention mass.
pub fn component_boxes<T: Scalar>(
    components: &[Component],
    grid: &AttentionGrid<T>,
    geometry: &ImageGeometry,
    target: &str,
) -> Vec<CropRegion> {
    let mut boxes: Vec<CropRegion> = components
        .iter()
        .filter(|c| !c.cells.is_empty())
        .map(|comp| {
            let (r0, c0, r1, c1) = comp.bounds();
            let (x1, x2) = cell_span(c0, c1, geometry.cell_w_px, geometry.width_px);
            let (y1, y2) = cell_span(r0, r1, geometry.cell_h_px, geometry.height_px);
            let score = comp.cells.iter().map(|&(r, c)| grid.get(r, c)).sum::<T>();
            CropRegion {
                x1,
                y1,
                x2,
                y2,
                score: score.as_f64(),
                target: target.to_string(),
                ratio: None,
                flag: CropFlag::None,
                window: None,
            }
        })
        .collect();
    boxes.sort_by(box_order);
    boxes
}

/// Intersection over union of half-open integer boxes.
pub fn iou(a: &CropRegion, b: &CropRegion) -> f64 {
    let ix = a.x2.min(b.x2).saturating_sub(a.x1.max(b.x1)) as u64;
    let iy = a.y2.min(b.y2).saturating_sub(a.y1.max(b.y1)) as u64;
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// Greedy suppression: keep a box iff its IoU with every kept box is at most
/// `iou_prune`. Input is re-sorted, so the result does not depend on input order.
pub fn nms_dedup(boxes: &[CropRegion], iou_prune: f64) -> Vec<CropRegion> {
    let mut sorted = boxes.to_vec();
    sorted.sort_by(box_order);
    let mut kept: Vec<CropRegion> = Vec::new();
    for b in sorted {
        if kept.iter().all(|k| iou(k, &b) <= iou_prune) {
            kept.push(b);
        }
    }
    kept
}

/// Full multi-instance pass for one target grid.
pub fn separate_instances<T: Scalar>(
    grid: &AttentionGrid<T>,
    geometry: &ImageGeometry,
    params: &ForegroundParams,
    target: &str,
) -> Vec<CropRegion> {
    let mask = foreground_cells(grid, params);
    let comps = connected_components(&mask);
    let boxes = component_boxes(&comps, grid, geometry, target);
    nms_dedup(&boxes, params.iou_prune)
}
