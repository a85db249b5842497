//! Adaptive multi-scale sliding-window localization.
//!
//! For each scale ratio the square crop side `base * ratio` is projected onto
//! the attention grid, the window with the largest attention sum is found, and
//! its sharpness (peak sum minus the mean of the four non-overlapping
//! neighbouring windows, per cell) is measured. The sharpest scale wins and its
//! window center is mapped back to pixel space.
//!
//! Ties are resolved deterministically: smallest row, then smallest column,
//! then smallest ratio.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::Value;
use crate::grid::AttentionGrid;
use crate::scalar::Scalar;
use crate::trace::ImageGeometry;

pub const DEFAULT_RATIOS: [f64; 8] = [1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 4.0, 6.0];

#[derive(Debug, Error, PartialEq)]
pub enum LocalizerError {
    #[error("window {w}x{h} does not fit a {rows}x{cols} grid")]
    WindowLargerThanGrid {
        w: usize,
        h: usize,
        rows: usize,
        cols: usize,
    },
    #[error("no scale ratio yields a feasible window")]
    NoFeasibleRatio,
    #[error("invalid localizer config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub base_size_px: u32,
    pub ratios: Vec<f64>,
    pub highres_base_px: u32,
    /// Images whose long side reaches this many pixels use `highres_base_px`.
    pub highres_trigger_long_side_px: u32,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            base_size_px: 224,
            ratios: DEFAULT_RATIOS.to_vec(),
            highres_base_px: 448,
            highres_trigger_long_side_px: 2048,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<(), LocalizerError> {
        if self.base_size_px == 0 || self.highres_base_px == 0 {
            return Err(LocalizerError::InvalidConfig(
                "base sizes must be positive".into(),
            ));
        }
        if self.highres_trigger_long_side_px == 0 {
            return Err(LocalizerError::InvalidConfig(
                "highres trigger must be positive".into(),
            ));
        }
        if self.ratios.is_empty() {
            return Err(LocalizerError::InvalidConfig(
                "ratios must be non-empty".into(),
            ));
        }
        if self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(LocalizerError::InvalidConfig(
                "ratios must be positive".into(),
            ));
        }
        if self.ratios.windows(2).any(|p| p[0] >= p[1]) {
            return Err(LocalizerError::InvalidConfig(
                "ratios must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Window placement on the grid; `grid_x` is the column, `grid_y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridWindow {
    pub grid_x: usize,
    pub grid_y: usize,
    pub width_cells: usize,
    pub height_cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowResult<T> {
    pub ratio: f64,
    /// Square crop side in pixels for this ratio.
    pub size_px: f64,
    pub window: GridWindow,
    pub sum: T,
    pub sharpness: T,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropFlag {
    #[default]
    None,
    /// The requested side exceeded an image dimension; that axis spans the image.
    CropLargerThanImage,
    /// Attention carried no spatial signal; the crop is the full image.
    UniformAttention,
}

impl CropFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            CropFlag::None => "none",
            CropFlag::CropLargerThanImage => "crop_larger_than_image",
            CropFlag::UniformAttention => "uniform_attention",
        }
    }
}

/// Half-open pixel box `[x1, x2) x [y1, y2)` with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRegion {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
    pub score: f64,
    pub target: String,
    pub ratio: Option<f64>,
    #[serde(default)]
    pub flag: CropFlag,
    #[serde(default)]
    pub window: Option<GridWindow>,
}

impl CropRegion {
    pub fn full_image(geometry: &ImageGeometry, target: &str, flag: CropFlag) -> Self {
        CropRegion {
            x1: 0,
            y1: 0,
            x2: geometry.width_px,
            y2: geometry.height_px,
            score: 0.0,
            target: target.to_string(),
            ratio: None,
            flag,
            window: None,
        }
    }

    pub fn area(&self) -> u64 {
        (self.x2.saturating_sub(self.x1)) as u64 * (self.y2.saturating_sub(self.y1)) as u64
    }

    /// Non-empty and inside a `width x height` image.
    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x1 < self.x2 && self.x2 <= width && self.y1 < self.y2 && self.y2 <= height
    }

    /// Smallest box enclosing all `crops`; `None` for an empty slice.
    pub fn enclosing(crops: &[CropRegion]) -> Option<CropRegion> {
        let first = crops.first()?;
        let mut out = CropRegion {
            target: crops
                .iter()
                .map(|c| c.target.as_str())
                .collect::<Vec<_>>()
                .join(", "),
            score: 0.0,
            ratio: None,
            flag: CropFlag::None,
            window: None,
            ..first.clone()
        };
        for c in crops {
            out.x1 = out.x1.min(c.x1);
            out.y1 = out.y1.min(c.y1);
            out.x2 = out.x2.max(c.x2);
            out.y2 = out.y2.max(c.y2);
            out.score += c.score;
        }
        Some(out)
    }

    pub fn to_canonical(&self) -> Value {
        Value::obj()
            .field("x1", Value::Int(self.x1 as i64))
            .field("y1", Value::Int(self.y1 as i64))
            .field("x2", Value::Int(self.x2 as i64))
            .field("y2", Value::Int(self.y2 as i64))
            .field("score", Value::Num(self.score))
            .field("target", Value::str(&self.target))
            .field("ratio", Value::opt(self.ratio, Value::Num))
            .field("flag", Value::str(self.flag.as_str()))
            .field(
                "window",
                Value::opt(self.window, |w| {
                    Value::obj()
                        .field("grid_x", Value::Int(w.grid_x as i64))
                        .field("grid_y", Value::Int(w.grid_y as i64))
                        .field("width_cells", Value::Int(w.width_cells as i64))
                        .field("height_cells", Value::Int(w.height_cells as i64))
                        .build()
                }),
            )
            .build()
    }
}

/// Integral image with a zero border row and column.
#[derive(Debug, Clone)]
pub struct SummedAreaTable<T> {
    cols: usize,
    table: Vec<T>,
}

impl<T: Scalar> SummedAreaTable<T> {
    pub fn new(grid: &AttentionGrid<T>) -> Self {
        let (rows, cols) = (grid.rows(), grid.cols());
        let stride = cols + 1;
        let mut table = vec![T::zero(); (rows + 1) * stride];
        for r in 0..rows {
            let mut row_acc = T::zero();
            for c in 0..cols {
                row_acc = row_acc + grid.get(r, c);
                table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + row_acc;
            }
        }
        SummedAreaTable { cols, table }
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> T {
        self.table[r * (self.cols + 1) + c]
    }

    /// Sum over columns `[x, x+w)` and rows `[y, y+h)`.
    #[inline]
    pub fn window_sum(&self, x: usize, y: usize, w: usize, h: usize) -> T {
        self.at(y + h, x + w) - self.at(y, x + w) - self.at(y + h, x) + self.at(y, x)
    }
}

/// Base crop side for this image: the high-resolution base once the long side
/// reaches the trigger.
pub fn effective_base(geometry: &ImageGeometry, config: &LocalizerConfig) -> u32 {
    if geometry.width_px.max(geometry.height_px) >= config.highres_trigger_long_side_px {
        config.highres_base_px
    } else {
        config.base_size_px
    }
}

fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

fn project_axis(size_px: f64, cell_px: f64, cells: usize) -> usize {
    let n = round_half_up(size_px / cell_px);
    if n < 1.0 {
        1
    } else if n >= cells as f64 {
        cells
    } else {
        n as usize
    }
}

/// Window extent in cells for a square crop side of `size_px` pixels.
pub fn project_window(size_px: f64, geometry: &ImageGeometry) -> (usize, usize) {
    (
        project_axis(size_px, geometry.cell_w_px, geometry.grid_cols),
        project_axis(size_px, geometry.cell_h_px, geometry.grid_rows),
    )
}

/// Placement `(grid_x, grid_y, sum)` of the `w x h` window with the largest sum.
///
/// The summed-area table scores every placement in O(1). Placements within the
/// table's rounding bound of the best are then re-summed directly, so the
/// reported position and sum match exhaustive direct summation exactly.
pub fn max_window<T: Scalar>(
    grid: &AttentionGrid<T>,
    w: usize,
    h: usize,
) -> Result<(usize, usize, T), LocalizerError> {
    let (rows, cols) = (grid.rows(), grid.cols());
    if w == 0 || h == 0 || w > cols || h > rows {
        return Err(LocalizerError::WindowLargerThanGrid { w, h, rows, cols });
    }
    let sat = SummedAreaTable::new(grid);
    let mut best = T::neg_infinity();
    for y in 0..=rows - h {
        for x in 0..=cols - w {
            best = best.max(sat.window_sum(x, y, w, h));
        }
    }
    let magnitude = grid.values().iter().map(|v| v.abs()).sum::<T>();
    let slack = T::epsilon() * T::of_usize(8 * (rows + cols + 2)) * magnitude;

    let mut winner: Option<(usize, usize, T)> = None;
    for y in 0..=rows - h {
        for x in 0..=cols - w {
            if sat.window_sum(x, y, w, h) < best - slack {
                continue;
            }
            let exact = grid.window_sum(x, y, w, h);
            if winner.map_or(true, |(_, _, s)| exact > s) {
                winner = Some((x, y, exact));
            }
        }
    }
    Ok(winner.expect("at least one placement exists"))
}

/// Peak-versus-surround contrast of a window, per cell.
///
/// Neighbours are the same-size windows shifted by one full extent up, down,
/// left and right; those not fully inside the grid are dropped, and with no
/// neighbour at all the surround mean is zero.
pub fn sharpness<T: Scalar>(grid: &AttentionGrid<T>, window: GridWindow) -> T {
    let GridWindow {
        grid_x: x,
        grid_y: y,
        width_cells: w,
        height_cells: h,
    } = window;
    let peak = grid.window_sum(x, y, w, h);
    let mut neighbours = Vec::with_capacity(4);
    if y >= h {
        neighbours.push(grid.window_sum(x, y - h, w, h));
    }
    if y + 2 * h <= grid.rows() {
        neighbours.push(grid.window_sum(x, y + h, w, h));
    }
    if x >= w {
        neighbours.push(grid.window_sum(x - w, y, w, h));
    }
    if x + 2 * w <= grid.cols() {
        neighbours.push(grid.window_sum(x + w, y, w, h));
    }
    let surround = if neighbours.is_empty() {
        T::zero()
    } else {
        let n = T::of_usize(neighbours.len());
        neighbours.into_iter().sum::<T>() / n
    };
    (peak - surround) / T::of_usize(w * h)
}

/// Evaluates every ratio and returns the sharpest window.
pub fn select_scale<T: Scalar>(
    grid: &AttentionGrid<T>,
    geometry: &ImageGeometry,
    config: &LocalizerConfig,
) -> Result<WindowResult<T>, LocalizerError> {
    if config.ratios.iter().all(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(LocalizerError::NoFeasibleRatio);
    }
    let base = effective_base(geometry, config) as f64;
    let mut seen: Vec<(usize, usize)> = Vec::new();
    let mut best: Option<WindowResult<T>> = None;
    for &ratio in &config.ratios {
        if !(ratio.is_finite() && ratio > 0.0) {
            continue;
        }
        let size_px = base * ratio;
        let (w, h) = project_window(size_px, geometry);
        if w > grid.cols() || h > grid.rows() {
            continue;
        }
        if seen.contains(&(w, h)) {
            continue;
        }
        seen.push((w, h));
        let (gx, gy, sum) = max_window(grid, w, h)?;
        let window = GridWindow {
            grid_x: gx,
            grid_y: gy,
            width_cells: w,
            height_cells: h,
        };
        let s = sharpness(grid, window);
        if best.map_or(true, |b| s > b.sharpness) {
            best = Some(WindowResult {
                ratio,
                size_px,
                window,
                sum,
                sharpness: s,
            });
        }
    }
    best.ok_or(LocalizerError::NoFeasibleRatio)
}

/// Returns `(lo, hi, overflowed)` for a centered span of `side` pixels.
fn place_axis(center: f64, side: u32, limit: u32) -> (u32, u32, bool) {
    if side >= limit {
        return (0, limit, side > limit);
    }
    let lo = round_half_up(center - side as f64 / 2.0);
    let lo = lo.clamp(0.0, (limit - side) as f64) as u32;
    (lo, lo + side, false)
}

/// Maps a window center back to a square pixel crop of side `crop_size_px`.
///
/// A crop that overflows an image edge is translated back inside; an axis on
/// which the side exceeds the image spans the whole image and the crop is
/// flagged [`CropFlag::CropLargerThanImage`].
pub fn map_to_pixels<T: Scalar>(
    result: &WindowResult<T>,
    geometry: &ImageGeometry,
    crop_size_px: f64,
    target: &str,
) -> CropRegion {
    let w = result.window;
    let cx = (w.grid_x as f64 + w.width_cells as f64 / 2.0) * geometry.cell_w_px;
    let cy = (w.grid_y as f64 + w.height_cells as f64 / 2.0) * geometry.cell_h_px;
    let side = round_half_up(crop_size_px).max(1.0).min(u32::MAX as f64) as u32;
    let (x1, x2, ox) = place_axis(cx, side, geometry.width_px);
    let (y1, y2, oy) = place_axis(cy, side, geometry.height_px);
    CropRegion {
        x1,
        y1,
        x2,
        y2,
        score: result.sum.as_f64(),
        target: target.to_string(),
        ratio: Some(result.ratio),
        flag: if ox || oy {
            CropFlag::CropLargerThanImage
        } else {
            CropFlag::None
        },
        window: Some(w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::reshape_grid;
    use proptest::prelude::*;

    fn geom32() -> ImageGeometry {
        ImageGeometry::uniform(896, 896, 32, 32)
    }

    #[test]
    fn base_selection() {
        let cfg = LocalizerConfig::default();
        assert_eq!(effective_base(&geom32(), &cfg), 224);
        let big = ImageGeometry::uniform(8192, 4608, 32, 32);
        assert_eq!(effective_base(&big, &cfg), 448);
        let edge = ImageGeometry::uniform(2048, 1024, 32, 32);
        assert_eq!(effective_base(&edge, &cfg), 448);
    }

    #[test]
    fn projection() {
        assert_eq!(project_window(224.0, &geom32()), (8, 8));
        assert_eq!(project_window(1.2 * 224.0, &geom32()), (10, 10));
        let small = ImageGeometry::uniform(112, 112, 4, 4);
        assert_eq!(project_window(1e6, &small), (4, 4));
        assert_eq!(project_window(1.0, &small), (1, 1));
        // half-way rounds up
        assert_eq!(
            project_window(14.0, &ImageGeometry::uniform(280, 280, 10, 10)),
            (1, 1)
        );
        assert_eq!(
            project_window(42.0, &ImageGeometry::uniform(280, 280, 10, 10)),
            (2, 2)
        );
    }

    #[test]
    fn max_window_cases() {
        let g = AttentionGrid::filled(5, 4, 0.3).unwrap();
        assert_eq!(max_window(&g, 2, 3).unwrap().0, 0);
        assert_eq!(max_window(&g, 2, 3).unwrap().1, 0);

        let g = AttentionGrid::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(max_window(&g, 1, 1).unwrap(), (1, 1, 4.0));

        let mut v = vec![0.0; 9];
        v[4] = 5.0;
        let g = reshape_grid(v, 3, 3).unwrap();
        assert_eq!(max_window(&g, 2, 2).unwrap(), (0, 0, 5.0));

        assert!(matches!(
            max_window(&g, 4, 1),
            Err(LocalizerError::WindowLargerThanGrid { .. })
        ));
    }

    #[test]
    fn sharpness_cases() {
        let g = AttentionGrid::filled(6, 6, 1.7).unwrap();
        let win = GridWindow {
            grid_x: 2,
            grid_y: 2,
            width_cells: 2,
            height_cells: 2,
        };
        assert_eq!(sharpness(&g, win), 0.0);

        let mut v = vec![0.0; 36];
        for r in 2..4 {
            for c in 2..4 {
                v[r * 6 + c] = 2.5;
            }
        }
        let g = reshape_grid(v, 6, 6).unwrap();
        assert_eq!(sharpness(&g, win), 2.5);

        let g = reshape_grid(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3).unwrap();
        let whole = GridWindow {
            grid_x: 0,
            grid_y: 0,
            width_cells: 3,
            height_cells: 2,
        };
        assert_eq!(sharpness(&g, whole), 21.0 / 6.0);
    }

    #[test]
    fn scale_selection_basics() {
        // every window up to half the grid has a neighbour, so all sharpness is 0
        let g = AttentionGrid::filled(32, 32, 1.0).unwrap();
        let half = LocalizerConfig {
            ratios: vec![1.0, 1.2, 1.4, 1.6, 1.8, 2.0],
            ..Default::default()
        };
        let res = select_scale(&g, &geom32(), &half).unwrap();
        assert_eq!(res.ratio, 1.0);
        assert_eq!(res.sharpness, 0.0);
        // a whole-grid window has no neighbours and scores the grid mean
        let res = select_scale(&g, &geom32(), &LocalizerConfig::default()).unwrap();
        assert_eq!((res.ratio, res.sharpness), (4.0, 1.0));

        let single = LocalizerConfig {
            ratios: vec![1.4],
            ..Default::default()
        };
        let mut v = vec![0.0; 32 * 32];
        v[10 * 32 + 20] = 1.0;
        let g = reshape_grid(v, 32, 32).unwrap();
        let res = select_scale(&g, &geom32(), &single).unwrap();
        assert_eq!(res.ratio, 1.4);
        assert_eq!((res.window.width_cells, res.window.height_cells), (11, 11));
        assert_eq!((res.window.grid_x, res.window.grid_y), (10, 0));

        let none = LocalizerConfig {
            ratios: vec![],
            ..Default::default()
        };
        assert_eq!(
            select_scale(&g, &geom32(), &none),
            Err(LocalizerError::NoFeasibleRatio)
        );
    }

    #[test]
    fn pixel_mapping() {
        let res = WindowResult {
            ratio: 1.0,
            size_px: 224.0,
            window: GridWindow {
                grid_x: 0,
                grid_y: 0,
                width_cells: 8,
                height_cells: 8,
            },
            sum: 1.0,
            sharpness: 0.0,
        };
        let c = map_to_pixels(&res, &geom32(), 224.0, "t");
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0, 0, 224, 224));
        assert_eq!(c.flag, CropFlag::None);

        let right = WindowResult {
            window: GridWindow {
                grid_x: 28,
                grid_y: 3,
                width_cells: 4,
                height_cells: 4,
            },
            ..res
        };
        let c = map_to_pixels(&right, &geom32(), 448.0, "t");
        assert_eq!((c.x1, c.x2), (448, 896));
        assert_eq!((c.y1, c.y2), (0, 448));

        let c = map_to_pixels(&res, &geom32(), 1000.0, "t");
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0, 0, 896, 896));
        assert_eq!(c.flag, CropFlag::CropLargerThanImage);
    }

    #[test]
    fn config_validation() {
        assert!(LocalizerConfig::default().validate().is_ok());
        let bad = LocalizerConfig {
            ratios: vec![1.0, 1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn f32_selection_matches_f64() {
        let vals: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64).collect();
        let g64 = reshape_grid(vals.clone(), 8, 8).unwrap();
        let g32 = reshape_grid(vals.iter().map(|&v| v as f32).collect(), 8, 8).unwrap();
        let geom = ImageGeometry::uniform(224, 224, 8, 8);
        let cfg = LocalizerConfig {
            base_size_px: 56,
            ..Default::default()
        };
        let a = select_scale(&g64, &geom, &cfg).unwrap();
        let b = select_scale(&g32, &geom, &cfg).unwrap();
        assert_eq!((a.ratio, a.window), (b.ratio, b.window));
    }

    fn grid_strategy() -> impl Strategy<Value = AttentionGrid<f64>> {
        (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
            prop::collection::vec(0.0f64..10.0, r * c)
                .prop_map(move |v| reshape_grid(v, r, c).unwrap())
        })
    }

    proptest! {
        #[test]
        fn crops_stay_inside_image(
            g in grid_strategy(),
            w_px in 1u32..4000,
            h_px in 1u32..4000,
        ) {
            let geom = ImageGeometry::uniform(w_px.max(g.cols() as u32), h_px.max(g.rows() as u32), g.rows(), g.cols());
            let cfg = LocalizerConfig::default();
            let res = select_scale(&g, &geom, &cfg).unwrap();
            let crop = map_to_pixels(&res, &geom, res.size_px, "t");
            prop_assert!(crop.within(geom.width_px, geom.height_px));
            prop_assert!(crop.area() > 0);
        }

        #[test]
        fn sat_matches_direct(g in grid_strategy(), a in any::<u32>(), b in any::<u32>(), c in any::<u32>(), d in any::<u32>()) {
            let w = 1 + a as usize % g.cols();
            let h = 1 + b as usize % g.rows();
            let x = c as usize % (g.cols() - w + 1);
            let y = d as usize % (g.rows() - h + 1);
            let sat = SummedAreaTable::new(&g);
            let a = sat.window_sum(x, y, w, h);
            let b = g.window_sum(x, y, w, h);
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-9));
        }
    }
}
