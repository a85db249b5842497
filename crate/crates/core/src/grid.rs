//! 2D attention maps over the vision encoder's patch grid.

use thiserror::Error;

use crate::scalar::Scalar;
use crate::trace::{AttentionRecord, ImageGeometry};

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("empty attention input")]
    EmptyInput,
    #[error("length {len} does not fit a {rows}x{cols} grid with {heads} head(s)")]
    LengthMismatch {
        len: usize,
        rows: usize,
        cols: usize,
        heads: usize,
    },
    #[error("negative attention value {value} at index {index}")]
    NegativeAttention { index: usize, value: f64 },
}

/// Row-major `rows x cols` field of non-negative attention mass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrid<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Scalar> AttentionGrid<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Flat row-major view.
    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.cols + col]
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, GridError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(GridError::LengthMismatch {
                len: rows.iter().map(Vec::len).sum(),
                rows: rows.len(),
                cols,
                heads: 1,
            });
        }
        reshape_grid(rows.concat(), rows.len(), cols)
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Result<Self, GridError> {
        reshape_grid(vec![value; rows * cols], rows, cols)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        AttentionGrid {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Direct row-major sum over `[x, x+w) x [y, y+h)` (x is the column).
    pub fn window_sum(&self, x: usize, y: usize, w: usize, h: usize) -> T {
        let mut acc = T::zero();
        for r in y..y + h {
            for c in x..x + w {
                acc = acc + self.get(r, c);
            }
        }
        acc
    }

    pub fn total(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn max_value(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    /// Every cell holds the same value.
    pub fn is_uniform(&self) -> bool {
        self.values.iter().all(|&v| v == self.values[0])
    }
}

/// Elementwise mean over `heads` stacked maps of equal length.
pub fn aggregate_heads<T: Scalar>(per_head: &[T], heads: usize) -> Result<Vec<T>, GridError> {
    if heads == 0 || per_head.is_empty() {
        return Err(GridError::EmptyInput);
    }
    if per_head.len() % heads != 0 {
        return Err(GridError::LengthMismatch {
            len: per_head.len(),
            rows: 1,
            cols: per_head.len() / heads,
            heads,
        });
    }
    let n = per_head.len() / heads;
    let mut acc = vec![T::zero(); n];
    for head in per_head.chunks_exact(n) {
        for (a, &v) in acc.iter_mut().zip(head) {
            *a = *a + v;
        }
    }
    let h = T::of_usize(heads);
    Ok(acc.into_iter().map(|v| v / h).collect())
}

/// Row-major fill: `grid[r][c] = flat[r * cols + c]`.
pub fn reshape_grid<T: Scalar>(
    flat: Vec<T>,
    rows: usize,
    cols: usize,
) -> Result<AttentionGrid<T>, GridError> {
    if rows == 0 || cols == 0 {
        return Err(GridError::EmptyInput);
    }
    if flat.len() != rows * cols {
        return Err(GridError::LengthMismatch {
            len: flat.len(),
            rows,
            cols,
            heads: 1,
        });
    }
    Ok(AttentionGrid {
        rows,
        cols,
        values: flat,
    })
}

/// Head-averages (when per-head) and reshapes a trace's attention record.
pub fn grid_from_record<T: Scalar>(
    record: &AttentionRecord,
    geometry: &ImageGeometry,
) -> Result<AttentionGrid<T>, GridError> {
    if let Some((index, &value)) = record
        .values
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= 0.0))
    {
        return Err(GridError::NegativeAttention { index, value });
    }
    let (rows, cols) = (geometry.grid_rows, geometry.grid_cols);
    let raw: Vec<T> = record.values.iter().map(|&v| T::of(v)).collect();
    let flat = match record.heads {
        Some(h) => {
            if raw.len() != h * rows * cols {
                return Err(GridError::LengthMismatch {
                    len: raw.len(),
                    rows,
                    cols,
                    heads: h,
                });
            }
            aggregate_heads(&raw, h)?
        }
        None => raw,
    };
    reshape_grid(flat, rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(values: Vec<f64>, heads: Option<usize>) -> AttentionRecord {
        AttentionRecord {
            target: "t".into(),
            layer_index: 14,
            heads,
            values,
        }
    }

    #[test]
    fn head_mean() {
        assert_eq!(
            aggregate_heads(&[1.0, 2.0, 3.0], 1).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
        assert_eq!(
            aggregate_heads(&[2.0, 2.0, 4.0, 4.0], 2).unwrap(),
            vec![3.0, 3.0]
        );
        // heads [1,3] and [5,7]
        assert_eq!(
            aggregate_heads(&[1.0, 3.0, 5.0, 7.0], 2).unwrap(),
            vec![3.0, 5.0]
        );
        assert_eq!(aggregate_heads::<f64>(&[], 2), Err(GridError::EmptyInput));
        assert_eq!(aggregate_heads(&[1.0], 0), Err(GridError::EmptyInput));
    }

    #[test]
    fn reshape_is_row_major() {
        let g = reshape_grid(vec![7.0], 1, 1).unwrap();
        assert_eq!((g.rows(), g.cols(), g.get(0, 0)), (1, 1, 7.0));
        let g = reshape_grid(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3).unwrap();
        assert_eq!(
            g,
            AttentionGrid::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap()
        );
        assert_eq!(g.get(1, 0), 4.0);
        assert!(matches!(
            reshape_grid(vec![0.0; 5], 2, 3),
            Err(GridError::LengthMismatch { len: 5, .. })
        ));
    }

    #[test]
    fn record_paths() {
        let geom = ImageGeometry::uniform(84, 56, 2, 3);
        let flat = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let g: AttentionGrid<f64> = grid_from_record(&record(flat.clone(), None), &geom).unwrap();
        assert_eq!(g, reshape_grid(flat.clone(), 2, 3).unwrap());

        let mut two = flat.clone();
        two.extend(flat.iter().map(|v| v * 3.0));
        let g: AttentionGrid<f64> = grid_from_record(&record(two, Some(2)), &geom).unwrap();
        let expect: Vec<f64> = flat.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.values(), &expect[..]);

        let bad = record(vec![1.0, -0.5, 0.0, 0.0, 0.0, 0.0], None);
        assert_eq!(
            grid_from_record::<f64>(&bad, &geom),
            Err(GridError::NegativeAttention {
                index: 1,
                value: -0.5
            })
        );
        assert!(matches!(
            grid_from_record::<f64>(&record(vec![0.0; 5], None), &geom),
            Err(GridError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn f32_grid() {
        let geom = ImageGeometry::uniform(56, 28, 1, 2);
        let g: AttentionGrid<f32> =
            grid_from_record(&record(vec![1.0, 3.0, 5.0, 7.0], Some(2)), &geom).unwrap();
        assert_eq!(g.values(), &[3.0f32, 5.0]);
    }

    proptest! {
        #[test]
        fn linear_in_input(
            vals in prop::collection::vec(0.0f64..10.0, 12),
            k in 0.01f64..100.0,
        ) {
            let geom = ImageGeometry::uniform(84, 56, 2, 3);
            let a: AttentionGrid<f64> = grid_from_record(&record(vals.clone(), Some(2)), &geom).unwrap();
            let scaled: Vec<f64> = vals.iter().map(|v| v * k).collect();
            let b: AttentionGrid<f64> = grid_from_record(&record(scaled, Some(2)), &geom).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                let want = x * k;
                prop_assert!((y - want).abs() <= 1e-6 * want.abs().max(1e-300));
            }
        }

        #[test]
        fn reshape_bijection(rows in 1usize..8, cols in 1usize..8, seed in any::<u64>()) {
            let flat: Vec<f64> = (0..rows * cols).map(|i| ((seed >> (i % 60)) & 0xff) as f64).collect();
            let g = reshape_grid(flat.clone(), rows, cols).unwrap();
            let mut back = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    back.push(g.get(r, c));
                }
            }
            prop_assert_eq!(back, flat);
        }
    }
}
