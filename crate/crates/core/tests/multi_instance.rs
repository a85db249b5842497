use svfeye::grid::{grid_from_record, AttentionGrid};
use svfeye::multi_instance::{iou, separate_instances};
use svfeye::pipeline::{self, PipelineConfig};
use svfeye::synth::{generate_synthetic, Scenario};
use svfeye::{Action, CropRegion, ForegroundParams, ImageGeometry};

/// Flood fill from every unvisited foreground cell with an explicit stack.
fn oracle_boxes(g: &AttentionGrid<f64>, geom: &ImageGeometry) -> Vec<(u32, u32, u32, u32)> {
    let v = g.values();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let fg: Vec<bool> = v.iter().map(|&x| x >= mean + sd).collect();
    let (rows, cols) = (g.rows(), g.cols());
    let mut seen = vec![false; v.len()];
    let mut found = Vec::new();
    for s in 0..v.len() {
        if !fg[s] || seen[s] {
            continue;
        }
        let (mut r0, mut c0, mut r1, mut c1) = (rows, cols, 0, 0);
        let mut mass = 0.0;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / cols, i % cols);
            (r0, c0, r1, c1) = (r0.min(r), c0.min(c), r1.max(r), c1.max(c));
            mass += v[i];
            let mut nb = Vec::new();
            if r > 0 {
                nb.push(i - cols);
            }
            if r + 1 < rows {
                nb.push(i + cols);
            }
            if c > 0 {
                nb.push(i - 1);
            }
            if c + 1 < cols {
                nb.push(i + 1);
            }
            for j in nb {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        let px = |k: usize, cell: f64| (k as f64 * cell) as u32;
        found.push((
            mass,
            (
                px(c0, geom.cell_w_px),
                px(r0, geom.cell_h_px),
                px(c1 + 1, geom.cell_w_px),
                px(r1 + 1, geom.cell_h_px),
            ),
        ));
    }
    found.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut kept: Vec<(u32, u32, u32, u32)> = Vec::new();
    for (_, b) in found {
        let overlap = kept.iter().any(|k| {
            let ix = k.2.min(b.2).saturating_sub(k.0.max(b.0)) as f64;
            let iy = k.3.min(b.3).saturating_sub(k.1.max(b.1)) as f64;
            let area = |q: &(u32, u32, u32, u32)| ((q.2 - q.0) * (q.3 - q.1)) as f64;
            ix * iy / (area(k) + area(&b) - ix * iy) > 0.5
        });
        if !overlap {
            kept.push(b);
        }
    }
    kept.sort();
    kept
}

fn corners(boxes: &[CropRegion]) -> Vec<(u32, u32, u32, u32)> {
    let mut v: Vec<_> = boxes.iter().map(|b| (b.x1, b.y1, b.x2, b.y2)).collect();
    v.sort();
    v
}

#[test]
fn two_blob_traces_yield_two_boxes() {
    let params = ForegroundParams::default();
    for (t, gt) in generate_synthetic(50, Scenario::UncertainTwoBlobs, 5) {
        let g: AttentionGrid<f64> = grid_from_record(&t.attention[0], &t.geometry).unwrap();
        let boxes = separate_instances(&g, &t.geometry, &params, "x");
        assert_eq!(boxes.len(), 2, "{}", t.sample_id);
        assert_eq!(
            corners(&boxes),
            oracle_boxes(&g, &t.geometry),
            "{}",
            t.sample_id
        );
        assert!(iou(&boxes[0], &boxes[1]) <= 0.5);
        for blob in &gt.blobs {
            let (px, py) = (
                blob.peak_col as u32 * 28 + 14,
                blob.peak_row as u32 * 28 + 14,
            );
            assert!(
                boxes
                    .iter()
                    .any(|b| (b.x1..b.x2).contains(&px) && (b.y1..b.y2).contains(&py)),
                "{}: planted peak not covered",
                t.sample_id
            );
        }

        let d = pipeline::run_sample(&t, &PipelineConfig::default()).unwrap();
        assert_eq!(d.action, Action::Fuse);
        assert_eq!(d.crops.len(), 2);
        assert!(d.merged_crop.is_none());
    }
}

#[test]
fn uniform_traces_fall_back_to_full_image() {
    for (t, _) in generate_synthetic(10, Scenario::UniformAttention, 5) {
        let d = pipeline::run_sample(&t, &PipelineConfig::default()).unwrap();
        assert_eq!(d.action, Action::Fuse);
        assert_eq!(d.crops.len(), 1);
        let c = &d.crops[0];
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0, 0, 896, 896));
        assert_eq!(c.flag, svfeye::CropFlag::UniformAttention);
    }
}
