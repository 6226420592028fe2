//! Peak extraction and average precision on center heatmaps.

use crate::geometry::{BevBox, GridSpec, Heatmap};

/// One extracted peak.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub scene: usize,
    pub class_id: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// Minimum peak score kept as a detection.
pub const MIN_PEAK_SCORE: f64 = 0.05;

/// Match radius in cells.
pub const MATCH_RADIUS: f64 = 2.0;

/// 3×3 local maxima per class. On plateaus the first cell in raster order
/// wins: a cell must be strictly above earlier neighbours and at least as
/// high as later ones.
pub fn detect_peaks(heatmap: &Heatmap<f64>, scene: usize, min_score: f64) -> Vec<Detection> {
    let (k, h, w) = heatmap.tensor().dims3().expect("rank 3");
    let d = heatmap.tensor().data();
    let mut out = Vec::new();
    for c in 0..k {
        let at = |r: usize, col: usize| d[(c * h + r) * w + col];
        for r in 0..h {
            for col in 0..w {
                let v = at(r, col);
                if v < min_score {
                    continue;
                }
                let mut peak = true;
                'n: for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        if dr == 0 && dc == 0 {
                            continue;
                        }
                        let (rr, cc) = (r as isize + dr, col as isize + dc);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        let nv = at(rr as usize, cc as usize);
                        let earlier = (dr, dc) < (0, 0);
                        if nv > v || (earlier && nv == v) {
                            peak = false;
                            break 'n;
                        }
                    }
                }
                if peak {
                    out.push(Detection {
                        scene,
                        class_id: c,
                        row: r,
                        col,
                        score: v,
                    });
                }
            }
        }
    }
    out
}

/// Ground-truth center cell and class of every box whose center lies on the grid.
pub fn gt_centers(boxes: &[BevBox<f64>], grid: &GridSpec<f64>) -> Vec<(usize, usize, usize)> {
    boxes
        .iter()
        .filter_map(|b| grid.cell_of(b.cx, b.cy).map(|(r, c)| (b.class_id, r, c)))
        .collect()
}

/// Greedy one-to-one matching in descending score order; each detection
/// takes the nearest unmatched same-class center of its scene within
/// `MATCH_RADIUS` cells. Returns `(score, is_tp)` sorted by descending score.
pub fn match_detections(
    detections: &[Detection],
    gts: &[Vec<(usize, usize, usize)>],
) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let d = &detections[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, &(cls, r, c)) in gts[d.scene].iter().enumerate() {
            if cls != d.class_id || used[d.scene][j] {
                continue;
            }
            let dist =
                ((r as f64 - d.row as f64).powi(2) + (c as f64 - d.col as f64).powi(2)).sqrt();
            if dist <= MATCH_RADIUS && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        if let Some((_, j)) = best {
            used[d.scene][j] = true;
        }
        out.push((d.score, best.is_some()));
    }
    out
}

/// Non-interpolated AP: `Σ ΔRecall · Precision` over descending score
/// thresholds, all detections sharing a score entering together. Zero when
/// there is no ground truth.
pub fn average_precision(matched: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut ap = 0.0;
    let (mut tp, mut seen, mut prev_recall) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < matched.len() {
        let s = matched[i].0;
        while i < matched.len() && matched[i].0 == s {
            tp += matched[i].1 as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / n_gt as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    ap
}

/// AP of predicted heatmaps against the boxes of each scene.
pub fn synthetic_ap(
    predictions: &[Heatmap<f64>],
    boxes: &[Vec<BevBox<f64>>],
    grid: &GridSpec<f64>,
) -> f64 {
    let dets: Vec<Detection> = predictions
        .iter()
        .enumerate()
        .flat_map(|(i, p)| detect_peaks(p, i, MIN_PEAK_SCORE))
        .collect();
    let gts: Vec<_> = boxes.iter().map(|b| gt_centers(b, grid)).collect();
    let n_gt = gts.iter().map(Vec::len).sum();
    average_precision(&match_detections(&dets, &gts), n_gt)
}
