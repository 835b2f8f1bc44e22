//! Decomposition-quality metrics: continuous alpha IoU, white-rendered RGB
//! L1, optimal layer matching, and the max-edits evaluation protocol.
//!
//! Predicted and ground-truth layers are paired by the one-to-one
//! assignment maximizing total soft IoU. An "edit" replaces one predicted
//! layer with its matched ground-truth layer (or stands in for a missing
//! one); metrics are reported for each edit budget, so columns are
//! monotone in the number of edits by construction.

use crate::compose::{composite_on_white, ForegroundLayer, LayeredSample};
use crate::dataset::read_sample;
use crate::error::{Error, Result};
use crate::image::AlphaMask;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Soft intersection-over-union on continuous alpha values:
/// `sum(min(a,b)) / sum(max(a,b))`, defined as 1 when both masks are
/// identically zero.
pub fn alpha_soft_iou(a: &AlphaMask, b: &AlphaMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::dims("alpha_soft_iou", a.dims(), b.dims()));
    }
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += x.min(y);
        union += x.max(y);
    }
    Ok(if union == 0.0 { 1.0 } else { inter / union })
}

/// Mean absolute difference between the two layers rendered over white
/// through their own mattes, so invisible regions cannot dominate.
pub fn rgb_l1(pred: &ForegroundLayer, gt: &ForegroundLayer) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::dims("rgb_l1", pred.dims(), gt.dims()));
    }
    let a = composite_on_white(pred.alpha(), pred.rgb())?;
    let b = composite_on_white(gt.alpha(), gt.rgb())?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Alternative L1: alpha-weighted mean absolute difference on raw rgb,
/// weighting each pixel by the larger of the two opacities.
pub fn rgb_l1_alpha_weighted(pred: &ForegroundLayer, gt: &ForegroundLayer) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::dims("rgb_l1_alpha_weighted", pred.dims(), gt.dims()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let pa = pred.alpha().data();
    let ga = gt.alpha().data();
    let pr = pred.rgb().data();
    let gr = gt.rgb().data();
    for px in 0..pa.len() {
        let w = pa[px].max(ga[px]);
        for c in 0..3 {
            num += w * (pr[px * 3 + c] - gr[px * 3 + c]).abs();
        }
        den += 3.0 * w;
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// One matched (predicted, ground-truth) layer pair and its IoU score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred_index: usize,
    pub gt_index: usize,
    pub iou: f64,
}

/// Result of assigning predicted layers to ground-truth layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMatching {
    /// Sorted by ground-truth index.
    pub pairs: Vec<MatchedPair>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// Exhaustive assignment maximizing total score; rows assign into columns,
/// `rows <= cols`. Returns (best total, column chosen per row).
fn exhaustive_assign(scores: &[Vec<f64>], rows: usize, cols: usize) -> (f64, Vec<usize>) {
    fn recurse(
        scores: &[Vec<f64>],
        row: usize,
        rows: usize,
        cols: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<usize>,
        acc: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if row == rows {
            if acc > best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        for col in 0..cols {
            if used[col] {
                continue;
            }
            used[col] = true;
            current.push(col);
            recurse(
                scores,
                row + 1,
                rows,
                cols,
                used,
                current,
                acc + scores[row][col],
                best,
            );
            current.pop();
            used[col] = false;
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut used = vec![false; cols];
    let mut current = Vec::new();
    recurse(scores, 0, rows, cols, &mut used, &mut current, 0.0, &mut best);
    best
}

/// Hungarian assignment on fixed-point weights for larger problems.
fn kuhn_munkres_assign(scores: &[Vec<f64>], rows: usize, cols: usize) -> Vec<usize> {
    let weights = pathfinding::matrix::Matrix::from_rows(
        (0..rows).map(|r| (0..cols).map(move |c| (scores[r][c] * 1e9).round() as i64)),
    )
    .expect("rectangular score matrix");
    let (_, assignment) = pathfinding::kuhn_munkres::kuhn_munkres(&weights);
    assignment
}

/// Optimal one-to-one layer assignment maximizing total soft IoU.
///
/// Exhaustive for up to six layers per side, Hungarian beyond that; the two
/// agree exactly on the exhaustive range.
pub fn match_layers(pred: &[ForegroundLayer], gt: &[ForegroundLayer]) -> Result<LayerMatching> {
    if pred.is_empty() || gt.is_empty() {
        return Ok(LayerMatching {
            pairs: Vec::new(),
            unmatched_pred: (0..pred.len()).collect(),
            unmatched_gt: (0..gt.len()).collect(),
        });
    }
    // Orient so rows are the smaller side.
    let transpose = pred.len() > gt.len();
    let (row_layers, col_layers) = if transpose { (gt, pred) } else { (pred, gt) };
    let rows = row_layers.len();
    let cols = col_layers.len();
    let mut scores = vec![vec![0.0; cols]; rows];
    for (r, rl) in row_layers.iter().enumerate() {
        for (c, cl) in col_layers.iter().enumerate() {
            scores[r][c] = alpha_soft_iou(rl.alpha(), cl.alpha())?;
        }
    }
    let assignment = if rows.max(cols) <= 6 {
        exhaustive_assign(&scores, rows, cols).1
    } else {
        kuhn_munkres_assign(&scores, rows, cols)
    };

    let mut pairs = Vec::with_capacity(rows);
    let mut col_used = vec![false; cols];
    for (r, &c) in assignment.iter().enumerate() {
        col_used[c] = true;
        let (pred_index, gt_index) = if transpose { (c, r) } else { (r, c) };
        pairs.push(MatchedPair {
            pred_index,
            gt_index,
            iou: scores[r][c],
        });
    }
    pairs.sort_by_key(|p| p.gt_index);
    let unmatched_cols: Vec<usize> = (0..cols).filter(|&c| !col_used[c]).collect();
    let (unmatched_pred, unmatched_gt) = if transpose {
        (unmatched_cols, Vec::new())
    } else {
        (Vec::new(), unmatched_cols)
    };
    Ok(LayerMatching {
        pairs,
        unmatched_pred,
        unmatched_gt,
    })
}

/// Metrics for one sample at one edit budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub rgb_l1: f64,
    pub alpha_soft_iou: f64,
}

/// Per ground-truth pair metrics before any edits; the background pair is
/// appended with an implicit fully-opaque matte on both sides.
struct PairState {
    l1: f64,
    iou: f64,
    /// Gain in IoU (then L1) from spending one edit on this pair.
    editable: bool,
}

fn pair_states(pred: &LayeredSample, gt: &LayeredSample) -> Result<Vec<PairState>> {
    if pred.dims() != gt.dims() {
        return Err(Error::dims("evaluate", pred.dims(), gt.dims()));
    }
    let matching = match_layers(pred.layers(), gt.layers())?;
    let matched: std::collections::HashMap<usize, usize> = matching
        .pairs
        .iter()
        .map(|p| (p.gt_index, p.pred_index))
        .collect();

    let (h, w) = gt.dims();
    let empty_layer = ForegroundLayer::new(
        crate::image::Image::white(h, w)?,
        AlphaMask::filled(h, w, 0.0)?,
        1,
    )?;

    let mut states = Vec::with_capacity(gt.layer_count() + 1);
    for (gt_index, gt_layer) in gt.layers().iter().enumerate() {
        let pred_layer = matched
            .get(&gt_index)
            .map(|&p| &pred.layers()[p])
            .unwrap_or(&empty_layer);
        states.push(PairState {
            l1: rgb_l1(pred_layer, gt_layer)?,
            iou: alpha_soft_iou(pred_layer.alpha(), gt_layer.alpha())?,
            editable: true,
        });
    }
    // Background pair: both sides fully opaque, never consumes an edit.
    let bg_l1: f64 = pred
        .background()
        .data()
        .iter()
        .zip(gt.background().data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / (h * w * 3) as f64;
    states.push(PairState {
        l1: bg_l1,
        iou: 1.0,
        editable: false,
    });
    Ok(states)
}

fn metrics_after_edits(states: &[PairState], edits: usize) -> EditMetrics {
    // Greedy by IoU gain, ties by L1 gain then index; each edit perfects
    // one ground-truth pair.
    let mut order: Vec<usize> = states
        .iter()
        .enumerate()
        .filter(|(_, s)| s.editable)
        .map(|(i, _)| i)
        .collect();
    order.sort_by(|&a, &b| {
        let gain_a = (1.0 - states[a].iou, states[a].l1);
        let gain_b = (1.0 - states[b].iou, states[b].l1);
        gain_b
            .partial_cmp(&gain_a)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let edited: std::collections::HashSet<usize> = order.into_iter().take(edits).collect();
    let n = states.len() as f64;
    let mut l1 = 0.0;
    let mut iou = 0.0;
    for (i, s) in states.iter().enumerate() {
        if edited.contains(&i) {
            iou += 1.0;
        } else {
            l1 += s.l1;
            iou += s.iou;
        }
    }
    EditMetrics {
        rgb_l1: l1 / n,
        alpha_soft_iou: iou / n,
    }
}

/// Evaluates a prediction against ground truth with an edit budget of
/// `max_edits` corrective layer substitutions.
pub fn evaluate_with_edits(
    pred: &LayeredSample,
    gt: &LayeredSample,
    max_edits: usize,
) -> Result<EditMetrics> {
    let states = pair_states(pred, gt)?;
    Ok(metrics_after_edits(&states, max_edits))
}

/// Evaluates one sample at every edit budget `0..=max_edits`.
pub fn evaluate_over_edits(
    pred: &LayeredSample,
    gt: &LayeredSample,
    max_edits: usize,
) -> Result<Vec<EditMetrics>> {
    let states = pair_states(pred, gt)?;
    Ok((0..=max_edits)
        .map(|e| metrics_after_edits(&states, e))
        .collect())
}

/// Per-sample evaluation entry in a dataset report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub sample_id: String,
    /// Metrics at edit budgets `0..=max_edits`.
    pub per_edit: Vec<EditMetrics>,
}

/// A sample pair that could not be evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub pred_manifest: String,
    pub gt_manifest: String,
    pub reason: String,
}

/// Dataset-level evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub max_edits: usize,
    pub evaluated: usize,
    pub skipped_count: usize,
    pub skipped: Vec<SkippedSample>,
    pub per_sample: Vec<SampleEval>,
    /// Arithmetic means over evaluated samples, per edit budget.
    pub aggregate: Vec<EditMetrics>,
}

impl EvalReport {
    /// Renders the aggregate block as an aligned text table with one column
    /// per edit budget.
    pub fn to_table_string(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..=self.max_edits).map(|e| format!("{e:>8}")).collect();
        out.push_str(&format!("{:<16}{}\n", "# Max Edits", header.join("")));
        let l1: Vec<String> = self
            .aggregate
            .iter()
            .map(|m| format!("{:>8.4}", m.rgb_l1))
            .collect();
        out.push_str(&format!("{:<16}{}\n", "RGB L1", l1.join("")));
        let iou: Vec<String> = self
            .aggregate
            .iter()
            .map(|m| format!("{:>8.4}", m.alpha_soft_iou))
            .collect();
        out.push_str(&format!("{:<16}{}\n", "Alpha soft IoU", iou.join("")));
        out.push_str(&format!(
            "samples evaluated: {}  skipped: {}\n",
            self.evaluated, self.skipped_count
        ));
        out
    }
}

/// Evaluates manifest pairs and aggregates by arithmetic mean. Pairs that
/// fail to load are reported and excluded from the aggregates.
pub fn evaluate_dataset(
    pairs: &[(PathBuf, PathBuf)],
    max_edits: usize,
) -> Result<EvalReport> {
    let mut per_sample = Vec::new();
    let mut skipped = Vec::new();
    for (pred_path, gt_path) in pairs {
        let loaded = read_sample(pred_path)
            .map_err(|e| format!("prediction: {e}"))
            .and_then(|p| {
                read_sample(gt_path)
                    .map_err(|e| format!("ground truth: {e}"))
                    .map(|g| (p, g))
            });
        match loaded {
            Ok((pred, gt)) => {
                let per_edit = evaluate_over_edits(&pred, &gt, max_edits)
                    .map_err(|e| e.to_string())
                    .unwrap_or_else(|_| Vec::new());
                if per_edit.is_empty() {
                    skipped.push(SkippedSample {
                        pred_manifest: pred_path.display().to_string(),
                        gt_manifest: gt_path.display().to_string(),
                        reason: "evaluation failed (dimension mismatch)".into(),
                    });
                    continue;
                }
                let sample_id = gt_path
                    .parent()
                    .and_then(|p| p.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| gt_path.display().to_string());
                per_sample.push(SampleEval {
                    sample_id,
                    per_edit,
                });
            }
            Err(reason) => skipped.push(SkippedSample {
                pred_manifest: pred_path.display().to_string(),
                gt_manifest: gt_path.display().to_string(),
                reason,
            }),
        }
    }
    let mut aggregate = Vec::with_capacity(max_edits + 1);
    for e in 0..=max_edits {
        let n = per_sample.len().max(1) as f64;
        let l1 = per_sample.iter().map(|s| s.per_edit[e].rgb_l1).sum::<f64>() / n;
        let iou = per_sample
            .iter()
            .map(|s| s.per_edit[e].alpha_soft_iou)
            .sum::<f64>()
            / n;
        aggregate.push(EditMetrics {
            rgb_l1: if per_sample.is_empty() { 0.0 } else { l1 },
            alpha_soft_iou: if per_sample.is_empty() { 1.0 } else { iou },
        });
    }
    Ok(EvalReport {
        max_edits,
        evaluated: per_sample.len(),
        skipped_count: skipped.len(),
        skipped,
        per_sample,
        aggregate,
    })
}
