//! Instance-level segmentation metrics: one-to-one instance Dice and
//! IoU-threshold-averaged detection AP over 3D label volumes.
//!
//! Matching is greedy and one-to-one. Predictions without confidence
//! scores are ranked by voxel count (largest first), then by ID.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::LabelVolume;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction shape {pred:?} differs from ground truth shape {gt:?}")]
    ShapeMismatch { pred: [usize; 3], gt: [usize; 3] },
    #[error("IoU threshold {0} is outside (0, 1)")]
    BadThreshold(f64),
    #[error("got {got} scores for {expected} predicted instances")]
    ScoreCount { expected: usize, got: usize },
}

// IoU ties at a threshold (e.g. exactly 0.75) must count as matches.
const IOU_SLACK: f64 = 1e-12;

/// Voxel overlaps between predicted and ground-truth instances.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMatchTable {
    pred_ids: Vec<u64>,
    gt_ids: Vec<u64>,
    pred_sizes: Vec<u64>,
    gt_sizes: Vec<u64>,
    /// Sparse `(pred index, gt index) -> |pred ∩ gt|`, sorted by key.
    overlaps: BTreeMap<(usize, usize), u64>,
}

/// One candidate pairing, as seen by the matchers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub pred: usize,
    pub gt: usize,
    pub intersection: u64,
    pub iou: f64,
}

fn count_slab(pred: &[u64], gt: &[u64]) -> HashMap<(u64, u64), u64> {
    let mut m = HashMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if p != 0 || g != 0 {
            *m.entry((p, g)).or_insert(0) += 1;
        }
    }
    m
}

/// Joint histogram of `(pred, gt)` label pairs, parallel over z-slices.
/// Integer counts make the reduction order irrelevant.
pub fn build_match_table(
    pred: &LabelVolume,
    gt: &LabelVolume,
) -> Result<InstanceMatchTable, MetricsError> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape(),
            gt: gt.shape(),
        });
    }
    let [_, h, w] = pred.shape();
    let slice = h * w;
    let joint = pred
        .data()
        .par_chunks(slice)
        .zip(gt.data().par_chunks(slice))
        .map(|(p, g)| count_slab(p, g))
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_insert(0) += v;
            }
            a
        });

    let mut pred_size: BTreeMap<u64, u64> = BTreeMap::new();
    let mut gt_size: BTreeMap<u64, u64> = BTreeMap::new();
    for (&(p, g), &n) in &joint {
        if p != 0 {
            *pred_size.entry(p).or_insert(0) += n;
        }
        if g != 0 {
            *gt_size.entry(g).or_insert(0) += n;
        }
    }
    let pred_ids: Vec<u64> = pred_size.keys().copied().collect();
    let gt_ids: Vec<u64> = gt_size.keys().copied().collect();
    let pred_index: HashMap<u64, usize> = pred_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let gt_index: HashMap<u64, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let overlaps = joint
        .iter()
        .filter(|((p, g), _)| *p != 0 && *g != 0)
        .map(|(&(p, g), &n)| ((pred_index[&p], gt_index[&g]), n))
        .collect();

    Ok(InstanceMatchTable {
        pred_ids,
        gt_ids,
        pred_sizes: pred_size.into_values().collect(),
        gt_sizes: gt_size.into_values().collect(),
        overlaps,
    })
}

impl InstanceMatchTable {
    pub fn pred_ids(&self) -> &[u64] {
        &self.pred_ids
    }

    pub fn gt_ids(&self) -> &[u64] {
        &self.gt_ids
    }

    pub fn pred_sizes(&self) -> &[u64] {
        &self.pred_sizes
    }

    pub fn gt_sizes(&self) -> &[u64] {
        &self.gt_sizes
    }

    /// `|pred ∩ gt|` looked up by instance ID; 0 when they do not touch.
    pub fn intersection(&self, pred_id: u64, gt_id: u64) -> u64 {
        let (Ok(p), Ok(g)) = (
            self.pred_ids.binary_search(&pred_id),
            self.gt_ids.binary_search(&gt_id),
        ) else {
            return 0;
        };
        self.overlaps.get(&(p, g)).copied().unwrap_or(0)
    }

    pub fn iou(&self, pred: usize, gt: usize) -> f64 {
        let inter = self.overlaps.get(&(pred, gt)).copied().unwrap_or(0);
        iou_of(inter, self.pred_sizes[pred], self.gt_sizes[gt])
    }

    /// All touching pairs, ordered by (pred index, gt index).
    pub fn overlaps(&self) -> impl Iterator<Item = Overlap> + '_ {
        self.overlaps
            .iter()
            .map(|(&(pred, gt), &intersection)| Overlap {
                pred,
                gt,
                intersection,
                iou: iou_of(intersection, self.pred_sizes[pred], self.gt_sizes[gt]),
            })
    }
}

fn iou_of(inter: u64, a: u64, b: u64) -> f64 {
    let union = a + b - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean Dice over ground-truth instances and unmatched predictions.
///
/// Pairs are matched greedily by descending IoU (ties by pred then gt index);
/// each instance is used at most once; unmatched instances score 0. With no
/// instances on either side the result is 1.
pub fn instance_dice(table: &InstanceMatchTable) -> f64 {
    let n_pred = table.pred_ids.len();
    let n_gt = table.gt_ids.len();
    if n_pred == 0 && n_gt == 0 {
        return 1.0;
    }
    let mut pairs: Vec<Overlap> = table.overlaps().collect();
    pairs.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then(a.pred.cmp(&b.pred))
            .then(a.gt.cmp(&b.gt))
    });
    let mut pred_used = vec![false; n_pred];
    let mut gt_used = vec![false; n_gt];
    let mut dice_sum = 0.0;
    let mut matched = 0usize;
    for p in pairs {
        if pred_used[p.pred] || gt_used[p.gt] {
            continue;
        }
        pred_used[p.pred] = true;
        gt_used[p.gt] = true;
        matched += 1;
        let denom = (table.pred_sizes[p.pred] + table.gt_sizes[p.gt]) as f64;
        dice_sum += 2.0 * p.intersection as f64 / denom;
    }
    dice_sum / (n_gt + n_pred - matched) as f64
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instance_dice: f64,
    /// AP per IoU threshold, keyed by the threshold printed with two decimals.
    pub ap: BTreeMap<String, f64>,
    pub map: f64,
    pub counts: BTreeMap<String, DetectionCounts>,
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

impl EvalReport {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.ap.get(&threshold_key(threshold)).copied()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["instance_dice".to_string(), "map".to_string()];
        cols.extend(self.ap.keys().map(|k| format!("ap_{k}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![format!("{}", self.instance_dice), format!("{}", self.map)];
        cols.extend(self.ap.values().map(|v| format!("{v}")));
        cols.join(",")
    }
}

/// Order in which predictions claim ground truth: by score, then size, then
/// index.
fn ranking(table: &InstanceMatchTable, scores: Option<&[f64]>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..table.pred_ids.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match scores {
            Some(s) => s[b].total_cmp(&s[a]),
            None => std::cmp::Ordering::Equal,
        };
        by_score
            .then(table.pred_sizes[b].cmp(&table.pred_sizes[a]))
            .then(a.cmp(&b))
    });
    order
}

/// Area under the precision envelope of a ranked TP/FP sequence.
fn area_under_pr(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Detection AP at each IoU threshold and their mean.
///
/// At threshold `t`, predictions are visited in rank order and each claims
/// the unclaimed ground-truth instance of highest IoU if that IoU is at least
/// `t`. With empty ground truth or empty prediction AP is 0 (1 if both are
/// empty).
pub fn average_precision_3d(
    table: &InstanceMatchTable,
    scores: Option<&[f64]>,
    thresholds: &[f64],
) -> Result<EvalReport, MetricsError> {
    for &t in thresholds {
        if !(t > 0.0 && t < 1.0) {
            return Err(MetricsError::BadThreshold(t));
        }
    }
    if let Some(s) = scores {
        if s.len() != table.pred_ids.len() {
            return Err(MetricsError::ScoreCount {
                expected: table.pred_ids.len(),
                got: s.len(),
            });
        }
    }
    let n_gt = table.gt_ids.len();
    let n_pred = table.pred_ids.len();
    let order = ranking(table, scores);

    let mut candidates: Vec<Vec<Overlap>> = vec![Vec::new(); n_pred];
    for o in table.overlaps() {
        candidates[o.pred].push(o);
    }
    for c in &mut candidates {
        c.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.gt.cmp(&b.gt)));
    }

    let mut ap = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for &t in thresholds {
        let mut gt_used = vec![false; n_gt];
        let hits: Vec<bool> = order
            .iter()
            .map(|&p| {
                let best = candidates[p]
                    .iter()
                    .find(|o| !gt_used[o.gt])
                    .filter(|o| o.iou + IOU_SLACK >= t);
                if let Some(o) = best {
                    gt_used[o.gt] = true;
                    true
                } else {
                    false
                }
            })
            .collect();
        let tp = hits.iter().filter(|&&h| h).count();
        let value = match (n_gt, n_pred) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            _ => area_under_pr(&hits, n_gt),
        };
        ap.insert(threshold_key(t), value);
        counts.insert(
            threshold_key(t),
            DetectionCounts {
                tp,
                fp: n_pred - tp,
                fn_: n_gt - tp,
            },
        );
    }
    let map = if ap.is_empty() {
        0.0
    } else {
        ap.values().sum::<f64>() / ap.len() as f64
    };
    Ok(EvalReport {
        instance_dice: instance_dice(table),
        ap,
        map,
        counts,
    })
}

/// Builds the match table and the full report with default thresholds.
pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume) -> Result<EvalReport, MetricsError> {
    let table = build_match_table(pred, gt)?;
    average_precision_3d(&table, None, &default_thresholds())
}
