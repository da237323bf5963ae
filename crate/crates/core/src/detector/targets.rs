use rand::seq::SliceRandom;
use rand::Rng;

use super::coder::encode;
use crate::boxes::{BBox, BoxSet};

#[derive(Clone, Debug, PartialEq)]
pub struct RpnTargets {
    /// 1 positive, 0 negative, -1 ignored.
    pub labels: Vec<i8>,
    /// Ground-truth index matched by each positive anchor.
    pub matched: Vec<Option<usize>>,
    /// Regression targets (zero for non-positives).
    pub deltas: Vec<[f64; 4]>,
}

impl RpnTargets {
    pub fn positives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == 1).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == 0).collect()
    }
}

/// Labels every anchor against the ground truth: positive at IoU >=
/// `pos_iou` with some box, or when it is a box's best anchor (lowest index
/// on ties, IoU > 0); negative below `neg_iou`; ignored otherwise. Each
/// positive regresses toward its highest-IoU box.
pub fn assign_rpn_targets(anchors: &[BBox], gt: &BoxSet, pos_iou: f64, neg_iou: f64) -> RpnTargets {
    let n = anchors.len();
    let mut labels = vec![0i8; n];
    let mut matched = vec![None; n];
    let mut deltas = vec![[0.0; 4]; n];
    if gt.is_empty() {
        return RpnTargets { labels, matched, deltas };
    }
    let ious: Vec<Vec<f64>> = anchors.iter().map(|a| gt.boxes.iter().map(|g| a.iou(g)).collect()).collect();
    let mut best_gt = vec![(0usize, 0.0f64); n];
    for (i, row) in ious.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > best_gt[i].1 {
                best_gt[i] = (j, v);
            }
        }
        let v = best_gt[i].1;
        labels[i] = if v >= pos_iou {
            1
        } else if v < neg_iou {
            0
        } else {
            -1
        };
    }
    for j in 0..gt.len() {
        let mut best = (usize::MAX, 0.0f64);
        for (i, row) in ious.iter().enumerate() {
            if row[j] > best.1 {
                best = (i, row[j]);
            }
        }
        if best.0 != usize::MAX {
            labels[best.0] = 1;
        }
    }
    for i in 0..n {
        if labels[i] == 1 {
            let j = best_gt[i].0;
            matched[i] = Some(j);
            deltas[i] = encode(&gt.boxes[j], &anchors[i], [1.0; 4]);
        }
    }
    RpnTargets { labels, matched, deltas }
}

/// Random subset of at most `batch` indices with at most
/// `pos_fraction * batch` positives; negatives fill the rest.
pub fn sample_pos_neg<R: Rng + ?Sized>(
    pos: &[usize],
    neg: &[usize],
    batch: usize,
    pos_fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let max_pos = ((batch as f64) * pos_fraction) as usize;
    let mut p = pos.to_vec();
    p.shuffle(rng);
    p.truncate(max_pos);
    let mut q = neg.to_vec();
    q.shuffle(rng);
    q.truncate(batch - p.len());
    p.sort_unstable();
    q.sort_unstable();
    (p, q)
}
