//! Detection metrics: AP at an IoU threshold, mAP with an error taxonomy and
//! confusion matrix, and the relative cross-domain score.

use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, BoxSet};
use crate::error::{Error, Result};

/// IoU of two non-degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::Range(format!("degenerate box {bx:?}")));
        }
    }
    Ok(a.iou(b))
}

/// `100 * cross / oracle`.
pub fn relative_cross_domain(cross_map: f64, oracle_map: f64) -> Result<f64> {
    if !(oracle_map > 0.0) {
        return Err(Error::Range(format!("oracle mAP must be positive, got {oracle_map}")));
    }
    Ok(100.0 * cross_map / oracle_map)
}

/// Detections of one class across all images, sorted by descending score
/// (ties broken by image then detection index), each flagged true positive
/// or not.
struct ClassMatch {
    hits: Vec<bool>,
    num_gt: usize,
}

fn ranked(dets: &[BoxSet], class: usize) -> Vec<(usize, usize, f64)> {
    let mut order: Vec<(usize, usize, f64)> = dets
        .iter()
        .enumerate()
        .flat_map(|(im, d)| (0..d.len()).filter(move |&i| d.labels[i] == class).map(move |i| (im, i, d.score(i))))
        .collect();
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    order
}

fn match_class(dets: &[BoxSet], gts: &[BoxSet], class: usize, thr: f64) -> ClassMatch {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = gts.iter().map(|g| g.labels.iter().filter(|&&l| l == class).count()).sum();
    let hits = ranked(dets, class)
        .into_iter()
        .map(|(im, i, _)| {
            let b = &dets[im].boxes[i];
            let g = &gts[im];
            let mut best: Option<(usize, f64)> = None;
            for j in 0..g.len() {
                if g.labels[j] != class || taken[im][j] {
                    continue;
                }
                let o = b.iou(&g.boxes[j]);
                if o >= thr && best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                taken[im][j] = true;
                true
            } else {
                false
            }
        })
        .collect();
    ClassMatch { hits, num_gt }
}

/// `(recall, precision)` after each ranked detection of `class`.
pub fn pr_curve(dets: &[BoxSet], gts: &[BoxSet], class: usize, iou_thr: f64) -> Vec<(f64, f64)> {
    let m = match_class(dets, gts, class, iou_thr);
    let mut tp = 0usize;
    m.hits
        .iter()
        .enumerate()
        .map(|(k, &hit)| {
            tp += hit as usize;
            let recall = if m.num_gt == 0 { 0.0 } else { tp as f64 / m.num_gt as f64 };
            (recall, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// All-point interpolated AP of `class` over a collection of images.
/// `None` when the class has neither ground truth nor detections.
pub fn average_precision(dets: &[BoxSet], gts: &[BoxSet], class: usize, iou_thr: f64) -> Option<f64> {
    let m = match_class(dets, gts, class, iou_thr);
    if m.num_gt == 0 {
        return if m.hits.is_empty() { None } else { Some(0.0) };
    }
    let curve = pr_curve(dets, gts, class, iou_thr);
    let mut ap = 0.0;
    let mut best_after = 0.0f64;
    for k in (0..curve.len()).rev() {
        let (r, p) = curve[k];
        let r_before = if k == 0 { 0.0 } else { curve[k - 1].0 };
        best_after = best_after.max(p);
        ap += (r - r_before) * best_after;
    }
    Some(ap)
}

/// Fate of every detection and ground-truth box.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub correct: usize,
    pub localization: usize,
    pub class_confusion: usize,
    pub background_fp: usize,
    pub duplicate: usize,
    pub missed_gt: usize,
}

impl Taxonomy {
    pub fn detections(&self) -> usize {
        self.correct + self.localization + self.class_confusion + self.background_fp + self.duplicate
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    /// Absent classes (no ground truth, no detections) carry `None`.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub map: f64,
    pub classes: Vec<ClassReport>,
    pub num_images: usize,
    pub num_detections: usize,
    pub num_gt: usize,
    pub matched: usize,
    pub unmatched_detections: usize,
    pub unmatched_gt: usize,
    pub taxonomy: Taxonomy,
    /// `(K + 1) x (K + 1)`. Row = ground-truth class, with row `K` for
    /// detections explained by no ground truth (background, localization,
    /// duplicate). Column = predicted class, with column `K` for missed
    /// ground truth.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `class,ap,num_gt,num_det` rows followed by the mAP row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap,num_gt,num_det\n");
        for c in &self.classes {
            let ap = c.ap.map_or(String::new(), |v| format!("{v:.6}"));
            s.push_str(&format!("{},{},{},{}\n", c.name, ap, c.num_gt, c.num_det));
        }
        s.push_str(&format!("mAP,{:.6},{},{}\n", self.map, self.num_gt, self.num_detections));
        s
    }
}

pub const LOCALIZATION_IOU: f64 = 0.1;

/// Full report over paired per-image detections and ground truth.
pub fn mean_ap(dets: &[BoxSet], gts: &[BoxSet], categories: &[String], iou_thr: f64) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!("{} detection sets for {} images", dets.len(), gts.len())));
    }
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::Range(format!("IoU threshold {iou_thr} outside (0, 1]")));
    }
    let k = categories.len();
    for (im, set) in dets.iter().chain(gts).enumerate() {
        if let Some(&l) = set.labels.iter().find(|&&l| l >= k) {
            return Err(Error::Range(format!("set {im} uses label {l} but only {k} categories exist")));
        }
    }

    let mut classes = Vec::with_capacity(k);
    let mut present = Vec::new();
    for (c, name) in categories.iter().enumerate() {
        let ap = average_precision(dets, gts, c, iou_thr);
        if let Some(v) = ap {
            present.push(v);
        }
        classes.push(ClassReport {
            name: name.clone(),
            ap,
            num_gt: gts.iter().map(|g| g.labels.iter().filter(|&&l| l == c).count()).sum(),
            num_det: dets.iter().map(|d| d.labels.iter().filter(|&&l| l == c).count()).sum(),
        });
    }
    let map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };

    let mut tax = Taxonomy::default();
    let mut confusion = vec![vec![0usize; k + 1]; k + 1];
    for (d, g) in dets.iter().zip(gts) {
        let mut taken = vec![false; g.len()];
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d.score(b).total_cmp(&d.score(a)).then(a.cmp(&b)));
        let mut fates = vec![Fate::Background; d.len()];
        for &i in &order {
            let c = d.labels[i];
            let b = &d.boxes[i];
            let mut best: Option<(usize, f64)> = None;
            for j in 0..g.len() {
                if g.labels[j] == c && !taken[j] {
                    let o = b.iou(&g.boxes[j]);
                    if o >= iou_thr && best.map_or(true, |(_, bo)| o > bo) {
                        best = Some((j, o));
                    }
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                fates[i] = Fate::Correct;
            }
        }
        for (i, fate) in fates.iter_mut().enumerate() {
            if *fate == Fate::Correct {
                continue;
            }
            let c = d.labels[i];
            let b = &d.boxes[i];
            let same = (0..g.len()).filter(|&j| g.labels[j] == c).map(|j| b.iou(&g.boxes[j])).fold(0.0, f64::max);
            let other = (0..g.len())
                .filter(|&j| g.labels[j] != c)
                .map(|j| (b.iou(&g.boxes[j]), j))
                .fold((0.0, usize::MAX), |acc, x| if x.0 > acc.0 { x } else { acc });
            *fate = if same >= iou_thr {
                Fate::Duplicate
            } else if same >= LOCALIZATION_IOU {
                Fate::Localization
            } else if other.0 >= iou_thr {
                Fate::Confused(g.labels[other.1])
            } else {
                Fate::Background
            };
        }
        for (i, fate) in fates.into_iter().enumerate() {
            let c = d.labels[i];
            match fate {
                Fate::Correct => {
                    tax.correct += 1;
                    confusion[c][c] += 1;
                }
                Fate::Confused(gc) => {
                    tax.class_confusion += 1;
                    confusion[gc][c] += 1;
                }
                Fate::Duplicate => {
                    tax.duplicate += 1;
                    confusion[k][c] += 1;
                }
                Fate::Localization => {
                    tax.localization += 1;
                    confusion[k][c] += 1;
                }
                Fate::Background => {
                    tax.background_fp += 1;
                    confusion[k][c] += 1;
                }
            }
        }
        for (j, &t) in taken.iter().enumerate() {
            if !t {
                tax.missed_gt += 1;
                confusion[g.labels[j]][k] += 1;
            }
        }
    }
    let num_detections = dets.iter().map(BoxSet::len).sum();
    let num_gt = gts.iter().map(BoxSet::len).sum();
    Ok(EvalReport {
        iou_threshold: iou_thr,
        map,
        classes,
        num_images: gts.len(),
        num_detections,
        num_gt,
        matched: tax.correct,
        unmatched_detections: num_detections - tax.correct,
        unmatched_gt: tax.missed_gt,
        taxonomy: tax,
        confusion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fate {
    Correct,
    Duplicate,
    Localization,
    Confused(usize),
    Background,
}
