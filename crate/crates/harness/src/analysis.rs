use std::path::Path;
use std::sync::Arc;

use ddt_core::datasets::ImageSet;
use ddt_core::detector::{BackboneKind, DetInput, Detector, DetectorCheckpoint};
use ddt_core::diffusion::DenoiserCheckpoint;
use ddt_core::evaluation::{average_precision, mean_ap, pr_curve, EvalReport};
use ddt_core::{BoxSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::pipeline::Scalar;
use crate::plot::{line_chart, Series};
use crate::run::{read_json, write_atomic, write_json};

pub const IOU_THRESHOLD: f64 = 0.5;

/// Restores a detector checkpoint. Diffusion detectors also need the
/// denoiser checkpoint they were trained on.
pub fn load_detector(ckpt: &Path, denoiser: Option<&Path>) -> Result<Detector<Scalar>> {
    if !ckpt.exists() {
        return Err(HarnessError::Missing(ckpt.display().to_string()));
    }
    let ck: DetectorCheckpoint<Scalar> = read_json(ckpt)?;
    let frozen = match (ck.kind, denoiser) {
        (BackboneKind::Plain, _) => None,
        (BackboneKind::Diffusion, Some(p)) => {
            if !p.exists() {
                return Err(HarnessError::Missing(p.display().to_string()));
            }
            let (d, s) = DenoiserCheckpoint::<Scalar>::load(p)?.restore()?;
            Some((Arc::new(d), Arc::new(s)))
        }
        (BackboneKind::Diffusion, None) => {
            return Err(HarnessError::Missing(format!("denoiser checkpoint for {}", ckpt.display())))
        }
    };
    Ok(Detector::from_checkpoint(ck, frozen)?)
}

pub fn load_labeled(dataset: &Path) -> Result<ImageSet> {
    if !dataset.exists() {
        return Err(HarnessError::Missing(dataset.display().to_string()));
    }
    let set = ImageSet::load(dataset)?;
    if set.dataset.total_boxes() == 0 {
        return Err(HarnessError::Config(format!("{} carries no annotations", dataset.display())));
    }
    Ok(set)
}

pub fn detect_all(det: &Detector<Scalar>, set: &ImageSet, score_floor: f64) -> Result<Vec<BoxSet>> {
    let tensors: Vec<Tensor<Scalar>> = set.images.iter().map(|im| im.to_tensor()).collect();
    let inputs: Vec<DetInput<'_, Scalar>> =
        tensors.iter().zip(&set.dataset.records).map(|(t, r)| DetInput::new(t, r.id)).collect();
    Ok(det.detect_batch(&det.params, &inputs, score_floor)?)
}

/// Writes the report as `out_json` plus a per-class CSV next to it.
pub fn eval(det: &Detector<Scalar>, set: &ImageSet, score_floor: f64, out_json: &Path) -> Result<EvalReport> {
    let dets = detect_all(det, set, score_floor)?;
    let report = mean_ap(&dets, &set.dataset.ground_truth(), &set.dataset.category_names(), IOU_THRESHOLD)?;
    write_atomic(out_json, report.to_json()?.as_bytes())?;
    write_atomic(&out_json.with_extension("csv"), report.to_csv().as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class: String,
    pub ap: Option<f64>,
    /// `(recall, precision)` after each ranked detection.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorAnalysis {
    pub report: EvalReport,
    pub pr_curves: Vec<PrCurve>,
}

pub fn analyze(dets: &[BoxSet], set: &ImageSet) -> Result<ErrorAnalysis> {
    let gts = set.dataset.ground_truth();
    let names = set.dataset.category_names();
    let report = mean_ap(dets, &gts, &names, IOU_THRESHOLD)?;
    let pr_curves = names
        .iter()
        .enumerate()
        .map(|(k, n)| PrCurve {
            class: n.clone(),
            ap: average_precision(dets, &gts, k, IOU_THRESHOLD),
            points: pr_curve(dets, &gts, k, IOU_THRESHOLD),
        })
        .collect();
    Ok(ErrorAnalysis { report, pr_curves })
}

/// `gt\pred` table over the categories plus `background`.
pub fn confusion_csv(report: &EvalReport, names: &[String]) -> String {
    let mut labels: Vec<&str> = names.iter().map(String::as_str).collect();
    labels.push("background");
    let mut s = format!("gt\\pred,{}\n", labels.join(","));
    for (i, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        s.push_str(&format!("{},{}\n", labels[i], cells.join(",")));
    }
    s
}

/// Writes `out_json` (report, taxonomy, confusion, PR points) and, next to
/// it, `<stem>_confusion.csv`, `<stem>_taxonomy.csv` and the PR-curve plot.
pub fn analyze_errors(det: &Detector<Scalar>, set: &ImageSet, score_floor: f64, out_json: &Path) -> Result<ErrorAnalysis> {
    let dets = detect_all(det, set, score_floor)?;
    let analysis = analyze(&dets, set)?;
    write_json(out_json, &analysis)?;
    let stem = out_json.with_extension("");
    let sibling = |suffix: &str| {
        let mut p = stem.as_os_str().to_owned();
        p.push(suffix);
        std::path::PathBuf::from(p)
    };
    let names = set.dataset.category_names();
    write_atomic(&sibling("_confusion.csv"), confusion_csv(&analysis.report, &names).as_bytes())?;
    let t = &analysis.report.taxonomy;
    let tax = format!(
        "kind,count\ncorrect,{}\nlocalization,{}\nclass_confusion,{}\nbackground_fp,{}\nduplicate,{}\nmissed_gt,{}\n",
        t.correct, t.localization, t.class_confusion, t.background_fp, t.duplicate, t.missed_gt
    );
    write_atomic(&sibling("_taxonomy.csv"), tax.as_bytes())?;
    let series: Vec<Series> = analysis.pr_curves.iter().map(|c| Series::new(c.class.clone(), c.points.clone())).collect();
    line_chart(&sibling("_pr"), "precision-recall at IoU 0.5", "recall", "precision", &series, (0.0, 1.0))?;
    Ok(analysis)
}
