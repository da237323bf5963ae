//! Burn-in, pseudo-labeling and mean-teacher self-training.

mod trainer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use trainer::{evaluate, TrainData, Trainer, TrainerCheckpoint, TrainerState, TRAINER_CHECKPOINT_VERSION};

use crate::augmentation::AugmentationPolicy;
use crate::boxes::BoxSet;
use crate::detector::{DetInput, Detector};
use crate::error::{Error, Result};
use crate::evaluation::EvalReport;
use crate::optim::StepSchedule;
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Who labels the target images and which model is kept at the end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    Ddt,
    NoMeanTeacher,
    NoDiffusionTeacher,
    NoTeacher,
}

impl TeacherMode {
    pub const ALL: [TeacherMode; 4] =
        [TeacherMode::Ddt, TeacherMode::NoMeanTeacher, TeacherMode::NoDiffusionTeacher, TeacherMode::NoTeacher];

    pub fn name(self) -> &'static str {
        match self {
            TeacherMode::Ddt => "ddt",
            TeacherMode::NoMeanTeacher => "no_mean_teacher",
            TeacherMode::NoDiffusionTeacher => "no_diffusion_teacher",
            TeacherMode::NoTeacher => "no_teacher",
        }
    }

    pub fn uses_diffusion_teacher(self) -> bool {
        matches!(self, TeacherMode::Ddt | TeacherMode::NoMeanTeacher)
    }

    /// Model reported as the result of a run in this mode.
    pub fn final_role(self) -> Role {
        match self {
            TeacherMode::Ddt | TeacherMode::NoDiffusionTeacher => Role::MeanTeacher,
            TeacherMode::NoMeanTeacher | TeacherMode::NoTeacher => Role::Student,
        }
    }
}

impl fmt::Display for TeacherMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TeacherMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TeacherMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown teacher mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    MeanTeacher,
    DiffusionTeacher,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Student => "student",
            Role::MeanTeacher => "mean_teacher",
            Role::DiffusionTeacher => "diffusion_teacher",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfTrainingConfig {
    /// Pseudo-label score threshold.
    pub sigma: f64,
    /// Weight of the unsupervised loss.
    pub lambda: f64,
    pub ema_alpha: f64,
    pub total_steps: usize,
    pub burn_in_fraction: f64,
    pub teacher_mode: TeacherMode,
    /// Images per step; split evenly between source and target after burn-in.
    pub batch_size: usize,
    /// Learning rate at `reference_batch` images per step.
    pub base_lr: f64,
    pub reference_batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub warmup_ratio: f64,
    /// Fractions of `total_steps` where the learning rate drops tenfold.
    pub lr_milestones: Vec<f64>,
    pub grad_clip: Option<f64>,
    pub eval_interval_fraction: f64,
    /// Detection score floor used for evaluation.
    pub eval_score_floor: f64,
    pub weak: AugmentationPolicy,
    pub strong: AugmentationPolicy,
    pub strong_on_sup: bool,
    pub strong_on_unsup: bool,
}

impl Default for SelfTrainingConfig {
    fn default() -> Self {
        SelfTrainingConfig {
            sigma: 0.5,
            lambda: 1.0,
            ema_alpha: 0.999,
            total_steps: 20000,
            burn_in_fraction: 0.6,
            teacher_mode: TeacherMode::Ddt,
            batch_size: 16,
            base_lr: 0.02,
            reference_batch: 16,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 500,
            warmup_ratio: 0.001,
            lr_milestones: vec![0.8, 0.9],
            grad_clip: None,
            eval_interval_fraction: 0.05,
            eval_score_floor: 0.05,
            weak: AugmentationPolicy::weak(),
            strong: AugmentationPolicy::strong(),
            strong_on_sup: true,
            strong_on_unsup: true,
        }
    }
}

impl SelfTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("self_training: {m}")));
        if !(0.0..=1.0).contains(&self.sigma) {
            return bad(format!("sigma = {} is outside [0, 1]", self.sigma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda = {} must be finite and non-negative", self.lambda));
        }
        if !(0.0..1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha = {} is outside [0, 1)", self.ema_alpha));
        }
        if !(self.burn_in_fraction > 0.0 && self.burn_in_fraction < 1.0) {
            return bad(format!("burn_in_fraction = {} is outside (0, 1)", self.burn_in_fraction));
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.batch_size < 2 || self.reference_batch == 0 {
            return bad("batch_size must be at least 2 and reference_batch positive".into());
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("need base_lr > 0, momentum in [0, 1) and weight_decay >= 0".into());
        }
        if !(self.eval_interval_fraction > 0.0 && self.eval_interval_fraction <= 1.0) {
            return bad("eval_interval_fraction must lie in (0, 1]".into());
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return bad("lr_milestones must lie in [0, 1]".into());
        }
        self.weak.validate()?;
        self.strong.validate()
    }

    pub fn burn_in_steps(&self) -> usize {
        ((self.total_steps as f64) * self.burn_in_fraction).round() as usize
    }

    pub fn eval_interval(&self) -> usize {
        (((self.total_steps as f64) * self.eval_interval_fraction).round() as usize).max(1)
    }

    /// Learning rate scaled linearly from the reference batch size.
    pub fn lr_schedule(&self) -> StepSchedule {
        StepSchedule {
            base_lr: self.base_lr * self.batch_size as f64 / self.reference_batch as f64,
            total_steps: self.total_steps,
            warmup_steps: self.warmup_steps,
            warmup_ratio: self.warmup_ratio,
            milestones: self.lr_milestones.clone(),
            gamma: 0.1,
        }
    }
}

/// Detections with score at least `sigma`.
pub fn filter_pseudo_labels(dets: &BoxSet, sigma: f64) -> BoxSet {
    dets.filter(|i| dets.score(i) >= sigma)
}

/// Teacher detections on a weakly augmented image, thresholded at `sigma`.
/// Scores are kept for diagnostics; the loss ignores them.
pub fn generate_pseudo_labels<T: Scalar>(
    teacher: &Detector<T>,
    params: &ParamSet<T>,
    weak_view: &DetInput<'_, T>,
    sigma: f64,
) -> Result<BoxSet> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Range(format!("sigma {sigma} outside [0, 1]")));
    }
    let dets = teacher.detect_with(params, weak_view, 0.0)?;
    Ok(filter_pseudo_labels(&dets, sigma))
}

/// `mean <- alpha * mean + (1 - alpha) * student`.
pub fn ema_update<T: Scalar>(mean: &mut ParamSet<T>, student: &ParamSet<T>, alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Range(format!("EMA alpha {alpha} outside [0, 1)")));
    }
    mean.ema_from(student, alpha)
}

pub fn combined_loss(l_sup: f64, l_unsup: f64, lambda: f64) -> f64 {
    l_sup + lambda * l_unsup
}

/// One evaluation of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub role: Role,
    pub split: String,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub per_class_ap: BTreeMap<String, Option<f64>>,
}

impl MetricRecord {
    pub fn from_report(step: usize, role: Role, split: &str, report: &EvalReport) -> Self {
        MetricRecord {
            step,
            role,
            split: split.into(),
            map: report.map,
            per_class_ap: report.classes.iter().map(|c| (c.name.clone(), c.ap)).collect(),
        }
    }
}

/// Losses of one optimizer step, each averaged over its half of the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    /// `[rpn_cls, rpn_reg, roi_cls, roi_reg]`.
    pub sup: [f64; 4],
    pub unsup: Option<[f64; 4]>,
    pub total: f64,
    pub pseudo_labels: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::tensor::Tensor;

    #[test]
    fn pseudo_label_threshold() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        let dets = BoxSet::scored(vec![b; 3], vec![0, 1, 2], vec![0.3, 0.6, 0.9]);
        assert_eq!(filter_pseudo_labels(&dets, 0.5).len(), 2);
        assert_eq!(filter_pseudo_labels(&dets, 0.0).len(), 3);
        assert_eq!(filter_pseudo_labels(&dets, 1.0).len(), 0);
    }

    #[test]
    fn ema_examples() {
        let mut t = ParamSet::<f64>::new();
        t.add("w", Tensor::from_vec(&[1], vec![1.0]));
        let mut s = ParamSet::<f64>::new();
        s.add("w", Tensor::from_vec(&[1], vec![0.0]));
        let mut a = t.clone();
        ema_update(&mut a, &s, 0.999).unwrap();
        assert!((a.tensors()[0].data()[0] - 0.999).abs() < 1e-15);
        let mut b = t.clone();
        ema_update(&mut b, &s, 0.0).unwrap();
        assert_eq!(b, s);
        let mut c = t.clone();
        ema_update(&mut c, &t, 0.7).unwrap();
        assert_eq!(c, t);
        assert!(ema_update(&mut c, &t, 1.0).is_err());
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_loss(2.0, 3.0, 1.0), 5.0);
        assert_eq!(combined_loss(2.0, 3.0, 0.0), 2.0);
        assert_eq!(combined_loss(2.0, 0.0, 7.0), 2.0);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = SelfTrainingConfig::default();
        c.validate().unwrap();
        assert_eq!(c.burn_in_steps(), 12000);
        assert_eq!(c.eval_interval(), 1000);
        assert!((c.lr_schedule().lr_at(10_000) - 0.02).abs() < 1e-12);
        for bad in [
            SelfTrainingConfig { sigma: 1.1, ..c.clone() },
            SelfTrainingConfig { ema_alpha: 1.0, ..c.clone() },
            SelfTrainingConfig { burn_in_fraction: 1.0, ..c.clone() },
            SelfTrainingConfig { lambda: -1.0, ..c.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!("no_teacher".parse::<TeacherMode>().unwrap(), TeacherMode::NoTeacher);
        assert!("mean".parse::<TeacherMode>().is_err());
    }
}
