use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ema_update, generate_pseudo_labels, LossRecord, MetricRecord, Role, SelfTrainingConfig, TeacherMode};
use crate::augmentation::augment;
use crate::autograd::Tape;
use crate::boxes::BoxSet;
use crate::datasets::{mix, ImageSet};
use crate::detector::{DetInput, DetectionLosses, Detector, DetectorCheckpoint, DetectorConfig};
use crate::error::{Error, Result};
use crate::evaluation::{mean_ap, EvalReport};
use crate::image::Image;
use crate::optim::{clip_grad_norm, Sgd};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TRAINER_CHECKPOINT_VERSION: &str = "ddt-trainer/1";

/// mAP@0.5 of `params` (weights for `det`'s architecture) on a labeled set.
pub fn evaluate<T: Scalar>(det: &Detector<T>, params: &ParamSet<T>, set: &ImageSet, score_floor: f64) -> Result<EvalReport> {
    let tensors: Vec<Tensor<T>> = set.images.iter().map(|im| im.to_tensor()).collect();
    let inputs: Vec<DetInput<'_, T>> =
        tensors.iter().zip(&set.dataset.records).map(|(t, r)| DetInput::new(t, r.id)).collect();
    let dets = det.detect_batch(params, &inputs, score_floor)?;
    mean_ap(&dets, &set.dataset.ground_truth(), &set.dataset.category_names(), 0.5)
}

/// Images a run reads. Target labels, if present, are never used.
pub struct TrainData<'a> {
    pub source: &'a ImageSet,
    pub target: &'a ImageSet,
    /// Labeled splits evaluated during training, by name.
    pub eval: Vec<(String, &'a ImageSet)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainerState<T: Scalar> {
    pub seed: u64,
    /// Completed optimizer steps.
    pub step: usize,
    pub student: ParamSet<T>,
    /// Created from the student when self-training starts.
    pub mean_teacher: Option<ParamSet<T>>,
    pub optimizer: Sgd<T>,
    pub diffusion_teacher_checksum: Option<String>,
    pub metrics: Vec<MetricRecord>,
    pub losses: Vec<LossRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainerCheckpoint<T: Scalar> {
    pub version: String,
    pub config: SelfTrainingConfig,
    pub source_only: bool,
    pub student_detector: DetectorConfig,
    pub diffusion_teacher: Option<DetectorCheckpoint<T>>,
    pub state: TrainerState<T>,
}

pub struct Trainer<'a, T: Scalar> {
    pub config: SelfTrainingConfig,
    /// Supervised source training only; no phase 2.
    pub source_only: bool,
    arch: &'a Detector<T>,
    teacher: Option<&'a Detector<T>>,
    data: TrainData<'a>,
    teacher_eval: Option<Vec<MetricRecord>>,
    pub state: TrainerState<T>,
}

fn teacher_checksum<T: Scalar>(t: &Detector<T>) -> String {
    let den = t.denoiser().map(|d| d.params.checksum()).unwrap_or_default();
    format!("{}:{}", t.params.checksum(), den)
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Fresh run. `arch` fixes the student architecture and initial weights;
    /// `teacher` is the frozen diffusion teacher (needed after burn-in in
    /// modes that label with it).
    pub fn new(
        arch: &'a Detector<T>,
        teacher: Option<&'a Detector<T>>,
        data: TrainData<'a>,
        config: SelfTrainingConfig,
        source_only: bool,
        seed: u64,
    ) -> Result<Self> {
        let state = TrainerState {
            seed,
            step: 0,
            student: arch.params.clone(),
            mean_teacher: None,
            optimizer: Sgd::new(&arch.params, config.momentum, config.weight_decay),
            diffusion_teacher_checksum: teacher.map(teacher_checksum),
            metrics: Vec::new(),
            losses: Vec::new(),
        };
        Self::from_state(arch, teacher, data, config, source_only, state)
    }

    /// Continues from a saved or forked state, possibly under another mode.
    pub fn from_state(
        arch: &'a Detector<T>,
        teacher: Option<&'a Detector<T>>,
        data: TrainData<'a>,
        config: SelfTrainingConfig,
        source_only: bool,
        mut state: TrainerState<T>,
    ) -> Result<Self> {
        config.validate()?;
        let names = data.source.dataset.category_names();
        let sets = std::iter::once(("target", data.target)).chain(data.eval.iter().map(|(n, s)| (n.as_str(), *s)));
        for (name, set) in sets {
            if set.dataset.category_names() != names {
                return Err(Error::Dataset(format!("category table of {name} differs from the source")));
            }
        }
        if data.source.is_empty() || data.target.is_empty() && !source_only {
            return Err(Error::Empty("training images".into()));
        }
        if arch.config.num_classes != names.len() {
            return Err(Error::Config(format!(
                "student has {} classes, datasets have {}",
                arch.config.num_classes,
                names.len()
            )));
        }
        if !arch.params.same_layout(&state.student) {
            return Err(Error::Shape("student weights do not match the architecture".into()));
        }
        if !source_only && config.teacher_mode.uses_diffusion_teacher() {
            let t = teacher.ok_or_else(|| Error::Config(format!("mode {} needs a diffusion teacher", config.teacher_mode)))?;
            if t.config.num_classes != names.len() {
                return Err(Error::Config("diffusion teacher class count differs from the datasets".into()));
            }
        }
        if let Some(t) = teacher {
            let sum = teacher_checksum(t);
            match &state.diffusion_teacher_checksum {
                Some(s) if *s != sum => return Err(Error::Checkpoint("diffusion teacher differs from the one this run started with".into())),
                _ => state.diffusion_teacher_checksum = Some(sum),
            }
        }
        state.optimizer.momentum = config.momentum;
        state.optimizer.weight_decay = config.weight_decay;
        Ok(Trainer { config, source_only, arch, teacher, data, teacher_eval: None, state })
    }

    pub fn resume(
        arch: &'a Detector<T>,
        teacher: Option<&'a Detector<T>>,
        data: TrainData<'a>,
        ck: TrainerCheckpoint<T>,
    ) -> Result<Self> {
        if ck.version != TRAINER_CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported trainer checkpoint version {:?}", ck.version)));
        }
        if ck.student_detector != arch.config {
            return Err(Error::Checkpoint("student detector config differs from the checkpoint".into()));
        }
        Self::from_state(arch, teacher, data, ck.config, ck.source_only, ck.state)
    }

    pub fn checkpoint(&self) -> TrainerCheckpoint<T> {
        TrainerCheckpoint {
            version: TRAINER_CHECKPOINT_VERSION.into(),
            config: self.config.clone(),
            source_only: self.source_only,
            student_detector: self.arch.config.clone(),
            diffusion_teacher: self.teacher.map(|t| t.checkpoint()),
            state: self.state.clone(),
        }
    }

    pub fn arch(&self) -> &Detector<T> {
        self.arch
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.total_steps
    }

    pub fn in_self_training(&self, step: usize) -> bool {
        !self.source_only && step >= self.config.burn_in_steps()
    }

    pub fn final_role(&self) -> Role {
        if self.source_only {
            Role::Student
        } else {
            self.config.teacher_mode.final_role()
        }
    }

    pub fn params(&self, role: Role) -> Option<&ParamSet<T>> {
        match role {
            Role::Student => Some(&self.state.student),
            Role::MeanTeacher => self.state.mean_teacher.as_ref(),
            Role::DiffusionTeacher => self.teacher.map(|t| &t.params),
        }
    }

    /// Weights of the model this run reports.
    pub fn final_params(&self) -> &ParamSet<T> {
        self.params(self.final_role()).unwrap_or(&self.state.student)
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.total_steps)
    }

    pub fn run_until(&mut self, step: usize) -> Result<()> {
        while self.state.step < step.min(self.config.total_steps) {
            self.step()?;
        }
        Ok(())
    }

    fn view(&self, img: &Image, boxes: &BoxSet, strong: bool, rng: &mut ChaCha8Rng) -> (Image, BoxSet) {
        let (weak, wb, _) = augment(img, boxes, &self.config.weak, rng);
        if strong {
            let (s, sb, _) = augment(&weak, &wb, &self.config.strong, rng);
            (s, sb)
        } else {
            (weak, wb)
        }
    }

    fn labeler(&self) -> (&Detector<T>, &ParamSet<T>) {
        match self.config.teacher_mode {
            TeacherMode::Ddt | TeacherMode::NoMeanTeacher => {
                let t = self.teacher.expect("checked at construction");
                (t, &t.params)
            }
            TeacherMode::NoDiffusionTeacher => (self.arch, self.state.mean_teacher.as_ref().expect("created at phase-2 entry")),
            TeacherMode::NoTeacher => (self.arch, &self.state.student),
        }
    }

    /// Mean of the per-image losses of `batch` on `p`.
    fn batch_loss<'t>(
        &self,
        p: &crate::params::Bound<'t, T>,
        batch: &[(Tensor<T>, BoxSet, u64)],
        rng: &mut ChaCha8Rng,
    ) -> Result<DetectionLosses<'t, T>> {
        let mut acc: Option<DetectionLosses<'t, T>> = None;
        for (img, gt, id) in batch {
            let l = self.arch.detection_loss(p, &DetInput::new(img, *id), gt, rng, None)?;
            acc = Some(match acc {
                Some(a) => a.add(&l),
                None => l,
            });
        }
        Ok(acc.expect("non-empty batch").scale(1.0 / batch.len() as f64))
    }

    pub fn step(&mut self) -> Result<()> {
        let s = self.state.step;
        if s >= self.config.total_steps {
            return Err(Error::Config(format!("run already finished at step {s}")));
        }
        let at_step = |e: Error| match e {
            Error::NonFinite { what, detail, .. } => Error::NonFinite { what, step: s, detail },
            other => other,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.state.seed, s as u64));
        let phase2 = self.in_self_training(s);
        if phase2 && self.state.mean_teacher.is_none() {
            self.state.mean_teacher = Some(self.state.student.clone());
        }
        let n_tgt = if phase2 { self.config.batch_size / 2 } else { 0 };
        let n_src = self.config.batch_size - n_tgt;

        let mut src = Vec::with_capacity(n_src);
        for _ in 0..n_src {
            let i = rng.gen_range(0..self.data.source.len());
            let r = &self.data.source.dataset.records[i];
            let (img, boxes) = self.view(&self.data.source.images[i], &r.boxes, self.config.strong_on_sup, &mut rng);
            src.push((img.to_tensor::<T>(), boxes, r.id));
        }
        let mut tgt = Vec::with_capacity(n_tgt);
        let mut pseudo = 0;
        for _ in 0..n_tgt {
            let i = rng.gen_range(0..self.data.target.len());
            let id = self.data.target.dataset.records[i].id;
            let (weak, _, _) = augment(&self.data.target.images[i], &BoxSet::default(), &self.config.weak, &mut rng);
            let wt = weak.to_tensor::<T>();
            let (labeler, lp) = self.labeler();
            let labels = generate_pseudo_labels(labeler, lp, &DetInput::new(&wt, id), self.config.sigma)?.without_scores();
            let (img, boxes) = if self.config.strong_on_unsup {
                let (st, sb, _) = augment(&weak, &labels, &self.config.strong, &mut rng);
                (st.to_tensor::<T>(), sb)
            } else {
                (wt, labels)
            };
            pseudo += boxes.len();
            tgt.push((img, boxes, id));
        }

        let tape = Tape::new();
        let p = self.state.student.bind(&tape, true);
        let sup = self.batch_loss(&p, &src, &mut rng).map_err(at_step)?;
        let mut total = sup.total();
        let mut unsup_values = None;
        if !tgt.is_empty() {
            let unsup = self.batch_loss(&p, &tgt, &mut rng).map_err(at_step)?;
            unsup_values = Some(unsup.values());
            total = total.add(unsup.total().scale(self.config.lambda));
        }
        let total_value = total.value().item().as_f64();
        if !total_value.is_finite() {
            return Err(Error::NonFinite { what: "total loss".into(), step: s, detail: format!("{:?}", sup.values()) });
        }
        let mut grads = tape.backward(total);
        let mut g = p.collect_grads(&mut grads, &self.state.student);
        drop(p);
        if let Some(c) = self.config.grad_clip {
            clip_grad_norm(&mut g, c);
        }
        if g.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { what: "gradient".into(), step: s, detail: format!("loss {total_value}") });
        }
        let lr = self.config.lr_schedule().lr_at(s);
        self.state.optimizer.step(&mut self.state.student, &g, lr);
        if phase2 {
            let mean = self.state.mean_teacher.as_mut().expect("created above");
            ema_update(mean, &self.state.student, self.config.ema_alpha)?;
        }
        self.state.losses.push(LossRecord { step: s + 1, lr, sup: sup.values(), unsup: unsup_values, total: total_value, pseudo_labels: pseudo });
        self.state.step = s + 1;
        if self.eval_due(self.state.step) {
            self.evaluate_now()?;
        }
        Ok(())
    }

    fn eval_due(&self, step: usize) -> bool {
        !self.data.eval.is_empty()
            && (step % self.config.eval_interval() == 0 || step == self.config.total_steps || step == self.config.burn_in_steps())
    }

    /// Evaluates every present role on every eval split at the current step.
    pub fn evaluate_now(&mut self) -> Result<Vec<MetricRecord>> {
        let step = self.state.step;
        let floor = self.config.eval_score_floor;
        let mut out = Vec::new();
        for (name, set) in &self.data.eval {
            let r = evaluate(self.arch, &self.state.student, set, floor)?;
            out.push(MetricRecord::from_report(step, Role::Student, name, &r));
            if let Some(m) = &self.state.mean_teacher {
                let r = evaluate(self.arch, m, set, floor)?;
                out.push(MetricRecord::from_report(step, Role::MeanTeacher, name, &r));
            }
        }
        if !self.source_only {
            if let Some(t) = self.teacher {
                if self.teacher_eval.is_none() {
                    let mut recs = Vec::new();
                    for (name, set) in &self.data.eval {
                        let r = evaluate(t, &t.params, set, floor)?;
                        recs.push(MetricRecord::from_report(0, Role::DiffusionTeacher, name, &r));
                    }
                    self.teacher_eval = Some(recs);
                }
                for r in self.teacher_eval.as_ref().expect("filled above") {
                    out.push(MetricRecord { step, ..r.clone() });
                }
            }
        }
        self.state.metrics.extend(out.iter().cloned());
        Ok(out)
    }

    /// Latest logged mAP of `role` on `split`.
    pub fn latest_map(&self, role: Role, split: &str) -> Option<f64> {
        self.state.metrics.iter().rev().find(|m| m.role == role && m.split == split).map(|m| m.map)
    }

    /// Logged mAP of `role` on `split` at exactly `step`.
    pub fn map_at(&self, role: Role, split: &str, step: usize) -> Option<f64> {
        self.state.metrics.iter().find(|m| m.role == role && m.split == split && m.step == step).map(|m| m.map)
    }
}
