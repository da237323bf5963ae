use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ddt_core::backbone::FeatureExtractionConfig;
use ddt_core::datasets::{generate_domain_pair, DomainPair, DomainPairSpec, ImageSet};
use ddt_core::detector::{Detector, DetectorCheckpoint};
use ddt_core::diffusion::{pretrain_denoiser, Denoiser, DenoiserCheckpoint, NoiseSchedule};
use ddt_core::self_training::{Role, SelfTrainingConfig, TeacherMode, TrainData, Trainer, TrainerCheckpoint, TrainerState};
use ddt_core::Tensor;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::plot::{line_chart, Series};
use crate::run::{read_json, sha256_hex, write_atomic, write_json, write_json_compact, write_jsonl, InputHash, RunDir};

pub type Scalar = f32;

pub const TARGET_SPLIT: &str = "target_val";
pub const SOURCE_SPLIT: &str = "source_val";
pub const DATA_FILES: [&str; 4] = ["source_train", "source_val", "target_train", "target_val"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Source-only plain detector.
    Baseline,
    /// Source-only detector on the frozen denoiser's features.
    DiffusionTeacher,
    SelfTraining(TeacherMode),
}

impl TrainMode {
    /// Directory name of the run under the output directory.
    pub fn dir_name(self) -> String {
        match self {
            TrainMode::Baseline => "baseline".into(),
            TrainMode::DiffusionTeacher => "diffusion_teacher".into(),
            TrainMode::SelfTraining(TeacherMode::Ddt) => "ddt".into(),
            TrainMode::SelfTraining(m) => format!("ablation-{}", m.name()),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Baseline => f.write_str("baseline"),
            TrainMode::DiffusionTeacher => f.write_str("diffusion_teacher"),
            TrainMode::SelfTraining(TeacherMode::Ddt) => f.write_str("ddt"),
            TrainMode::SelfTraining(m) => write!(f, "ablation:{}", m.name()),
        }
    }
}

impl FromStr for TrainMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "diffusion_teacher" => Ok(TrainMode::DiffusionTeacher),
            "ddt" => Ok(TrainMode::SelfTraining(TeacherMode::Ddt)),
            _ => match s.strip_prefix("ablation:") {
                Some(m) => Ok(TrainMode::SelfTraining(m.parse().map_err(|e: ddt_core::Error| HarnessError::Config(e.to_string()))?)),
                None => Err(HarnessError::Config(format!(
                    "unknown mode {s:?}; expected baseline, diffusion_teacher, ddt or ablation:<teacher mode>"
                ))),
            },
        }
    }
}

/// Headline numbers of one finished run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub steps: usize,
    pub final_role: Role,
    /// Target validation mAP of the final model.
    pub target_map: f64,
    pub source_map: Option<f64>,
    pub student_target_map: Option<f64>,
    pub mean_teacher_target_map: Option<f64>,
    pub diffusion_teacher_target_map: Option<f64>,
    /// Student target mAP when self-training started.
    pub burn_in_target_map: Option<f64>,
    pub forked_from_baseline: bool,
    pub denoiser_checksum: Option<[String; 2]>,
    pub diffusion_teacher_checksum: Option<[String; 2]>,
}

#[derive(Serialize, Deserialize)]
struct BurnInSnapshot {
    key: String,
    state: TrainerState<Scalar>,
}

pub struct Frozen {
    pub denoiser: Arc<Denoiser<Scalar>>,
    pub schedule: Arc<NoiseSchedule>,
}

/// One experiment: an output directory plus the resolved configuration.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub dir: RunDir,
    /// Checkpoint and stop once a run reaches this step.
    pub stop_after: Option<usize>,
}

impl Experiment {
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dir = RunDir::open(&config.resolved_output_dir())?;
        write_atomic(&dir.join("config.toml"), config.to_toml()?.as_bytes())?;
        Ok(Experiment { config, dir, stop_after: None })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.config.data.dir.clone().unwrap_or_else(|| self.dir.join("data"))
    }

    /// Loads the four splits, generating them from the spec on first use.
    pub fn data(&self) -> Result<DomainPair> {
        let dir = self.data_dir();
        if self.config.data.dir.is_none() {
            let spec_file = dir.join("spec.json");
            if spec_file.exists() {
                let on_disk: DomainPairSpec = read_json(&spec_file)?;
                if on_disk != self.config.data.spec {
                    return Err(HarnessError::Config(format!(
                        "{} was generated from a different data.spec; remove it or point data.dir elsewhere",
                        dir.display()
                    )));
                }
            } else {
                info!("generating datasets into {}", dir.display());
                let pair = generate_domain_pair(&self.config.data.spec)?;
                pair.save(&dir)?;
                write_json(&spec_file, &self.config.data.spec)?;
            }
        }
        load_pair(&dir)
    }

    pub fn denoiser_path(&self) -> PathBuf {
        self.config.diffusion.checkpoint.clone().unwrap_or_else(|| self.dir.join("denoiser.json"))
    }

    /// Loads the pretrained denoiser, pretraining it on the unlabeled train
    /// splits when no checkpoint exists yet.
    pub fn denoiser(&self, data: &DomainPair) -> Result<Frozen> {
        let path = self.denoiser_path();
        if !path.exists() {
            if self.config.diffusion.checkpoint.is_some() {
                return Err(HarnessError::Missing(path.display().to_string()));
            }
            self.pretrain(data, &path)?;
        }
        let (den, sched) = DenoiserCheckpoint::<Scalar>::load(&path)?.restore()?;
        if den.arch().image_side != self.config.detector.image_side {
            return Err(HarnessError::Config(format!(
                "denoiser at {} is for {}px images, detector.image_side = {}",
                path.display(),
                den.arch().image_side,
                self.config.detector.image_side
            )));
        }
        Ok(Frozen { denoiser: Arc::new(den), schedule: Arc::new(sched) })
    }

    pub fn pretrain(&self, data: &DomainPair, out: &Path) -> Result<Vec<f64>> {
        let d = &self.config.diffusion;
        let schedule = NoiseSchedule::linear(d.pretrain.arch.t_max, d.beta_start, d.beta_end)?;
        let pool: Vec<Tensor<Scalar>> =
            data.source_train.images.iter().chain(&data.target_train.images).map(|im| im.to_tensor()).collect();
        info!("pretraining denoiser for {} steps on {} images", d.pretrain.steps, pool.len());
        let outcome = pretrain_denoiser(&pool, &schedule, &d.pretrain, d.pretrain_seed)?;
        DenoiserCheckpoint::new(&outcome.denoiser, &schedule).save(out)?;
        let curve: Vec<(f64, f64)> = outcome.curve.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect();
        let top = curve.iter().map(|p| p.1).fold(0.0, f64::max);
        line_chart(&out.with_extension("loss"), "denoiser pretraining", "step", "noise MSE", &[Series::new("loss", curve)], (0.0, top.max(1e-6)))?;
        Ok(outcome.curve)
    }

    fn teacher_run_name(&self, features: &FeatureExtractionConfig) -> String {
        if *features == self.config.features {
            "diffusion_teacher".into()
        } else {
            format!("diffusion_teacher-t{}-s{}-h{}", features.time_steps, features.save_steps, features.t_high)
        }
    }

    /// The frozen diffusion teacher, trained source-only on first use.
    pub fn teacher(&self, data: &DomainPair, frozen: &Frozen, features: &FeatureExtractionConfig) -> Result<Detector<Scalar>> {
        let restore = |path: &Path| -> Result<Detector<Scalar>> {
            let ck: DetectorCheckpoint<Scalar> = read_json(path)?;
            if ck.features.as_ref() != Some(features) {
                return Err(HarnessError::Config(format!("teacher at {} uses other feature settings", path.display())));
            }
            Ok(Detector::from_checkpoint(ck, Some((frozen.denoiser.clone(), frozen.schedule.clone())))?)
        };
        if let Some(p) = &self.config.teacher_training.checkpoint {
            if *features == self.config.features {
                if !p.exists() {
                    return Err(HarnessError::Missing(p.display().to_string()));
                }
                return restore(p);
            }
        }
        let name = self.teacher_run_name(features);
        let path = self.dir.join(&name).join("detector.json");
        if path.exists() {
            return restore(&path);
        }
        let tt = &self.config.teacher_training;
        let arch = Detector::diffusion(
            self.config.detector.clone(),
            frozen.denoiser.clone(),
            frozen.schedule.clone(),
            features.clone(),
            &mut ChaCha8Rng::seed_from_u64(tt.seed),
        )?;
        let cfg = tt.apply(&self.config.self_training);
        let (params, _) = self.run_trainer(&name, TrainMode::DiffusionTeacher, data, &arch, None, cfg, tt.seed, None)?;
        let teacher = arch.with_params(params)?;
        Ok(teacher)
    }

    /// Trains `mode` and returns its summary. Finished runs are not redone;
    /// interrupted ones resume from their last checkpoint.
    pub fn train(&self, mode: TrainMode) -> Result<RunSummary> {
        self.train_with(mode, &mode.dir_name(), &self.config.self_training, &self.config.features)
    }

    /// Like [`Experiment::train`] with overridden self-training and feature
    /// settings, under `run_name`.
    pub fn train_with(
        &self,
        mode: TrainMode,
        run_name: &str,
        st: &SelfTrainingConfig,
        features: &FeatureExtractionConfig,
    ) -> Result<RunSummary> {
        let data = self.data()?;
        match mode {
            TrainMode::Baseline => {
                let arch = self.student_arch()?;
                let (_, summary) = self.run_trainer(run_name, mode, &data, &arch, None, st.clone(), self.config.seed, None)?;
                Ok(summary)
            }
            TrainMode::DiffusionTeacher => {
                let frozen = self.denoiser(&data)?;
                self.teacher(&data, &frozen, features)?;
                read_json(&self.dir.join(self.teacher_run_name(features)).join("summary.json"))
            }
            TrainMode::SelfTraining(teacher_mode) => {
                let cfg = SelfTrainingConfig { teacher_mode, ..st.clone() };
                let arch = self.student_arch()?;
                let (frozen, teacher) = if teacher_mode.uses_diffusion_teacher() {
                    let frozen = self.denoiser(&data)?;
                    let t = self.teacher(&data, &frozen, features)?;
                    (Some(frozen), Some(t))
                } else {
                    (None, None)
                };
                let fork = self.baseline_fork(&cfg)?;
                let (_, summary) =
                    self.run_trainer(run_name, mode, &data, &arch, teacher.as_ref(), cfg, self.config.seed, fork)?;
                drop(frozen);
                Ok(summary)
            }
        }
    }

    pub fn student_arch(&self) -> Result<Detector<Scalar>> {
        Ok(Detector::plain(self.config.detector.clone(), &mut ChaCha8Rng::seed_from_u64(self.config.seed))?)
    }

    /// Identifies the burn-in trajectory: everything that can influence the
    /// student before self-training starts.
    fn burn_in_key(&self, st: &SelfTrainingConfig) -> String {
        let neutral = SelfTrainingConfig {
            sigma: 0.0,
            lambda: 0.0,
            ema_alpha: 0.0,
            teacher_mode: TeacherMode::Ddt,
            strong_on_unsup: false,
            ..st.clone()
        };
        let key = serde_json::json!({
            "seed": self.config.seed,
            "data": self.config.data,
            "detector": self.config.detector,
            "self_training": neutral,
        });
        sha256_hex(key.to_string().as_bytes())
    }

    fn baseline_fork(&self, st: &SelfTrainingConfig) -> Result<Option<TrainerState<Scalar>>> {
        let path = self.dir.join("baseline").join("burn_in.json");
        if !path.exists() {
            return Ok(None);
        }
        let snap: BurnInSnapshot = read_json(&path)?;
        Ok((snap.key == self.burn_in_key(st)).then_some(snap.state))
    }

    /// Checkpoints land on every evaluation step, and on the burn-in step.
    fn next_stop(&self, st: &SelfTrainingConfig, step: usize) -> usize {
        let iv = st.eval_interval();
        let mut next = (step / iv + 1) * iv;
        let b = st.burn_in_steps();
        if step < b && b < next {
            next = b;
        }
        next.min(st.total_steps)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_trainer(
        &self,
        name: &str,
        mode: TrainMode,
        data: &DomainPair,
        arch: &Detector<Scalar>,
        teacher: Option<&Detector<Scalar>>,
        cfg: SelfTrainingConfig,
        seed: u64,
        fork: Option<TrainerState<Scalar>>,
    ) -> Result<(ddt_core::ParamSet<Scalar>, RunSummary)> {
        let run = self.dir.subdir(name)?;
        let ck_path = run.join("trainer.json");
        let source_only = !matches!(mode, TrainMode::SelfTraining(_));
        let train_data = || TrainData {
            source: &data.source_train,
            target: &data.target_train,
            eval: vec![(TARGET_SPLIT.to_string(), &data.target_val), (SOURCE_SPLIT.to_string(), &data.source_val)],
        };
        let den_before = teacher.and_then(|t| t.denoiser()).map(|d| d.params.checksum());
        let teacher_before = teacher.map(|t| t.params.checksum());
        let mut forked = false;
        let mut trainer = if ck_path.exists() {
            let ck: TrainerCheckpoint<Scalar> = read_json(&ck_path)?;
            if ck.config != cfg || ck.state.seed != seed || ck.source_only != source_only {
                return Err(HarnessError::Config(format!(
                    "{} holds a run with other settings; remove it to start over",
                    run.display()
                )));
            }
            info!("{name}: resuming at step {}", ck.state.step);
            Trainer::resume(arch, teacher, train_data(), ck)?
        } else if let Some(state) = fork {
            info!("{name}: starting from the baseline at step {}", state.step);
            forked = true;
            Trainer::from_state(arch, teacher, train_data(), cfg, source_only, state)?
        } else {
            Trainer::new(arch, teacher, train_data(), cfg, source_only, seed)?
        };
        if forked {
            write_atomic(&run.join("forked_from_baseline"), b"")?;
        }
        forked |= run.join("forked_from_baseline").exists();
        let burn_in = trainer.config.burn_in_steps();
        while !trainer.is_done() {
            let stop = self.next_stop(&trainer.config, trainer.state.step);
            trainer.run_until(stop)?;
            let st = &trainer.state;
            let target = trainer.latest_map(trainer.final_role(), TARGET_SPLIT);
            info!("{name}: step {}/{} target mAP {:.4}", st.step, trainer.config.total_steps, target.unwrap_or(f64::NAN));
            write_json_compact(&ck_path, &trainer.checkpoint())?;
            write_jsonl(&run.join("metrics.jsonl"), &st.metrics)?;
            write_jsonl(&run.join("losses.jsonl"), &st.losses)?;
            if mode == TrainMode::Baseline && st.step == burn_in {
                let snap = BurnInSnapshot { key: self.burn_in_key(&trainer.config), state: st.clone() };
                write_json_compact(&run.join("burn_in.json"), &snap)?;
            }
            if self.stop_after.is_some_and(|s| st.step >= s) && !trainer.is_done() {
                return Err(HarnessError::Stopped { run: name.to_string(), step: st.step });
            }
        }
        write_jsonl(&run.join("metrics.jsonl"), &trainer.state.metrics)?;
        write_jsonl(&run.join("losses.jsonl"), &trainer.state.losses)?;
        let final_params = trainer.final_params().clone();
        write_json_compact(&run.join("detector.json"), &arch.with_params(final_params.clone())?.checkpoint())?;
        self.plot_curves(&run, &trainer)?;

        let role = trainer.final_role();
        let after = |r: Role, split: &str| trainer.latest_map(r, split);
        let summary = RunSummary {
            mode: mode.to_string(),
            seed,
            steps: trainer.state.step,
            final_role: role,
            target_map: after(role, TARGET_SPLIT).ok_or_else(|| HarnessError::Missing("final evaluation".into()))?,
            source_map: after(role, SOURCE_SPLIT),
            student_target_map: after(Role::Student, TARGET_SPLIT),
            mean_teacher_target_map: after(Role::MeanTeacher, TARGET_SPLIT),
            diffusion_teacher_target_map: after(Role::DiffusionTeacher, TARGET_SPLIT),
            burn_in_target_map: if source_only { None } else { trainer.map_at(Role::Student, TARGET_SPLIT, burn_in) },
            forked_from_baseline: forked,
            denoiser_checksum: den_before
                .zip(teacher.and_then(|t| t.denoiser()).map(|d| d.params.checksum()))
                .map(|(a, b)| [a, b]),
            diffusion_teacher_checksum: teacher_before.zip(teacher.map(|t| t.params.checksum())).map(|(a, b)| [a, b]),
        };
        write_json(&run.join("summary.json"), &summary)?;
        self.record_inputs(name, teacher.is_some() || arch.denoiser().is_some())?;
        Ok((final_params, summary))
    }

    fn plot_curves(&self, run: &Path, trainer: &Trainer<'_, Scalar>) -> Result<()> {
        for split in [TARGET_SPLIT, SOURCE_SPLIT] {
            let series: Vec<Series> = [Role::Student, Role::MeanTeacher, Role::DiffusionTeacher]
                .into_iter()
                .map(|role| {
                    let pts = trainer
                        .state
                        .metrics
                        .iter()
                        .filter(|m| m.role == role && m.split == split)
                        .map(|m| (m.step as f64, m.map))
                        .collect();
                    Series::new(role.name(), pts)
                })
                .filter(|s| !s.points.is_empty())
                .collect();
            line_chart(&run.join(format!("curve_{split}")), &format!("mAP@0.5 on {split}"), "step", "mAP", &series, (0.0, 1.0))?;
        }
        Ok(())
    }

    /// Writes `<run>/inputs.sha256`: resolved config, dataset files and
    /// frozen models the run read.
    fn record_inputs(&self, name: &str, with_diffusion: bool) -> Result<()> {
        let mut h = InputHash::default();
        h.bytes("config.toml", self.config.to_toml()?.as_bytes());
        let data = self.data_dir();
        let mut files = Vec::new();
        collect_files(&data, &mut files)?;
        files.sort();
        for f in files {
            let rel = f.strip_prefix(&data).unwrap_or(&f).display().to_string();
            h.file(&format!("data/{rel}"), &f)?;
        }
        if with_diffusion {
            h.file("denoiser.json", &self.denoiser_path())?;
        }
        write_atomic(&self.dir.join(name).join("inputs.sha256"), h.manifest().as_bytes())
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))? {
        let p = entry.map_err(|e| HarnessError::io(dir, e))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Reads the four split files written by [`DomainPair::save`].
pub fn load_pair(dir: &Path) -> Result<DomainPair> {
    let load = |name: &str| -> Result<ImageSet> {
        let p = dir.join(format!("{name}.json"));
        if !p.exists() {
            return Err(HarnessError::Missing(p.display().to_string()));
        }
        Ok(ImageSet::load(&p)?)
    };
    Ok(DomainPair {
        source_train: load(DATA_FILES[0])?,
        source_val: load(DATA_FILES[1])?,
        target_train: load(DATA_FILES[2])?,
        target_val: load(DATA_FILES[3])?,
    })
}
