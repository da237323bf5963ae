use std::sync::Arc;

use ddt_core::backbone::FeatureExtractionConfig;
use ddt_core::datasets::{generate_domain_pair, DomainPair, DomainPairSpec, ShiftDescriptor, ShiftPreset};
use ddt_core::detector::{Detector, DetectorConfig};
use ddt_core::diffusion::{Denoiser, DenoiserArch, NoiseSchedule};
use ddt_core::self_training::{
    combined_loss, ema_update, filter_pseudo_labels, Role, SelfTrainingConfig, TeacherMode, TrainData, Trainer,
    TrainerCheckpoint,
};
use ddt_core::{BBox, BoxSet, ParamSet, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ema_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t0 = ParamSet::<f64>::new();
    t0.add("a", Tensor::uniform(&[5, 3], 2.0, &mut rng));
    t0.add("b", Tensor::uniform(&[4], 2.0, &mut rng));
    let mut s = ParamSet::<f64>::new();
    s.add("a", Tensor::uniform(&[5, 3], 2.0, &mut rng));
    s.add("b", Tensor::uniform(&[4], 2.0, &mut rng));
    let alpha: f64 = 0.999;
    let mut t = t0.clone();
    for k in 1..=1000 {
        ema_update(&mut t, &s, alpha).unwrap();
        if [1, 10, 100, 1000].contains(&k) {
            let ak = alpha.powi(k);
            for ((tt, t0t), st) in t.tensors().iter().zip(t0.tensors()).zip(s.tensors()) {
                for ((x, x0), xs) in tt.data().iter().zip(t0t.data()).zip(st.data()) {
                    let want = ak * x0 + (1.0 - ak) * xs;
                    assert!((x - want).abs() < 1e-10, "k={k}: {x} vs {want}");
                }
            }
        }
    }
}

#[test]
fn combined_loss_is_linear_in_unsup() {
    for lambda in [0.0, 0.33, 1.0, 3.0] {
        let f = |u: f64| combined_loss(1.7, u, lambda);
        let (a, b, c) = (f(0.0), f(1.0), f(2.5));
        assert!(((b - a) - lambda).abs() < 1e-12);
        assert!(((c - a) / 2.5 - lambda).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn raising_sigma_never_keeps_more(scores in prop::collection::vec(0.0f64..=1.0, 0..40), s1 in 0.0f64..=1.0, s2 in 0.0f64..=1.0) {
        let n = scores.len();
        let dets = BoxSet::scored(vec![BBox::new(0.0, 0.0, 1.0, 1.0); n], vec![0; n], scores);
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        prop_assert!(filter_pseudo_labels(&dets, hi).len() <= filter_pseudo_labels(&dets, lo).len());
    }
}

fn pair() -> DomainPair {
    let spec = DomainPairSpec {
        train_images: 6,
        val_images: 3,
        image_side: 32,
        objects_per_image: [1, 3],
        object_scale: [0.25, 0.4],
        shift: ShiftDescriptor::preset(ShiftPreset::Default),
        seed: 2,
        ..Default::default()
    };
    generate_domain_pair(&spec).unwrap()
}

fn det_config() -> DetectorConfig {
    DetectorConfig {
        image_side: 32,
        pyramid_widths: [4, 8, 8, 8],
        neck_width: 8,
        roi_size: 3,
        roi_hidden: 16,
        roi_batch: 16,
        rpn_batch: 32,
        roi_canonical_size: 8.0,
        ..Default::default()
    }
}

fn teacher() -> Detector<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = DenoiserArch { stage_channels: [2, 2, 4, 4], image_side: 32, time_embed_dim: 4, t_max: 1000 };
    let den = Arc::new(Denoiser::<f32>::new(arch, &mut rng).unwrap());
    let feats = FeatureExtractionConfig { time_steps: 2, save_steps: 2, ..Default::default() };
    Detector::diffusion(det_config(), den, Arc::new(NoiseSchedule::ddpm_default()), feats, &mut rng).unwrap()
}

fn st_config(mode: TeacherMode) -> SelfTrainingConfig {
    SelfTrainingConfig {
        total_steps: 10,
        batch_size: 2,
        warmup_steps: 2,
        teacher_mode: mode,
        sigma: 0.3,
        eval_interval_fraction: 0.5,
        ..Default::default()
    }
}

fn data(p: &DomainPair) -> TrainData<'_> {
    TrainData { source: &p.source_train, target: &p.target_train, eval: vec![("target_val".into(), &p.target_val)] }
}

#[test]
fn burn_in_equals_source_only_training() {
    let p = pair();
    let arch = Detector::<f32>::plain(det_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let t = teacher();
    let cfg = st_config(TeacherMode::Ddt);
    let mut a = Trainer::new(&arch, Some(&t), data(&p), cfg.clone(), false, 7).unwrap();
    let mut b = Trainer::new(&arch, None, data(&p), cfg.clone(), true, 7).unwrap();
    a.run_until(cfg.burn_in_steps()).unwrap();
    b.run_until(cfg.burn_in_steps()).unwrap();
    assert_eq!(a.state.student, b.state.student);
    assert!(a.state.mean_teacher.is_none());
}

#[test]
fn teachers_stay_frozen_and_modes_pick_final_models() {
    let p = pair();
    let arch = Detector::<f32>::plain(det_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let t = teacher();
    let before = (t.params.checksum(), t.denoiser().unwrap().params.checksum());
    for mode in TeacherMode::ALL {
        let mut tr = Trainer::new(&arch, Some(&t), data(&p), st_config(mode), false, 8).unwrap();
        tr.run().unwrap();
        assert_eq!((t.params.checksum(), t.denoiser().unwrap().params.checksum()), before);
        let mean = tr.state.mean_teacher.as_ref().unwrap();
        assert_ne!(mean, &tr.state.student, "{mode}");
        let want = match mode {
            TeacherMode::Ddt | TeacherMode::NoDiffusionTeacher => mean,
            _ => &tr.state.student,
        };
        assert_eq!(tr.final_params(), want, "{mode}");
        let roles: Vec<Role> = tr.state.metrics.iter().filter(|m| m.step == 10).map(|m| m.role).collect();
        assert_eq!(roles, vec![Role::Student, Role::MeanTeacher, Role::DiffusionTeacher]);
        assert!(tr.state.losses[9].unsup.is_some() && tr.state.losses[5].unsup.is_none());
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let p = pair();
    let arch = Detector::<f32>::plain(det_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let t = teacher();
    let cfg = st_config(TeacherMode::Ddt);
    let mut full = Trainer::new(&arch, Some(&t), data(&p), cfg.clone(), false, 9).unwrap();
    full.run().unwrap();
    let mut part = Trainer::new(&arch, Some(&t), data(&p), cfg, false, 9).unwrap();
    part.run_until(7).unwrap();
    let json = serde_json::to_string(&part.checkpoint()).unwrap();
    let ck: TrainerCheckpoint<f32> = serde_json::from_str(&json).unwrap();
    let mut resumed = Trainer::resume(&arch, Some(&t), data(&p), ck).unwrap();
    resumed.run().unwrap();
    assert_eq!(resumed.state.student, full.state.student);
    assert_eq!(resumed.state.mean_teacher, full.state.mean_teacher);
    assert_eq!(resumed.state.metrics, full.state.metrics);
}

#[test]
fn rejects_mismatched_inputs() {
    let p = pair();
    let arch = Detector::<f32>::plain(det_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!(Trainer::new(&arch, None, data(&p), st_config(TeacherMode::Ddt), false, 1).is_err());
    assert!(Trainer::new(&arch, None, data(&p), st_config(TeacherMode::NoTeacher), false, 1).is_ok());
    let mut other = p.target_val.clone();
    other.dataset.categories[0].name = "disc".into();
    let d = TrainData { source: &p.source_train, target: &p.target_train, eval: vec![("x".into(), &other)] };
    assert!(Trainer::new(&arch, None, d, st_config(TeacherMode::NoTeacher), false, 1).is_err());
}
