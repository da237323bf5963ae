#![allow(dead_code)]

use std::sync::Arc;

use ddt_core::backbone::FeatureExtractionConfig;
use ddt_core::detector::{DetInput, Detector, DetectorConfig};
use ddt_core::diffusion::{Denoiser, DenoiserArch, NoiseSchedule};
use ddt_core::{BBox, BoxSet, ParamId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const REL_TOL: f64 = 1e-3;

pub fn grad_config() -> DetectorConfig {
    DetectorConfig {
        num_classes: 2,
        image_side: 16,
        pyramid_widths: [2, 2, 2, 2],
        neck_width: 2,
        anchor_sizes: [4.0, 8.0, 12.0, 16.0],
        anchor_ratios: vec![1.0],
        roi_size: 2,
        roi_hidden: 4,
        roi_batch: 8,
        rpn_batch: 16,
        roi_canonical_size: 4.0,
        ..Default::default()
    }
}

pub fn perturb(det: &mut Detector<f64>, rng: &mut ChaCha8Rng, prefix: &str) {
    let ids: Vec<usize> = (0..det.params.len()).filter(|&i| det.params.names()[i].starts_with(prefix)).collect();
    for i in ids {
        for v in det.params.get_mut(ParamId(i)).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
}

/// Central finite differences of every loss term against autodiff, on three
/// weights of every tensor whose name starts with `prefix`.
pub fn check_gradients(det: &mut Detector<f64>, img: &Tensor<f64>, gt: &BoxSet, props: &[BBox], prefix: &str) -> Result<GradCheck, String> {
    let input_id = 3;
    let eval = |d: &Detector<f64>, term: usize| {
        let tape = Tape::inference();
        let p = d.params.bind(&tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let l = d.detection_loss(&p, &DetInput::new(img, input_id), gt, &mut rng, Some(props)).unwrap();
        l.values()[term]
    };
    let mut out = GradCheck { checked: 0, max_rel: 0.0 };
    for term in 0..4 {
        let tape = Tape::new();
        let p = det.params.bind(&tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let l = det.detection_loss(&p, &DetInput::new(img, input_id), gt, &mut rng, Some(props)).map_err(|e| e.to_string())?;
        let v = [l.rpn_cls, l.rpn_reg, l.roi_cls, l.roi_reg][term];
        if v.value().item() <= 0.0 {
            return Err(format!("term {term} is zero, check is vacuous"));
        }
        let mut grads = tape.backward(v);
        let g = p.collect_grads(&mut grads, &det.params);
        let h = 1e-5;
        for pi in 0..det.params.len() {
            if !det.params.names()[pi].starts_with(prefix) {
                continue;
            }
            let n = det.params.get(ParamId(pi)).len();
            for k in [0, n / 2, n - 1] {
                let orig = det.params.get(ParamId(pi)).data()[k];
                det.params.get_mut(ParamId(pi)).data_mut()[k] = orig + h;
                let up = eval(det, term);
                det.params.get_mut(ParamId(pi)).data_mut()[k] = orig - h;
                let down = eval(det, term);
                det.params.get_mut(ParamId(pi)).data_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let ad = g[pi].data()[k];
                let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-4);
                out.max_rel = out.max_rel.max(rel);
                if rel >= REL_TOL {
                    return Err(format!("term {term} {}[{k}]: fd {fd} vs autodiff {ad}", det.params.names()[pi]));
                }
                out.checked += 1;
            }
        }
    }
    Ok(out)
}

pub fn grad_instance(rng: &mut ChaCha8Rng) -> (Tensor<f64>, BoxSet, Vec<BBox>) {
    let img = Tensor::<f64>::uniform(&[3, 16, 16], 1.0, rng);
    let gt = BoxSet::new(vec![BBox::new(2.0, 3.0, 7.0, 6.0), BBox::new(8.0, 7.0, 6.5, 8.0)], vec![0, 1]);
    let props = vec![
        BBox::new(2.5, 3.0, 6.0, 6.5),
        BBox::new(7.5, 6.0, 7.0, 8.5),
        BBox::new(0.0, 0.0, 4.0, 4.0),
        BBox::new(5.0, 1.0, 10.0, 14.0),
    ];
    (img, gt, props)
}

pub fn tiny_denoiser(rng: &mut ChaCha8Rng) -> Arc<Denoiser<f64>> {
    let arch = DenoiserArch { stage_channels: [1, 1, 2, 2], image_side: 16, time_embed_dim: 4, t_max: 1000 };
    let mut den = Denoiser::<f64>::new(arch, rng).unwrap();
    for t in den.params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    Arc::new(den)
}

pub fn tiny_features() -> FeatureExtractionConfig {
    FeatureExtractionConfig { time_steps: 2, save_steps: 2, t_high: 200, ..Default::default() }
}

/// All detection-loss gradients of a plain detector with at most 2000 weights.
pub fn detection_losses() -> Result<GradCheck, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut det = Detector::<f64>::plain(grad_config(), &mut rng).map_err(|e| e.to_string())?;
    if det.num_params() > 2000 {
        return Err(format!("{} params", det.num_params()));
    }
    perturb(&mut det, &mut rng, "");
    let (img, gt, props) = grad_instance(&mut rng);
    check_gradients(&mut det, &img, &gt, &props, "")
}

/// Gradients reaching the bottleneck through the frozen denoiser's taps.
pub fn bottleneck() -> Result<GradCheck, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let den = tiny_denoiser(&mut rng);
    let sched = Arc::new(NoiseSchedule::ddpm_default());
    let mut det = Detector::<f64>::diffusion(grad_config(), den, sched, tiny_features(), &mut rng).map_err(|e| e.to_string())?;
    if det.num_params() > 2000 {
        return Err(format!("{} params", det.num_params()));
    }
    perturb(&mut det, &mut rng, "");
    let (img, gt, props) = grad_instance(&mut rng);
    check_gradients(&mut det, &img, &gt, &props, "bottleneck.")
}
