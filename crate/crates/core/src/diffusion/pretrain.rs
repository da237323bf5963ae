use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::unet::{Denoiser, DenoiserArch};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, Adam};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub arch: DenoiserArch,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { arch: DenoiserArch::default(), steps: 2000, batch_size: 8, lr: 1e-3, grad_clip: 1.0 }
    }
}

pub struct PretrainOutcome<T: Scalar> {
    pub denoiser: Denoiser<T>,
    /// Noise-prediction MSE at every optimizer step.
    pub curve: Vec<f64>,
}

/// Noise-prediction MSE for a batch `x0: [N, 3, S, S]`.
pub fn denoising_loss<'t, T: Scalar>(
    denoiser: &Denoiser<T>,
    p: &Bound<'t, T>,
    schedule: &NoiseSchedule,
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
) -> Result<Var<'t, T>> {
    let n = x0.dim(0);
    let per = x0.len() / n;
    let mut xt = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        for k in i * per..(i + 1) * per {
            xt.push(a * x0.data()[k] + b * eps.data()[k]);
        }
    }
    let tape = p.tape();
    let xt = tape.constant(Tensor::from_vec(x0.shape(), xt));
    let (eps_hat, _) = denoiser.forward(p, xt, ts)?;
    Ok(eps_hat.mse(eps))
}

/// Trains a fresh denoiser to predict the injected noise on `images`
/// (`[3, S, S]` tensors in `[-1, 1]`).
pub fn pretrain_denoiser<T: Scalar>(
    images: &[Tensor<T>],
    schedule: &NoiseSchedule,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome<T>> {
    if images.is_empty() {
        return Err(Error::Empty("pretraining image pool".into()));
    }
    if schedule.t_max != config.arch.t_max {
        return Err(Error::Config(format!(
            "schedule has {} steps but the denoiser is conditioned on {}",
            schedule.t_max, config.arch.t_max
        )));
    }
    let side = config.arch.image_side;
    if let Some(bad) = images.iter().position(|im| im.shape() != [3, side, side]) {
        return Err(Error::Shape(format!("pool image {bad} is {:?}, expected [3, {side}, {side}]", images[bad].shape())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut denoiser = Denoiser::<T>::new(config.arch.clone(), &mut rng)?;
    let mut opt = Adam::new(&denoiser.params);
    let mut curve = Vec::with_capacity(config.steps);
    let bs = config.batch_size.max(1);
    for step in 0..config.steps {
        let batch: Vec<Tensor<T>> = (0..bs).map(|_| images[rng.gen_range(0..images.len())].clone()).collect();
        let x0 = Tensor::stack(&batch);
        let ts: Vec<usize> = (0..bs).map(|_| rng.gen_range(1..=schedule.t_max)).collect();
        let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
        let tape = Tape::new();
        let p = denoiser.params.bind(&tape, true);
        let loss = denoising_loss(&denoiser, &p, schedule, &x0, &ts, &eps)?;
        let value = loss.value().item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { what: "denoising loss".into(), step, detail: format!("timesteps {ts:?}") });
        }
        curve.push(value);
        let mut grads = tape.backward(loss);
        let mut g = p.collect_grads(&mut grads, &denoiser.params);
        clip_grad_norm(&mut g, config.grad_clip);
        opt.step(&mut denoiser.params, &g, config.lr);
    }
    Ok(PretrainOutcome { denoiser, curve })
}
