#![allow(dead_code)]

use ddt_core::diffusion::{forward_diffuse, NoiseSchedule};
use ddt_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LEVELS: [usize; 4] = [1, 250, 500, 999];

/// Monte-Carlo mean and variance of `x_t` for four pixel values, against
/// `sqrt(alpha_bar) x0` and `1 - alpha_bar`, within three standard errors.
pub fn check_forward_moments(draws: usize, seed: u64) -> Result<(), String> {
    let s = NoiseSchedule::ddpm_default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::<f64>::from_vec(&[4], vec![-1.0, -0.3, 0.2, 0.9]);
    let n = draws as f64;
    for t in LEVELS {
        let ab = s.alpha_bar(t).map_err(|e| e.to_string())?;
        let (mut sum, mut sq) = ([0.0; 4], [0.0; 4]);
        for _ in 0..draws {
            let eps = Tensor::randn(&[4], 1.0, &mut rng);
            let xt = forward_diffuse(&x0, t, &eps, &s).map_err(|e| e.to_string())?;
            for (i, &v) in xt.data().iter().enumerate() {
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..4 {
            let mean = sum[i] / n;
            let var = sq[i] / n - mean * mean;
            let want_mean = ab.sqrt() * x0.data()[i];
            let want_var = 1.0 - ab;
            let se_mean = (want_var / n).sqrt();
            let se_var = want_var * (2.0 / (n - 1.0)).sqrt();
            if (mean - want_mean).abs() >= 3.0 * se_mean {
                return Err(format!("t={t} pixel {i}: mean {mean} vs {want_mean}"));
            }
            if (var - want_var).abs() >= 3.0 * se_var {
                return Err(format!("t={t} pixel {i}: variance {var} vs {want_var}"));
            }
        }
    }
    Ok(())
}
