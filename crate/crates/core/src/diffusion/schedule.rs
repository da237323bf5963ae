use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance schedule of the forward noising process, indexed by `t` in
/// `1..=t_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas with cumulative products of `1 - beta`.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { t_max, beta_start, beta_end, beta, alpha, alpha_bar })
    }

    /// The conventional 1000-step schedule from 1e-4 to 0.02.
    pub fn ddpm_default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_max {
            return Err(Error::Range(format!("timestep {t} outside 1..={}", self.t_max)));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn forward_diffuse<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// A clean image, its noise draw and the resulting noised image.
#[derive(Clone, Debug)]
pub struct DiffusionSample<T: Scalar> {
    pub x0: Tensor<T>,
    pub t: usize,
    pub eps: Tensor<T>,
    pub xt: Tensor<T>,
}

impl<T: Scalar> DiffusionSample<T> {
    pub fn new(x0: Tensor<T>, t: usize, eps: Tensor<T>, schedule: &NoiseSchedule) -> Result<Self> {
        let xt = forward_diffuse(&x0, t, &eps, schedule)?;
        Ok(DiffusionSample { x0, t, eps, xt })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: exp of a compensated sum of log1p(-beta).
    fn alpha_bar_oracle(betas: &[f64]) -> Vec<f64> {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        betas
            .iter()
            .map(|b| {
                let term = (-b).ln_1p();
                let t = sum + term;
                if sum.abs() >= term.abs() {
                    comp += (sum - t) + term;
                } else {
                    comp += (term - t) + sum;
                }
                sum = t;
                (sum + comp).exp()
            })
            .collect()
    }

    #[test]
    fn single_and_two_step_products() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        let s = NoiseSchedule::linear(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_matches_log_space_oracle() {
        let s = NoiseSchedule::ddpm_default();
        let oracle = alpha_bar_oracle(s.betas());
        for (a, b) in s.alpha_bars().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        for t in 2..=s.t_max {
            let lhs = s.alpha_bar(t).unwrap();
            assert_eq!(lhs, s.alpha_bar(t - 1).unwrap() * s.alpha(t).unwrap());
        }
        for &ab in s.alpha_bars() {
            assert!(ab > 0.0 && ab <= 1.0);
            assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() < 1e-15);
        }
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_limits_and_inversion() {
        let s = NoiseSchedule::ddpm_default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::uniform(&[3, 4, 4], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        let ab = s.alpha_bar(500).unwrap();
        let zero = Tensor::zeros(&[3, 4, 4]);
        let a = forward_diffuse(&x0, 500, &zero, &s).unwrap();
        assert!(a.max_abs_diff(&x0.scale(ab.sqrt())) < 1e-15);
        let b = forward_diffuse(&zero, 500, &eps, &s).unwrap();
        assert!(b.max_abs_diff(&eps.scale((1.0 - ab).sqrt())) < 1e-15);
        let xt = forward_diffuse(&x0, 500, &eps, &s).unwrap();
        let rec = xt.zip_map(&eps, |x, e| (x - (1.0 - ab).sqrt() * e) / ab.sqrt());
        assert!(rec.max_abs_diff(&x0) < 1e-6);
        assert!(forward_diffuse(&x0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 1001, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 5, &Tensor::zeros(&[3, 4, 5]), &s).is_err());
    }
}
