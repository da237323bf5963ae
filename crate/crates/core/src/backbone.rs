//! Feature-pyramid backbones: the frozen-denoiser feature extractor with its
//! trainable bottleneck, and a plain trainable CNN.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::diffusion::{forward_diffuse, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm};
use crate::params::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Strides of pyramid levels P2..P5.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

pub fn level_side(image_side: usize, level: usize) -> usize {
    image_side.div_ceil(PYRAMID_STRIDES[level])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Noise seeded by `(image_id, t)`: features are a pure function of the
    /// image and its id.
    PerImageDeterministic,
    FreshRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureExtractionConfig {
    pub time_steps: usize,
    pub save_steps: usize,
    pub t_high: usize,
    pub noise_mode: NoiseMode,
}

impl Default for FeatureExtractionConfig {
    fn default() -> Self {
        FeatureExtractionConfig { time_steps: 5, save_steps: 5, t_high: 500, noise_mode: NoiseMode::PerImageDeterministic }
    }
}

impl FeatureExtractionConfig {
    pub fn validate(&self, t_max: usize) -> Result<()> {
        if self.save_steps == 0 || self.save_steps > self.time_steps {
            return Err(Error::Config(format!(
                "need 1 <= save_steps <= time_steps, got save_steps={} time_steps={}",
                self.save_steps, self.time_steps
            )));
        }
        if self.t_high < self.time_steps || self.t_high > t_max {
            return Err(Error::Config(format!(
                "t_high {} must lie in [time_steps, t_max] = [{}, {t_max}]",
                self.t_high, self.time_steps
            )));
        }
        Ok(())
    }

    /// `time_steps` levels evenly spaced in `[t_high / time_steps, t_high]`.
    pub fn probed_levels(&self) -> Vec<usize> {
        (1..=self.time_steps).map(|i| ((i * self.t_high) as f64 / self.time_steps as f64).round() as usize).collect()
    }

    /// `save_steps` levels evenly spaced among the probed ones, always
    /// including the highest.
    pub fn kept_levels(&self) -> Vec<usize> {
        let probed = self.probed_levels();
        (1..=self.save_steps).map(|j| probed[(j * self.time_steps).div_ceil(self.save_steps) - 1]).collect()
    }
}

fn noise_seed(image_id: u64, t: usize) -> u64 {
    let mut z = image_id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (t as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

/// Runs the frozen denoiser at every kept noise level of `cfg` and returns
/// one 4-tap list (deepest first, each `[1, C, h, w]`) per kept level. Probed levels that are not
/// kept do not influence the result and are skipped.
pub fn extract_taps<T: Scalar>(
    denoiser: &Denoiser<T>,
    schedule: &NoiseSchedule,
    image: &Tensor<T>,
    cfg: &FeatureExtractionConfig,
    image_id: u64,
    rng: Option<&mut dyn RngCore>,
) -> Result<Vec<[Tensor<T>; 4]>> {
    cfg.validate(schedule.t_max)?;
    let side = denoiser.arch().image_side;
    if image.shape() != [3, side, side] {
        return Err(Error::Shape(format!("image {:?} does not match the denoiser side {side}", image.shape())));
    }
    let kept = cfg.kept_levels();
    let mut fresh = rng;
    let mut xts = Vec::with_capacity(kept.len());
    for &t in &kept {
        let eps = match (cfg.noise_mode, fresh.as_deref_mut()) {
            (NoiseMode::PerImageDeterministic, _) => {
                Tensor::randn(image.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(noise_seed(image_id, t)))
            }
            (NoiseMode::FreshRandom, Some(r)) => Tensor::randn(image.shape(), 1.0, r),
            (NoiseMode::FreshRandom, None) => {
                return Err(Error::Config("fresh-random noise mode needs an RNG".into()));
            }
        };
        xts.push(forward_diffuse(image, t, &eps, schedule)?);
    }
    let tape = crate::Tape::inference();
    let p = denoiser.params.bind(&tape, false);
    let (_, taps) = denoiser.forward(&p, tape.constant(Tensor::stack(&xts)), &kept)?;
    let taps: Vec<Tensor<T>> = taps.iter().map(|v| (*v.value()).clone()).collect();
    Ok((0..kept.len()).map(|k| std::array::from_fn(|i| taps[i].batch_item(k))).collect())
}

/// Per-level low-rank projection, normalization and resampling from
/// concatenated taps to the pyramid. Level `k` (P2..P5) reads tap stage `k`
/// (the shallowest tap feeds P2).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BottleneckParams {
    pub in_widths: [usize; 4],
    pub out_widths: [usize; 4],
    pub ranks: [usize; 4],
    down: [Conv2d; 4],
    up: [Conv2d; 4],
    norm: [GroupNorm; 4],
}

impl BottleneckParams {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        stage_channels: [usize; 4],
        save_steps: usize,
        out_widths: [usize; 4],
        rank_divisor: usize,
        rng: &mut R,
    ) -> Self {
        let in_widths = stage_channels.map(|c| c * save_steps);
        let ranks: [usize; 4] = std::array::from_fn(|k| (out_widths[k] / rank_divisor.max(1)).max(1));
        let down = std::array::from_fn(|k| {
            Conv2d::with_std(ps, &format!("{prefix}.p{}.u", k + 2), in_widths[k], ranks[k], 1, (1.0 / in_widths[k] as f64).sqrt(), rng)
        });
        let up = std::array::from_fn(|k| {
            Conv2d::with_std(ps, &format!("{prefix}.p{}.v", k + 2), ranks[k], out_widths[k], 1, (1.0 / ranks[k] as f64).sqrt(), rng)
        });
        let norm = std::array::from_fn(|k| GroupNorm::new(ps, &format!("{prefix}.p{}.gn", k + 2), out_widths[k]));
        BottleneckParams { in_widths, out_widths, ranks, down, up, norm }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for k in 0..4 {
            ids.push(self.down[k].w);
            ids.extend(self.down[k].b);
            ids.push(self.up[k].w);
            ids.extend(self.up[k].b);
            ids.push(self.norm[k].gamma);
            ids.push(self.norm[k].beta);
        }
        ids
    }

    /// Sets both factors of level `k` to identity and zeroes their biases.
    /// Requires `in_width == rank == out_width` at that level.
    pub fn set_identity<T: Scalar>(&self, ps: &mut ParamSet<T>, k: usize) -> Result<()> {
        let n = self.in_widths[k];
        if self.ranks[k] != n || self.out_widths[k] != n {
            return Err(Error::Shape(format!("level {k} is not square ({n} -> {} -> {})", self.ranks[k], self.out_widths[k])));
        }
        for conv in [&self.down[k], &self.up[k]] {
            let w = ps.get_mut(conv.w);
            w.data_mut().iter_mut().for_each(|v| *v = T::zero());
            for i in 0..n {
                w.data_mut()[i * n + i] = T::one();
            }
            if let Some(b) = conv.b {
                ps.get_mut(b).data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        Ok(())
    }

    /// `kept[j][i]` is tap `i` (deepest first) at kept level `j`, each
    /// `[1, C, h, w]`.
    pub fn project<'t, T: Scalar>(&self, p: &Bound<'t, T>, kept: &[[Var<'t, T>; 4]], image_side: usize) -> Result<[Var<'t, T>; 4]> {
        if kept.is_empty() {
            return Err(Error::Empty("kept tap lists".into()));
        }
        let mut out = Vec::with_capacity(4);
        for k in 0..4 {
            let parts: Vec<Var<'t, T>> = kept.iter().map(|taps| taps[3 - k]).collect();
            let x = Var::concat_channels(&parts);
            let c = x.shape()[1];
            if c != self.in_widths[k] {
                return Err(Error::Shape(format!("level P{} expects {} tap channels, got {c}", k + 2, self.in_widths[k])));
            }
            let h = self.up[k].forward(p, self.down[k].forward(p, x));
            let h = self.norm[k].forward(p, h).relu();
            let side = level_side(image_side, k);
            out.push(h.bilinear_resize(side, side));
        }
        Ok([out[0], out[1], out[2], out[3]])
    }
}

/// Taps as constants on `p`'s tape, ready for [`BottleneckParams::project`].
pub fn taps_on_tape<'t, T: Scalar>(p: &Bound<'t, T>, kept: Vec<[Tensor<T>; 4]>) -> Vec<[Var<'t, T>; 4]> {
    let tape = p.tape();
    kept.into_iter().map(|taps| taps.map(|t| tape.constant(t))).collect()
}

/// The frozen denoiser plus its trainable bottleneck.
#[derive(Clone, Debug)]
pub struct DiffusionBackbone<T: Scalar> {
    pub denoiser: Arc<Denoiser<T>>,
    pub schedule: Arc<NoiseSchedule>,
    pub features: FeatureExtractionConfig,
    pub bottleneck: BottleneckParams,
}

/// Plain 4-stage CNN: a stride-2 stem, then per stage a stride-2 conv and a
/// residual 3x3 conv, each followed by GroupNorm and ReLU.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlainCnn {
    pub widths: [usize; 4],
    stem: Conv2d,
    stem_gn: GroupNorm,
    down: [Conv2d; 4],
    down_gn: [GroupNorm; 4],
    body: [Conv2d; 4],
    body_gn: [GroupNorm; 4],
}

impl PlainCnn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<T>, prefix: &str, widths: [usize; 4], rng: &mut R) -> Self {
        let stem_w = (widths[0] / 2).max(1);
        let stem = Conv2d::new(ps, &format!("{prefix}.stem"), 3, stem_w, 3, 2, false, rng);
        let stem_gn = GroupNorm::new(ps, &format!("{prefix}.stem_gn"), stem_w);
        let mut cin = stem_w;
        let mut down = Vec::new();
        let mut down_gn = Vec::new();
        let mut body = Vec::new();
        let mut body_gn = Vec::new();
        for (k, &w) in widths.iter().enumerate() {
            down.push(Conv2d::new(ps, &format!("{prefix}.s{k}.down"), cin, w, 3, 2, false, rng));
            down_gn.push(GroupNorm::new(ps, &format!("{prefix}.s{k}.down_gn"), w));
            body.push(Conv2d::new(ps, &format!("{prefix}.s{k}.body"), w, w, 3, 1, false, rng));
            body_gn.push(GroupNorm::new(ps, &format!("{prefix}.s{k}.body_gn"), w));
            cin = w;
        }
        let arr = |v: Vec<Conv2d>| -> [Conv2d; 4] { v.try_into().unwrap_or_else(|_| unreachable!()) };
        let arr_gn = |v: Vec<GroupNorm>| -> [GroupNorm; 4] { v.try_into().unwrap_or_else(|_| unreachable!()) };
        PlainCnn { widths, stem, stem_gn, down: arr(down), down_gn: arr_gn(down_gn), body: arr(body), body_gn: arr_gn(body_gn) }
    }

    /// `x: [1, 3, H, W]` to P2..P5.
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> [Var<'t, T>; 4] {
        let mut h = self.stem_gn.forward(p, self.stem.forward(p, x)).relu();
        let mut out = Vec::with_capacity(4);
        for k in 0..4 {
            h = self.down_gn[k].forward(p, self.down[k].forward(p, h)).relu();
            let r = self.body_gn[k].forward(p, self.body[k].forward(p, h));
            h = h.add(r).relu();
            out.push(h);
        }
        [out[0], out[1], out[2], out[3]]
    }
}

/// Concrete pyramid values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Scalar> {
    pub levels: [Tensor<T>; 4],
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn from_vars(v: &[Var<'_, T>; 4]) -> Self {
        FeaturePyramid { levels: std::array::from_fn(|k| (*v[k].value()).clone()) }
    }

    /// Checks sides `ceil(H / stride)`, channel counts and finiteness.
    pub fn validate(&self, image_side: usize, widths: [usize; 4]) -> Result<()> {
        for k in 0..4 {
            let s = level_side(image_side, k);
            let want = [1, widths[k], s, s];
            if self.levels[k].shape() != want {
                return Err(Error::Shape(format!("P{} is {:?}, expected {want:?}", k + 2, self.levels[k].shape())));
            }
            if !self.levels[k].is_finite() {
                return Err(Error::NonFinite { what: format!("P{}", k + 2), step: 0, detail: String::new() });
            }
        }
        Ok(())
    }
}
