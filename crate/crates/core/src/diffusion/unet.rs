use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Linear};
use crate::params::{Bound, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Shape of the noise predictor: four resolution stages on each path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserArch {
    /// Channels at strides 1, 2, 4 and 8 of the input.
    pub stage_channels: [usize; 4],
    pub image_side: usize,
    pub time_embed_dim: usize,
    /// Largest timestep the conditioning accepts.
    pub t_max: usize,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch { stage_channels: [32, 64, 128, 256], image_side: 96, time_embed_dim: 64, t_max: 1000 }
    }
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.image_side % 8 != 0 {
            return Err(Error::Config(format!("image side {} must be a positive multiple of 8", self.image_side)));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time embedding dimension must be even".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        Ok(())
    }

    /// Spatial side of up-stage `i` (0 = deepest).
    pub fn tap_side(&self, i: usize) -> usize {
        self.image_side >> (3 - i)
    }

    /// Channel count of up-stage `i` (0 = deepest).
    pub fn tap_channels(&self, i: usize) -> usize {
        self.stage_channels[3 - i]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<T>, name: &str, cin: usize, cout: usize, temb: usize, rng: &mut R) -> Self {
        ResBlock {
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), cin),
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, true, rng),
            temb: Linear::new(ps, &format!("{name}.temb"), temb, cout, rng),
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), cout),
            conv2: Conv2d::with_std(ps, &format!("{name}.conv2"), cout, cout, 3, 0.1 * (2.0 / (9 * cout) as f64).sqrt(), rng),
            skip: (cin != cout).then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, true, rng)),
        }
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, emb: Var<'t, T>) -> Var<'t, T> {
        let h = self.conv1.forward(p, self.gn1.forward(p, x).silu());
        let h = h.add_channel_vec(self.temb.forward(p, emb));
        let h = self.conv2.forward(p, self.gn2.forward(p, h).silu());
        let skip = self.skip.as_ref().map_or(x, |s| s.forward(p, x));
        skip.add(h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Layers {
    temb: Linear,
    input: Conv2d,
    enc: Vec<ResBlock>,
    down: Vec<Conv2d>,
    mid: ResBlock,
    up: Vec<Conv2d>,
    dec: Vec<ResBlock>,
    out_gn: GroupNorm,
    out: Conv2d,
}

impl Layers {
    fn new<T: Scalar, R: Rng + ?Sized>(arch: &DenoiserArch, ps: &mut ParamSet<T>, rng: &mut R) -> Self {
        let c = arch.stage_channels;
        let d = arch.time_embed_dim;
        let temb = Linear::new(ps, "temb", d, d, rng);
        let input = Conv2d::new(ps, "in", 3, c[0], 3, 1, true, rng);
        let enc = (0..4).map(|s| ResBlock::new(ps, &format!("enc{s}"), c[s], c[s], d, rng)).collect();
        let down = (0..3).map(|s| Conv2d::new(ps, &format!("down{s}"), c[s], c[s + 1], 3, 2, true, rng)).collect();
        let mid = ResBlock::new(ps, "mid", c[3], c[3], d, rng);
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for i in 0..4 {
            let level = 3 - i;
            if i > 0 {
                up.push(Conv2d::new(ps, &format!("up{i}"), c[level + 1], c[level], 3, 1, true, rng));
            }
            dec.push(ResBlock::new(ps, &format!("dec{i}"), 2 * c[level], c[level], d, rng));
        }
        let out_gn = GroupNorm::new(ps, "out_gn", c[0]);
        let out = Conv2d::with_std(ps, "out", c[0], 3, 3, 0.01, rng);
        Layers { temb, input, enc, down, mid, up, dec, out_gn, out }
    }
}

/// Sinusoidal timestep features `[N, dim]`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..dim {
            let freq = (-(10000f64.ln()) * (i % half) as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out.push(T::lit(if i < half { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec(&[ts.len(), dim], out)
}

/// Noise prediction plus the four up-stage activations, deepest first.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseOutput<T: Scalar> {
    pub eps_hat: Tensor<T>,
    pub taps: [Tensor<T>; 4],
}

/// U-Net noise predictor with timestep conditioning.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Denoiser<T: Scalar> {
    arch: DenoiserArch,
    layers: Layers,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub fn new<R: Rng + ?Sized>(arch: DenoiserArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        let layers = Layers::new(&arch, &mut params, rng);
        Ok(Denoiser { arch, layers, params })
    }

    /// Rebuilds the layer graph for `arch` around existing weights.
    pub fn from_params(arch: DenoiserArch, params: ParamSet<T>) -> Result<Self> {
        let mut fresh = Self::new(arch, &mut ChaCha8Rng::seed_from_u64(0))?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::Checkpoint("denoiser weights do not match the architecture".into()));
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn arch(&self) -> &DenoiserArch {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, shape: &[usize], ts: &[usize]) -> Result<()> {
        let s = self.arch.image_side;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s || shape[0] != ts.len() {
            return Err(Error::Shape(format!(
                "denoiser expects [{}, 3, {s}, {s}], got {shape:?}",
                ts.len()
            )));
        }
        if let Some(&bad) = ts.iter().find(|&&t| t == 0 || t > self.arch.t_max) {
            return Err(Error::Range(format!("timestep {bad} outside 1..={}", self.arch.t_max)));
        }
        Ok(())
    }

    /// Graph-building forward pass for `x: [N, 3, S, S]` at per-sample timesteps.
    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>, ts: &[usize]) -> Result<(Var<'t, T>, [Var<'t, T>; 4])> {
        self.check_input(&x.shape(), ts)?;
        let l = &self.layers;
        let tape = x.tape();
        let emb = tape.constant(timestep_embedding(ts, self.arch.time_embed_dim));
        let emb = l.temb.forward(p, emb).silu();
        let mut h = l.input.forward(p, x);
        let mut skips = Vec::with_capacity(4);
        for s in 0..4 {
            h = l.enc[s].forward(p, h, emb);
            skips.push(h);
            if s < 3 {
                h = l.down[s].forward(p, h);
            }
        }
        h = l.mid.forward(p, h, emb);
        let mut taps = Vec::with_capacity(4);
        for i in 0..4 {
            if i > 0 {
                h = l.up[i - 1].forward(p, h.upsample2());
            }
            h = l.dec[i].forward(p, Var::concat_channels(&[h, skips[3 - i]]), emb);
            taps.push(h);
        }
        let eps = l.out.forward(p, l.out_gn.forward(p, h).silu());
        Ok((eps, [taps[0], taps[1], taps[2], taps[3]]))
    }

    /// Single-image inference: `xt` is `[3, S, S]` or `[1, 3, S, S]`.
    pub fn denoise_with_taps(&self, xt: &Tensor<T>, t: usize) -> Result<DenoiseOutput<T>> {
        let x = if xt.shape().len() == 3 { xt.clone().reshape(&[1, xt.dim(0), xt.dim(1), xt.dim(2)]) } else { xt.clone() };
        let tape = Tape::inference();
        let p = self.params.bind(&tape, false);
        let (eps, taps) = self.forward(&p, tape.constant(x), &[t])?;
        let eps_hat = (*eps.value()).clone().reshape(xt.shape());
        Ok(DenoiseOutput { eps_hat, taps: taps.map(|v| (*v.value()).clone()) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_arch() -> DenoiserArch {
        DenoiserArch { stage_channels: [2, 2, 3, 4], image_side: 8, time_embed_dim: 4, t_max: 1000 }
    }

    #[test]
    fn taps_follow_the_architecture_contract() {
        let arch = DenoiserArch { stage_channels: [4, 6, 8, 10], image_side: 16, time_embed_dim: 8, t_max: 1000 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Denoiser::<f32>::new(arch.clone(), &mut rng).unwrap();
        let x = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);
        let out = d.denoise_with_taps(&x, 250).unwrap();
        assert_eq!(out.eps_hat.shape(), &[3, 16, 16]);
        let sides: Vec<usize> = out.taps.iter().map(|t| t.dim(2)).collect();
        assert_eq!(sides, vec![2, 4, 8, 16]);
        let chans: Vec<usize> = out.taps.iter().map(|t| t.dim(1)).collect();
        assert_eq!(chans, vec![10, 8, 6, 4]);
        for i in 0..4 {
            assert_eq!(out.taps[i].dim(2), arch.tap_side(i));
            assert_eq!(out.taps[i].dim(1), arch.tap_channels(i));
        }
        let again = d.denoise_with_taps(&x, 250).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn rejects_wrong_side_and_timestep() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Denoiser::<f32>::new(tiny_arch(), &mut rng).unwrap();
        assert!(d.denoise_with_taps(&Tensor::zeros(&[3, 16, 16]), 5).is_err());
        assert!(d.denoise_with_taps(&Tensor::zeros(&[3, 8, 8]), 0).is_err());
        assert!(d.denoise_with_taps(&Tensor::zeros(&[3, 8, 8]), 1001).is_err());
        let bad = DenoiserArch { image_side: 12, ..tiny_arch() };
        assert!(Denoiser::<f32>::new(bad, &mut rng).is_err());
    }

    #[test]
    fn from_params_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Denoiser::<f64>::new(tiny_arch(), &mut rng).unwrap();
        let back = Denoiser::from_params(tiny_arch(), d.params.clone()).unwrap();
        let x = Tensor::randn(&[3, 8, 8], 1.0, &mut rng);
        assert_eq!(d.denoise_with_taps(&x, 7).unwrap(), back.denoise_with_taps(&x, 7).unwrap());
        let other = DenoiserArch { stage_channels: [2, 2, 3, 5], ..tiny_arch() };
        assert!(Denoiser::from_params(other, d.params).is_err());
    }
}
