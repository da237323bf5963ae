//! Parameterized layers. Each layer owns [`ParamId`]s into a shared
//! [`ParamSet`] and is evaluated against a [`Bound`] view of it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::kernels::ConvGeom;
use crate::params::{Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub geom: ConvGeomDef,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConvGeomDef {
    pub stride: usize,
    pub pad: usize,
}

impl From<ConvGeomDef> for ConvGeom {
    fn from(g: ConvGeomDef) -> Self {
        ConvGeom { stride: g.stride, pad: g.pad }
    }
}

impl Conv2d {
    /// He-normal initialized `k x k` convolution with "same"-style padding.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let w = ps.add(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Conv2d { w, b, geom: ConvGeomDef { stride, pad: k / 2 } }
    }

    /// Same as [`Conv2d::new`] with weights drawn at scale `std`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_std<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng));
        let b = Some(ps.add(format!("{name}.b"), Tensor::zeros(&[cout])));
        Conv2d { w, b, geom: ConvGeomDef { stride: 1, pad: k / 2 } }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(p.var(self.w), self.b.map(|b| p.var(b)), self.geom.into())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(ps: &mut ParamSet<T>, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        Self::with_std(ps, name, din, dout, (1.0 / din as f64).sqrt(), rng)
    }

    pub fn with_std<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        din: usize,
        dout: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::randn(&[din, dout], std, rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[dout]));
        Linear { w, b }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    /// Uses up to 8 groups, fewer when the channel count is not divisible.
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        let groups = (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        Self::with_groups(ps, name, channels, groups)
    }

    pub fn with_groups<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::ones(&[channels]));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.group_norm(p.var(self.gamma), p.var(self.beta), self.groups)
    }
}
