//! Parameterised layers that record onto a [`Tape`].

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::kernels::conv::ConvGeom;
use crate::nn::params::{ParamBuilder, ParamId};
use crate::real::Real;

/// 2-D convolution with optional bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, geom: ConvGeom, bias: bool) -> Result<Self> {
        let fan_in = geom.cin / geom.groups * geom.kh * geom.kw;
        let mut s = pb.sub(name);
        let weight = s.uniform("weight", &geom.weight_shape(), fan_in)?;
        let bias = if bias { Some(s.uniform("bias", &[geom.cout], fan_in)?) } else { None };
        Ok(Self { weight, bias, geom })
    }

    /// Same as [`Conv2d::build`] with every entry set to zero.
    pub fn build_zero<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, geom: ConvGeom, bias: bool) -> Result<Self> {
        let mut s = pb.sub(name);
        let weight = s.zeros("weight", &geom.weight_shape())?;
        let bias = if bias { Some(s.zeros("bias", &[geom.cout])?) } else { None };
        Ok(Self { weight, bias, geom })
    }

    /// `k x k` convolution with "same" padding.
    pub fn same<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::build(pb, name, ConvGeom::new(cin, cout, k, 1, k / 2), true)
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = t.param(self.weight);
        let b = self.bias.map(|b| t.param(b));
        t.conv2d(x, w, b, self.geom)
    }
}

/// Transposed convolution, `cin -> cout`, kernel `k`, stride `k`.
#[derive(Clone, Copy, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl ConvTranspose2d {
    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let geom = ConvGeom::new(cout, cin, k, k, 0);
        let fan_in = cout * k * k;
        let mut s = pb.sub(name);
        let weight = s.uniform("weight", &[cin, cout, k, k], fan_in)?;
        let bias = s.uniform("bias", &[cout], fan_in)?;
        Ok(Self { weight, bias, geom })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = t.param(self.weight);
        let b = t.param(self.bias);
        t.conv_transpose2d(x, w, Some(b), self.geom)
    }
}

/// Layer normalisation over the channel axis with affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub const EPS: f64 = 1e-5;

    pub fn build<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, c: usize) -> Result<Self> {
        let mut s = pb.sub(name);
        Ok(Self { gamma: s.ones("gamma", &[c])?, beta: s.zeros("beta", &[c])? })
    }

    pub fn forward<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm_channels(x, g, b, Self::EPS)
    }
}

/// Global average pool over the spatial axes, keeping them as `1 x 1`.
pub fn gap<T: Real>(t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    t.mean_axes(x, &[2, 3])
}

/// Mean over channels, keeping the axis.
pub fn channel_mean<T: Real>(t: &mut Tape<'_, T>, x: Var) -> Result<Var> {
    t.mean_axes(x, &[1])
}
