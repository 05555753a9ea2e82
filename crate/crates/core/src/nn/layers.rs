use candle_core::{Tensor, D};

use super::{Init, ParamBuilder};
use crate::error::Result;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    let zeros = x.zeros_like()?;
    Ok((x.maximum(&zeros)? + (x.minimum(&zeros)? * slope)?)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Max-shifted softmax over the last dimension. The shift is detached so the
/// gradient is that of the plain softmax.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// PyTorch-style default init: weight and bias `U(-1/sqrt(fan_in), ..)`.
    pub fn new(
        pb: ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = pb.param("weight", &[out_ch, in_ch, kernel, kernel], Init::Uniform(bound))?;
        let bias = Some(pb.param("bias", &[out_ch], Init::Uniform(bound))?);
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// All-zero weight and bias.
    pub fn zeros(pb: ParamBuilder<'_>, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.param("weight", &[out_ch, in_ch, kernel, kernel], Init::Zeros)?,
            bias: Some(pb.param("bias", &[out_ch], Init::Zeros)?),
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: Some(pb.param("bias", &[out_dim], Init::Uniform(bound))?),
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b)?),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.param("weight", &[dim], Init::Ones)?,
            beta: pb.param("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / n)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = (xc.sqr()?.sum_keepdim(D::Minus1)? / n)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Group normalization over `(B, C, H, W)` inputs.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(pb: ParamBuilder<'_>, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(crate::error::invalid!(
                "{channels} channels cannot be split into {groups} groups"
            ));
        }
        Ok(Self {
            gamma: pb.param("weight", &[channels], Init::Ones)?,
            beta: pb.param("bias", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let n = g.dim(2)? as f64;
        let mean = (g.sum_keepdim(2)? / n)?;
        let gc = g.broadcast_sub(&mean)?;
        let var = (gc.sqr()?.sum_keepdim(2)? / n)?;
        let gn = gc.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, c, h, w))?;
        let shape = (1, c, 1, 1);
        Ok(gn
            .broadcast_mul(&self.gamma.reshape(shape)?)?
            .broadcast_add(&self.beta.reshape(shape)?)?)
    }
}
