use candle_core::{Module, Tensor, D};

use super::params::{Init, ParamPath};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// `k x k` convolution, "same" padding, He-initialized.
    pub fn new(p: &ParamPath, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_init(p, cin, cout, k, stride, Init::Kaiming { fan_in: cin * k * k, gain: 1.0 })
    }

    pub fn zeroed(p: &ParamPath, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Self::with_init(p, cin, cout, k, 1, Init::Zeros)
    }

    pub fn with_init(p: &ParamPath, cin: usize, cout: usize, k: usize, stride: usize, init: Init) -> Result<Self> {
        let weight = p.get("weight", &[cout, cin, k, k], init)?;
        let bias = p.get("bias", &[cout], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        let b = self.bias.reshape((1, self.bias.dims()[0], 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &ParamPath, din: usize, dout: usize) -> Result<Self> {
        let weight = p.get("weight", &[dout, din], Init::Kaiming { fan_in: din, gain: 1.0 })?;
        let bias = Some(p.get("bias", &[dout], Init::Zeros)?);
        Ok(Self { weight, bias })
    }

    pub fn no_bias(p: &ParamPath, din: usize, dout: usize) -> Result<Self> {
        let weight = p.get("weight", &[dout, din], Init::Kaiming { fan_in: din, gain: 1.0 })?;
        Ok(Self { weight, bias: None })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies to the last axis of a 2-D or 3-D input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = candle_nn::Linear::new(self.weight.clone(), None).forward(x)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Group normalization without affine parameters over `(B, C, H, W)`.
pub fn group_norm(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let g = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = g.mean_keepdim(D::Minus1)?;
    let centred = g.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centred.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(normed.reshape((b, c, h, w))?)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
}

impl GroupNorm {
    pub fn new(p: &ParamPath, channels: usize, groups: usize) -> Result<Self> {
        let groups = groups.min(channels);
        assert!(channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        Ok(Self {
            groups,
            weight: p.get("weight", &[channels], Init::Ones)?,
            bias: p.get("bias", &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dims()[0];
        let y = group_norm(x, self.groups)?;
        let y = y.broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// `(B, C, H, W)` to `(B, H*W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H*W, C)` back to `(B, C, H, W)`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Mean absolute error.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}
