//! Eager layer primitives and their parameter containers.
//!
//! These wrap the tape operations for one-off use (tests, inspection, small
//! tools). Networks are executed through [`crate::model`], which records the
//! same operations on a shared [`Tape`] for training.

use crate::autograd::{BatchStats, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights of a square 2-D convolution.
#[derive(Clone, Debug)]
pub struct ConvParams {
    /// `[C_out, C_in, k, k]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    /// A zero-initialised "same" convolution (stride 1, padding `k / 2`).
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, bias: bool) -> Result<Self> {
        Ok(ConvParams {
            weight: Tensor::zeros(&[out_channels, in_channels, kernel, kernel])?,
            bias: if bias { Some(Tensor::zeros(&[out_channels])?) } else { None },
            stride: 1,
            padding: kernel / 2,
        })
    }
}

/// Weights of a stride-`k` transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvTransposeParams {
    /// `[C_in, C_out, k, k]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Affine parameters and running statistics of a batch-norm layer.
#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
    /// Weight kept by the running averages at each update.
    pub momentum: f32,
}

impl BatchNormParams {
    /// γ = 1, β = 0, running mean 0, running variance 1.
    pub fn new(channels: usize, eps: f32, momentum: f32) -> Result<Self> {
        Ok(BatchNormParams {
            gamma: Tensor::full(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], 1.0)?,
            eps,
            momentum,
        })
    }
}

/// Folds one batch's statistics into running averages:
/// `r ← m·r + (1 − m)·batch`, using the unbiased variance.
pub fn update_running_stats(mean: &mut [f32], var: &mut [f32], stats: &BatchStats, momentum: f32) {
    let m = momentum as f64;
    let bessel = if stats.count > 1 {
        stats.count as f64 / (stats.count - 1) as f64
    } else {
        1.0
    };
    for c in 0..mean.len() {
        mean[c] = (m * mean[c] as f64 + (1.0 - m) * stats.mean[c]) as f32;
        var[c] = (m * var[c] as f64 + (1.0 - m) * stats.var[c] * bessel) as f32;
    }
}

fn unary(x: &Tensor, f: impl FnOnce(&mut Tape, crate::VarId) -> Result<crate::VarId>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let y = f(&mut tape, xi)?;
    Ok(tape.value(y).clone())
}

pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    unary(x, |t, xi| {
        let w = t.constant(p.weight.clone());
        let b = p.bias.as_ref().map(|b| t.constant(b.clone()));
        t.conv2d(xi, w, b, p.stride, p.padding)
    })
}

pub fn conv_transpose2d(x: &Tensor, p: &ConvTransposeParams) -> Result<Tensor> {
    unary(x, |t, xi| {
        let w = t.constant(p.weight.clone());
        let b = p.bias.as_ref().map(|b| t.constant(b.clone()));
        t.conv_transpose2d(xi, w, b)
    })
}

/// Training-mode batch norm: normalises with the batch statistics and folds
/// them into the running averages.
pub fn batch_norm_train(x: &Tensor, p: &mut BatchNormParams) -> Result<Tensor> {
    let mut stats = None;
    let y = unary(x, |t, xi| {
        let g = t.constant(p.gamma.clone());
        let b = t.constant(p.beta.clone());
        let (y, s) = t.batch_norm(xi, g, b, None, p.eps)?;
        stats = s;
        Ok(y)
    })?;
    let stats = stats.ok_or_else(|| Error::shape("batch_norm", "no batch statistics"))?;
    update_running_stats(
        p.running_mean.data_mut(),
        p.running_var.data_mut(),
        &stats,
        p.momentum,
    );
    Ok(y)
}

/// Inference-mode batch norm using the running statistics.
pub fn batch_norm_eval(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    unary(x, |t, xi| {
        let g = t.constant(p.gamma.clone());
        let b = t.constant(p.beta.clone());
        let running = (p.running_mean.data(), p.running_var.data());
        Ok(t.batch_norm(xi, g, b, Some(running), p.eps)?.0)
    })
}

pub fn max_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    unary(x, |t, xi| t.max_pool(xi, factor))
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    unary(x, |t, xi| t.upsample(xi, factor))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(crate::autograd::sigmoid)
}

pub fn dropout(x: &Tensor, rate: f32, seed: u64) -> Result<Tensor> {
    unary(x, |t, xi| t.dropout(xi, rate, seed))
}

pub fn concat(xs: &[&Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids: Vec<_> = xs.iter().map(|x| tape.constant((*x).clone())).collect();
    let y = tape.concat(&ids)?;
    Ok(tape.value(y).clone())
}
