//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients additively, so a value consumed by several
//! operations receives the sum of their contributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Dims};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of the batch a training-mode batch norm saw.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Number of values each statistic was computed over.
    pub count: usize,
}

/// Hyper-parameters of the binary focal loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f32,
    pub gamma: f32,
    /// Predictions are clamped to `[clamp, 1 - clamp]` before taking logs.
    pub clamp: f32,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
            clamp: 1e-7,
        }
    }
}

/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

enum Op {
    Leaf,
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        kernel: usize,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        xhat: Vec<f32>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: VarId,
        argmax: Vec<u32>,
    },
    Upsample {
        x: VarId,
        factor: usize,
    },
    Concat {
        xs: Vec<VarId>,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Relu {
        x: VarId,
        active: Vec<bool>,
    },
    Sigmoid {
        x: VarId,
    },
    Dropout {
        x: VarId,
        mask: Vec<f32>,
    },
    WeightedSum {
        x: VarId,
        weights: Vec<f32>,
    },
    FocalLoss {
        p: VarId,
        target: Vec<f32>,
        params: FocalParams,
    },
    DiceLoss {
        p: VarId,
        target: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`, or `None` if the loss does
    /// not depend on it (or it does not require gradients).
    pub fn get(&self, id: VarId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[id.0].clone(), g.clone()))
    }

    pub fn slice(&self, id: VarId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }
}

/// The operation recorder.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    frozen: Option<Frozen>,
}

/// Which ReLU inputs were positive and which element won each max-pool
/// window, in recording order.
///
/// Replaying a pattern (see [`Tape::with_pattern`]) turns the piecewise
/// linear parts of a network into fixed linear maps. The result agrees with
/// the ordinary forward pass at the point the pattern was taken from and is
/// smooth around it, which is what a finite-difference check of the
/// back-propagated gradient needs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationPattern {
    pub relu: Vec<Vec<bool>>,
    pub max_pool: Vec<Vec<u32>>,
}

struct Frozen {
    pattern: ActivationPattern,
    relu_next: usize,
    pool_next: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            frozen: None,
        }
    }

    /// A tape whose ReLU and max-pool operations replay `pattern` instead of
    /// looking at their inputs.
    pub fn with_pattern(pattern: ActivationPattern) -> Self {
        Tape {
            nodes: Vec::new(),
            frozen: Some(Frozen {
                pattern,
                relu_next: 0,
                pool_next: 0,
            }),
        }
    }

    /// The activation pattern recorded so far.
    pub fn pattern(&self) -> ActivationPattern {
        let mut p = ActivationPattern::default();
        for n in &self.nodes {
            match &n.op {
                Op::Relu { active, .. } => p.relu.push(active.clone()),
                Op::MaxPool { argmax, .. } => p.max_pool.push(argmax.clone()),
                _ => {}
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records an input. Gradients are only tracked for leaves that ask for
    /// them and for anything computed from such leaves.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn dims(&self, op: &'static str, id: VarId) -> Result<Dims> {
        let (n, c, h, w) = self
            .value(id)
            .dims4()
            .map_err(|_| Error::shape(op, format!("expected an [N, C, H, W] input, got {:?}", self.value(id).shape())))?;
        Ok(Dims::new(n, c, h, w))
    }

    fn check_len(&self, op: &'static str, id: VarId, expected: usize, what: &str) -> Result<()> {
        let got = self.value(id).numel();
        if got != expected {
            return Err(Error::shape(
                op,
                format!("{what} has {got} elements, expected {expected}"),
            ));
        }
        Ok(())
    }

    /// 2-D convolution; `w` is `[C_out, C_in, k, k]` and `b` is `[C_out]`.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let xd = self.dims("conv2d", x)?;
        let (co, ci, k) = match self.value(w).shape() {
            &[co, ci, kh, kw] if kh == kw => (co, ci, kh),
            s => return Err(Error::shape("conv2d", format!("weight must be [C_out, C_in, k, k], got {s:?}"))),
        };
        if ci != xd.c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {ci}", xd.c),
            ));
        }
        if let Some(b) = b {
            self.check_len("conv2d", b, co, "bias")?;
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        let geom = ConvGeom {
            in_channels: ci,
            out_channels: co,
            kernel: k,
            stride,
            padding,
        };
        let (oh, ow) = geom.out_size(xd.h, xd.w).ok_or_else(|| {
            Error::shape("conv2d", format!("{}x{} input is smaller than the {k}x{k} kernel", xd.h, xd.w))
        })?;
        let (y, _, _) = kernels::conv2d_forward(
            self.value(x).data(),
            xd,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.any_grad(&ids);
        Ok(self.push(
            Tensor::from_parts(vec![xd.n, co, oh, ow], y),
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Transposed convolution with stride equal to the kernel size; `w` is
    /// `[C_in, C_out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> Result<VarId> {
        let xd = self.dims("conv_transpose2d", x)?;
        let (ci, co, k) = match self.value(w).shape() {
            &[ci, co, kh, kw] if kh == kw && kh > 0 => (ci, co, kh),
            s => {
                return Err(Error::shape(
                    "conv_transpose2d",
                    format!("weight must be [C_in, C_out, k, k], got {s:?}"),
                ))
            }
        };
        if ci != xd.c {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {} channels, weight expects {ci}", xd.c),
            ));
        }
        if let Some(b) = b {
            self.check_len("conv_transpose2d", b, co, "bias")?;
        }
        let y = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            xd,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            co,
            k,
        );
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.any_grad(&ids);
        Ok(self.push(
            Tensor::from_parts(vec![xd.n, co, xd.h * k, xd.w * k], y),
            Op::ConvTranspose2d { x, w, b, kernel: k },
            rg,
        ))
    }

    /// Batch normalisation. In training mode (`running = None`) the batch
    /// statistics are used and returned so the caller can update its running
    /// averages; otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running: Option<(&[f32], &[f32])>,
        eps: f32,
    ) -> Result<(VarId, Option<BatchStats>)> {
        let xd = self.dims("batch_norm", x)?;
        self.check_len("batch_norm", gamma, xd.c, "gamma")?;
        self.check_len("batch_norm", beta, xd.c, "beta")?;
        let (mean, var, stats) = match running {
            None => {
                let (mean, var) = kernels::channel_stats(self.value(x).data(), xd);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: xd.n * xd.plane(),
                };
                (mean, var, Some(stats))
            }
            Some((rm, rv)) => {
                if rm.len() != xd.c || rv.len() != xd.c {
                    return Err(Error::shape("batch_norm", "running statistics do not match channel count"));
                }
                (
                    rm.iter().map(|&v| v as f64).collect(),
                    rv.iter().map(|&v| v as f64).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps as f64).sqrt()).collect();
        let (y, xhat) = kernels::batchnorm_apply(
            self.value(x).data(),
            xd,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rg = self.any_grad(&[x, gamma, beta]);
        let id = self.push(
            Tensor::from_parts(xd.to_vec(), y),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            rg,
        );
        Ok((id, stats))
    }

    /// Non-overlapping `factor`×`factor` max pooling.
    pub fn max_pool(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        let xd = self.dims("max_pool", x)?;
        if factor == 0 || xd.h % factor != 0 || xd.w % factor != 0 {
            return Err(Error::shape(
                "max_pool",
                format!("{}x{} input is not divisible by {factor}", xd.h, xd.w),
            ));
        }
        let (y, argmax) = match &mut self.frozen {
            None => kernels::maxpool_forward(self.nodes[x.0].value.data(), xd, factor),
            Some(f) => {
                let argmax = f
                    .pattern
                    .max_pool
                    .get(f.pool_next)
                    .filter(|a| a.len() == xd.len() / (factor * factor))
                    .cloned()
                    .ok_or_else(|| Error::shape("max_pool", "replayed activation pattern does not match the graph"))?;
                f.pool_next += 1;
                let xv = self.nodes[x.0].value.data();
                (argmax.iter().map(|&i| xv[i as usize]).collect(), argmax)
            }
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![xd.n, xd.c, xd.h / factor, xd.w / factor], y),
            Op::MaxPool { x, argmax },
            rg,
        ))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres).
    pub fn upsample(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        let xd = self.dims("upsample", x)?;
        if factor == 0 || xd.h == 0 || xd.w == 0 {
            return Err(Error::shape("upsample", "factor and input size must be positive"));
        }
        let y = kernels::upsample_bilinear_forward(self.value(x).data(), xd, factor);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![xd.n, xd.c, xd.h * factor, xd.w * factor], y),
            Op::Upsample { x, factor },
            rg,
        ))
    }

    /// Concatenation along the channel axis, in argument order.
    pub fn concat(&mut self, xs: &[VarId]) -> Result<VarId> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let d0 = self.dims("concat", first)?;
        let mut channels = 0;
        for &x in xs {
            let d = self.dims("concat", x)?;
            if (d.n, d.h, d.w) != (d0.n, d0.h, d0.w) {
                return Err(Error::shape(
                    "concat",
                    format!("input {:?} does not match {:?} outside the channel axis", d.to_vec(), d0.to_vec()),
                ));
            }
            channels += d.c;
        }
        let plane = d0.plane();
        let mut y = Vec::with_capacity(d0.n * channels * plane);
        for n in 0..d0.n {
            for &x in xs {
                let v = self.value(x);
                let c = v.shape()[1];
                y.extend_from_slice(&v.data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let rg = self.any_grad(xs);
        Ok(self.push(
            Tensor::from_parts(vec![d0.n, channels, d0.h, d0.w], y),
            Op::Concat { xs: xs.to_vec() },
            rg,
        ))
    }

    /// Element-wise sum of two equally shaped values.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let y: Vec<f32> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let shape = va.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Add { a, b }, rg))
    }

    /// # Panics
    ///
    /// When replaying an [`ActivationPattern`] that was recorded on a
    /// different graph.
    pub fn relu(&mut self, x: VarId) -> VarId {
        let active: Vec<bool> = match &mut self.frozen {
            None => self.nodes[x.0].value.data().iter().map(|&v| v > 0.0).collect(),
            Some(f) => {
                let a = f
                    .pattern
                    .relu
                    .get(f.relu_next)
                    .filter(|a| a.len() == self.nodes[x.0].value.numel())
                    .cloned()
                    .expect("replayed activation pattern does not match the graph");
                f.relu_next += 1;
                a
            }
        };
        let v = self.value(x);
        let y: Vec<f32> = v
            .data()
            .iter()
            .zip(&active)
            .map(|(&v, &a)| if a || v.is_nan() { v } else { 0.0 })
            .collect();
        let y = Tensor::from_parts(v.shape().to_vec(), y);
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Relu { x, active }, rg)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let y = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    /// Inverted dropout: each element is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 - rate)`. The mask is a pure function
    /// of `seed`.
    pub fn dropout(&mut self, x: VarId, rate: f32, seed: u64) -> Result<VarId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::shape("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<f32> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let v = self.value(x);
        let y: Vec<f32> = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = v.shape().to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, y), Op::Dropout { x, mask }, rg))
    }

    /// `Σ weights · x` as a `[1]` value. Handy for probing gradients.
    pub fn weighted_sum(&mut self, x: VarId, weights: &[f32]) -> Result<VarId> {
        self.check_len("weighted_sum", x, weights.len(), "input")?;
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, w)| *a as f64 * *w as f64)
            .sum();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::scalar(s as f32),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary focal loss of probabilities `p` against binary `target`.
    pub fn focal_loss(&mut self, p: VarId, target: &Tensor, params: FocalParams) -> Result<VarId> {
        self.check_target("focal_loss", p, target)?;
        let v = focal_value(self.value(p).data(), target.data(), params);
        let rg = self.any_grad(&[p]);
        Ok(self.push(
            Tensor::scalar(v as f32),
            Op::FocalLoss {
                p,
                target: target.data().to_vec(),
                params,
            },
            rg,
        ))
    }

    /// Global soft Dice loss with additive smoothing.
    pub fn dice_loss(&mut self, p: VarId, target: &Tensor) -> Result<VarId> {
        self.check_target("dice_loss", p, target)?;
        let v = dice_value(self.value(p).data(), target.data());
        let rg = self.any_grad(&[p]);
        Ok(self.push(
            Tensor::scalar(v as f32),
            Op::DiceLoss {
                p,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    fn check_target(&self, op: &'static str, p: VarId, target: &Tensor) -> Result<()> {
        if self.value(p).shape() != target.shape() {
            return Err(Error::shape(
                op,
                format!("prediction {:?} vs target {:?}", self.value(p).shape(), target.shape()),
            ));
        }
        Ok(())
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let mut acc = |id: VarId, contribution: Vec<f32>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xd = self.dims("conv2d", *x).expect("validated on record");
                let need_dx = self.nodes[x.0].requires_grad;
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x).data(), xd, self.value(*w).data(), g, geom, need_dx);
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, kernel } => {
                let xd = self.dims("conv_transpose2d", *x).expect("validated on record");
                let co = node.value.shape()[1];
                let need_dx = self.nodes[x.0].requires_grad;
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    self.value(*x).data(),
                    xd,
                    self.value(*w).data(),
                    g,
                    co,
                    *kernel,
                    need_dx,
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xd = self.dims("batch_norm", *x).expect("validated on record");
                let (dx, dg, db) =
                    kernels::batchnorm_backward(g, xhat, xd, self.value(*gamma).data(), inv_std, *batch_stats);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::MaxPool { x, argmax } => {
                acc(*x, kernels::maxpool_backward(g, argmax, self.value(*x).numel()));
            }
            Op::Upsample { x, factor } => {
                let xd = self.dims("upsample", *x).expect("validated on record");
                acc(*x, kernels::upsample_bilinear_backward(g, xd, *factor));
            }
            Op::Concat { xs } => {
                let (n, total_c, h, w) = node.value.dims4().expect("validated on record");
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).shape()[1];
                    let mut part = Vec::with_capacity(n * c * plane);
                    for b in 0..n {
                        let start = (b * total_c + offset) * plane;
                        part.extend_from_slice(&g[start..start + c * plane]);
                    }
                    acc(x, part);
                    offset += c;
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Relu { x, active } => {
                acc(*x, g.iter().zip(active).map(|(g, &a)| if a { *g } else { 0.0 }).collect());
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect());
            }
            Op::Dropout { x, mask } => {
                acc(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, weights.iter().map(|w| w * g[0]).collect());
            }
            Op::FocalLoss { p, target, params } => {
                let pv = self.value(*p).data();
                let scale = g[0] as f64 / pv.len() as f64;
                acc(
                    *p,
                    pv.iter()
                        .zip(target)
                        .map(|(&p, &y)| (scale * focal_grad(p, y, *params)) as f32)
                        .collect(),
                );
            }
            Op::DiceLoss { p, target } => {
                let pv = self.value(*p).data();
                let (inter, sy, sp) = dice_sums(pv.iter().map(|&p| p as f64), target);
                let s = sy + sp + DICE_SMOOTH;
                let num = 2.0 * inter + DICE_SMOOTH;
                let g0 = g[0] as f64;
                acc(
                    *p,
                    target
                        .iter()
                        .map(|&y| (g0 * -(2.0 * y as f64 * s - num) / (s * s)) as f32)
                        .collect(),
                );
            }
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn focal_term(p: f64, y: f32, fp: FocalParams) -> f64 {
    let c = fp.clamp as f64;
    let p = p.clamp(c, 1.0 - c);
    let (a, g, y) = (fp.alpha as f64, fp.gamma as f64, y as f64);
    -y * a * (1.0 - p).powf(g) * p.ln() - (1.0 - y) * a * p.powf(g) * (1.0 - p).ln()
}

fn focal_grad(p: f32, y: f32, fp: FocalParams) -> f64 {
    let c = fp.clamp as f64;
    let p64 = p as f64;
    if p64 < c || p64 > 1.0 - c {
        return 0.0;
    }
    let (a, g, y) = (fp.alpha as f64, fp.gamma as f64, y as f64);
    let q = 1.0 - p64;
    // γ·t^(γ-1) with the γ = 0 case spelled out to avoid 0·∞.
    let dpow = |t: f64| if g == 0.0 { 0.0 } else { g * t.powf(g - 1.0) };
    let pos = -a * (-dpow(q) * p64.ln() + q.powf(g) / p64);
    let neg = -a * (dpow(p64) * q.ln() - p64.powf(g) / q);
    y * pos + (1.0 - y) * neg
}

pub(crate) fn focal_value(p: &[f32], y: &[f32], fp: FocalParams) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    focal_value_f64(p.iter().map(|&p| p as f64), y, fp)
}

/// Mean focal loss of double-precision probabilities.
pub(crate) fn focal_value_f64(p: impl ExactSizeIterator<Item = f64>, y: &[f32], fp: FocalParams) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    p.zip(y).map(|(p, &y)| focal_term(p, y, fp)).sum::<f64>() / n as f64
}

fn dice_sums(p: impl Iterator<Item = f64>, y: &[f32]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sy = 0.0;
    let mut sp = 0.0;
    for (p, &y) in p.zip(y) {
        inter += p * y as f64;
        sy += y as f64;
        sp += p;
    }
    (inter, sy, sp)
}

pub(crate) fn dice_value(p: &[f32], y: &[f32]) -> f64 {
    dice_value_f64(p.iter().map(|&p| p as f64), y)
}

/// Dice loss of double-precision probabilities.
pub(crate) fn dice_value_f64(p: impl Iterator<Item = f64>, y: &[f32]) -> f64 {
    let (inter, sy, sp) = dice_sums(p, y);
    1.0 - (2.0 * inter + DICE_SMOOTH) / (sy + sp + DICE_SMOOTH)
}
