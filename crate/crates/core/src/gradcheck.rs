//! Finite-difference verification of network gradients.
//!
//! For every trainable parameter tensor two probes are compared against
//! back-propagation:
//!
//! * a directional derivative along a ±1 direction over up to
//!   [`DIRECTION_SUPPORT`] randomly chosen coordinates, signed like the
//!   analytic gradient, and
//! * the partial derivative of the coordinate with the largest analytic
//!   gradient.
//!
//! Keeping the direction sparse keeps the total step short: stepping every
//! coordinate of a large tensor at once moves batch-norm statistics far
//! enough for curvature to show up in the difference quotient.
//!
//! Numeric derivatives are central differences with step [`EPSILON`] on the
//! hybrid loss. The relative error of an analytic value `a` against a numeric
//! value `n` is `|a − n| / max(|a|, |n|, FLOOR)`; the floor keeps derivatives
//! that are zero in exact arithmetic (for instance a convolution bias that
//! feeds a training-mode batch norm) from turning rounding noise into huge
//! ratios.
//!
//! ReLU and max-pool make the loss piecewise smooth, and in a network of any
//! size the pieces are narrow: moving a single weight by `1e-3` typically
//! flips several ReLUs somewhere downstream, so a plain central difference
//! averages slopes from neighbouring pieces. The perturbed evaluations
//! therefore replay the [`ActivationPattern`] recorded at the unperturbed
//! point. That function coincides with the network on the piece containing
//! the point, is smooth, and has exactly the gradient back-propagation claims
//! to compute, so every backward formula and all of the wiring between
//! layers are still exercised.
//!
//! The perturbed losses are computed from the network's logits with the
//! final sigmoid in double precision, so that probabilities close to 0 or 1
//! do not turn single-precision rounding into difference-quotient noise.
//!
//! In training mode a batch norm with batch statistics removes any constant
//! per-channel shift of its input, so the bias of a convolution feeding it
//! (and any parameter acting only through such a shift) has a gradient that
//! is zero in exact arithmetic. Its difference quotient is pure rounding
//! noise, so such tensors are not probed but listed in
//! [`Report::vanishing`]; running the check with [`Mode::Eval`] covers them.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::LayerKind;
use crate::autograd::{ActivationPattern, FocalParams, Tape};
use crate::error::Result;
use crate::loss::hybrid_on_tape;
use crate::model::{Mode, Model};
use crate::tensor::Tensor;

pub const EPSILON: f32 = 1e-3;
pub const FLOOR: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-2;
pub const DIRECTION_SUPPORT: usize = 16;
/// A tensor whose analytic gradient is below this fraction of the largest
/// gradient anywhere in the model is treated as identically zero.
pub const VANISHING: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug)]
pub struct Probe {
    /// Parameter name, suffixed with `[dir]` or `[index]`.
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct Report {
    pub probes: Vec<Probe>,
    /// Parameter tensors skipped because their gradient vanishes exactly.
    pub vanishing: Vec<String>,
}

impl Report {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < TOLERANCE
    }
}

/// Checks every trainable parameter of `model` in training mode (batch
/// statistics, dropout masks fixed by `seed`). The model's values are
/// restored before returning.
pub fn check_model(model: &mut Model, input: &Tensor, target: &Tensor, focal: FocalParams, seed: u64) -> Result<Report> {
    check_model_with(model, input, target, focal, Mode::Train { seed }, EPSILON)
}

/// Checks every trainable parameter with batch norms using running
/// statistics (and dropout off), after setting those statistics to the ones
/// a training pass on `input` sees. Without that step the freshly initialised
/// running statistics would not match the activations and the output would
/// saturate. Works on a copy; `model` is not modified.
pub fn check_model_eval(model: &Model, input: &Tensor, target: &Tensor, focal: FocalParams, seed: u64) -> Result<Report> {
    let mut model = model.clone();
    adopt_batch_statistics(&mut model, input, seed)?;
    check_model_with(&mut model, input, target, focal, Mode::Eval, EPSILON)
}

/// Overwrites every running mean and (biased) variance with the statistics
/// of a training-mode pass over `input`.
pub fn adopt_batch_statistics(model: &mut Model, input: &Tensor, seed: u64) -> Result<()> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, input, Mode::Train { seed }, false)?;
    let params = model.params_mut().params_mut();
    for (slot, stats) in &pass.bn_stats {
        for (dst, src) in [(*slot, &stats.mean), (slot + 1, &stats.var)] {
            for (d, &v) in params[dst].value.data_mut().iter_mut().zip(src) {
                *d = v as f32;
            }
        }
    }
    Ok(())
}

/// [`check_model`] with an explicit forward mode and finite-difference step.
pub fn check_model_with(
    model: &mut Model,
    input: &Tensor,
    target: &Tensor,
    focal: FocalParams,
    mode: Mode,
    step: f32,
) -> Result<Report> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, input, mode, true)?;
    let loss = hybrid_on_tape(&mut tape, pass.output, target, focal)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f32>>> = pass
        .param_vars
        .iter()
        .map(|&v| grads.slice(v).map(<[f32]>::to_vec))
        .collect();
    let pattern = tape.pattern();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(match mode {
        Mode::Train { seed } => seed ^ 0xD1CE,
        Mode::Eval => 0xD1CE,
    });
    let mut ctx = Context {
        model,
        input,
        target,
        focal,
        mode,
        step,
        pattern,
    };
    let largest = analytic
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs() as f64));
    let mut probes = Vec::new();
    let mut vanishing = Vec::new();
    for (i, g) in analytic.iter().enumerate() {
        let Some(g) = g else { continue };
        let name = ctx.model.params().params()[i].name.clone();
        if g.iter().all(|&v| (v.abs() as f64) <= VANISHING * largest) {
            vanishing.push(name);
            continue;
        }
        let original = ctx.model.params().params()[i].value.clone();

        let support = sample(&mut rng, g.len(), g.len().min(DIRECTION_SUPPORT)).into_vec();
        // Signs follow the analytic gradient so the probed derivative is as
        // large as possible relative to rounding noise; zero entries get a
        // random sign.
        let signs: Vec<f32> = support
            .iter()
            .map(|&k| match g[k] {
                v if v > 0.0 => 1.0,
                v if v < 0.0 => -1.0,
                _ if rng.gen::<bool>() => 1.0,
                _ => -1.0,
            })
            .collect();
        let a: f64 = support.iter().zip(&signs).map(|(&k, &d)| g[k] as f64 * d as f64).sum();
        let n = ctx.central_difference(i, &original, |v, s| {
            for (&k, &d) in support.iter().zip(&signs) {
                v[k] += s * d;
            }
        })?;
        probes.push(make_probe(format!("{name}[dir]"), a, n));

        let (k, &gk) = g
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .expect("parameter tensors are non-empty");
        let n = ctx.central_difference(i, &original, |v, s| v[k] += s)?;
        probes.push(make_probe(format!("{name}[{k}]"), gk as f64, n));
    }
    Ok(Report { probes, vanishing })
}

fn make_probe(name: String, analytic: f64, numeric: f64) -> Probe {
    Probe {
        name,
        analytic,
        numeric,
        rel_error: relative_error(analytic, numeric),
    }
}

struct Context<'a> {
    model: &'a mut Model,
    input: &'a Tensor,
    target: &'a Tensor,
    focal: FocalParams,
    mode: Mode,
    step: f32,
    pattern: ActivationPattern,
}

impl Context<'_> {
    fn loss(&self) -> Result<f64> {
        let mut tape = Tape::with_pattern(self.pattern.clone());
        let pass = self.model.forward(&mut tape, self.input, self.mode, false)?;
        // The final sigmoid and the loss are evaluated in double precision:
        // single-precision probabilities near 0 or 1 are coarse enough for
        // their rounding to dominate a difference quotient.
        let graph = self.model.graph();
        let out = graph.node(graph.output().expect("built graphs are non-empty"));
        match (&out.kind, out.inputs.as_slice()) {
            (LayerKind::Sigmoid, &[logits]) => {
                crate::loss::hybrid_from_logits(tape.value(pass.node_vars[logits.0]), self.target, self.focal)
            }
            _ => crate::loss::hybrid(tape.value(pass.output), self.target, self.focal),
        }
    }

    fn central_difference(&mut self, index: usize, original: &Tensor, perturb: impl Fn(&mut [f32], f32)) -> Result<f64> {
        let step = self.step;
        let mut eval = |delta: f32| -> Result<f64> {
            let p = &mut self.model.params_mut().params_mut()[index].value;
            p.data_mut().copy_from_slice(original.data());
            perturb(p.data_mut(), delta);
            self.loss()
        };
        let plus = eval(step)?;
        let minus = eval(-step)?;
        self.model.params_mut().params_mut()[index]
            .value
            .data_mut()
            .copy_from_slice(original.data());
        Ok((plus - minus) / (2.0 * step as f64))
    }
}

/// Deterministic random input in `[0, 1)` and a random binary target for a
/// gradient check.
pub fn random_problem(channels: usize, size: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f32> = (0..channels * size * size).map(|_| rng.gen()).collect();
    let y: Vec<f32> = (0..size * size).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
    Ok((
        Tensor::from_values(&[1, channels, size, size], x)?,
        Tensor::from_values(&[1, 1, size, size], y)?,
    ))
}
