//! Finite-difference checks of every differentiable primitive against
//! straightforward double-precision reference implementations.
//!
//! Each check draws random inputs (at most 1×4×8×8), records the primitive on
//! a tape, reduces its output with random weights to a scalar and compares
//! the back-propagated input gradients with central differences of the same
//! reduction evaluated through the reference implementation.

use dualskip_core::gradcheck::{relative_error, EPSILON};
use dualskip_core::{FocalParams, Tape, Tensor, VarId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Input {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl Input {
    fn tensor(&self) -> Tensor {
        Tensor::from_values(&self.shape, self.values.clone()).unwrap()
    }
}

/// Outcome of one primitive over all seeds.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// Largest disagreement between the primitive's forward value and the
    /// reference, relative to the reference's magnitude.
    pub max_forward_error: f64,
}

type TapeFn<'a> = dyn Fn(&mut Tape, &[VarId]) -> VarId + 'a;
type RefFn<'a> = dyn Fn(&[Vec<f64>]) -> Vec<f64> + 'a;

/// Compares analytic and numeric gradients of `Σ w · f(inputs)` for every
/// coordinate of every input. Returns `(max relative gradient error, max
/// forward error)`.
pub fn check(inputs: &[Input], rng: &mut ChaCha8Rng, on_tape: &TapeFn, reference: &RefFn) -> (f64, f64) {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|i| tape.leaf(i.tensor(), true)).collect();
    let out = on_tape(&mut tape, &ids);
    let n_out = tape.value(out).numel();
    let weights: Vec<f32> = if n_out == 1 {
        vec![1.0]
    } else {
        (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let loss = tape.weighted_sum(out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let point: Vec<Vec<f64>> = inputs
        .iter()
        .map(|i| i.values.iter().map(|&v| v as f64).collect())
        .collect();
    let expected = reference(&point);
    assert_eq!(expected.len(), n_out, "reference output size");
    let scale = expected.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let forward_error = expected
        .iter()
        .zip(tape.value(out).data())
        .map(|(e, &a)| (e - a as f64).abs() / scale)
        .fold(0.0, f64::max);

    let objective = |p: &[Vec<f64>]| -> f64 {
        reference(p)
            .iter()
            .zip(&weights)
            .map(|(y, &w)| y * w as f64)
            .sum()
    };
    let h = EPSILON as f64;
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        let analytic = grads.slice(id).expect("every input requires a gradient");
        for j in 0..point[k].len() {
            let mut p = point.clone();
            p[k][j] += h;
            let plus = objective(&p);
            p[k][j] -= 2.0 * h;
            let minus = objective(&p);
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[j] as f64, numeric));
        }
    }
    (worst, forward_error)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Input {
    let n = shape.iter().product();
    Input {
        shape: shape.to_vec(),
        values: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    }
}

/// Values bounded away from zero by more than the finite-difference step so
/// that no central difference straddles the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    let mut i = uniform(rng, shape, -2.0, 2.0);
    for v in &mut i.values {
        while v.abs() < 4.0 * EPSILON {
            *v = rng.gen_range(-2.0..2.0);
        }
    }
    i
}

/// Distinct values on a grid of spacing 0.01, so every pooling window has a
/// unique maximum with a margin larger than the finite-difference step.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    Input {
        shape: shape.to_vec(),
        values: ranks.iter().map(|&r| (r as f32 - n as f32 / 2.0) * 0.01).collect(),
    }
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect()
}

fn small_shape(rng: &mut ChaCha8Rng, even: bool) -> [usize; 4] {
    let side = |rng: &mut ChaCha8Rng| {
        if even {
            2 * rng.gen_range(1..=4)
        } else {
            rng.gen_range(1..=8)
        }
    };
    [1, rng.gen_range(1..=4), side(rng), side(rng)]
}

fn idx(shape: &[usize], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + y) * shape[3] + x
}

fn ref_conv(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    co: usize,
    k: usize,
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let os = [n, co, oh, ow];
    let mut y = vec![0.0; n * co * oh * ow];
    for b_ in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for u in 0..k {
                            for v in 0..k {
                                let yy = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                s += x[idx(xs, b_, c, yy as usize, xx as usize)] * w[((o * ci + c) * k + u) * k + v];
                            }
                        }
                    }
                    y[idx(&os, b_, o, i, j)] = s;
                }
            }
        }
    }
    (y, os)
}

fn conv(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let xs = small_shape(rng, false);
    let k = *[1usize, 3].choose(rng).unwrap();
    let pad = if k == 3 { rng.gen_range(0..=1) } else { 0 };
    let stride = rng.gen_range(1..=2);
    if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
        return (0.0, 0.0);
    }
    let co = rng.gen_range(1..=4);
    let x = uniform(rng, &xs, -1.0, 1.0);
    let w = uniform(rng, &[co, xs[1], k, k], -1.0, 1.0);
    let b = uniform(rng, &[co], -1.0, 1.0);
    check(
        &[x, w, b],
        rng,
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap(),
        &|p| ref_conv(&p[0], &xs, &p[1], co, k, Some(&p[2]), stride, pad).0,
    )
}

fn conv_transpose(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let xs = small_shape(rng, false);
    let k = rng.gen_range(1..=2);
    let co = rng.gen_range(1..=4);
    let x = uniform(rng, &xs, -1.0, 1.0);
    let w = uniform(rng, &[xs[1], co, k, k], -1.0, 1.0);
    let b = uniform(rng, &[co], -1.0, 1.0);
    let reference = move |p: &[Vec<f64>]| {
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let os = [n, co, h * k, wd * k];
        let mut y = vec![0.0; os.iter().product()];
        for b_ in 0..n {
            for o in 0..co {
                for i in 0..h * k {
                    for j in 0..wd * k {
                        let mut s = p[2][o];
                        for c in 0..ci {
                            s += p[0][idx(&xs, b_, c, i / k, j / k)] * p[1][((c * co + o) * k + i % k) * k + j % k];
                        }
                        y[idx(&os, b_, o, i, j)] = s;
                    }
                }
            }
        }
        y
    };
    check(
        &[x, w, b],
        rng,
        &|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2])).unwrap(),
        &reference,
    )
}

fn ref_batch_norm(x: &[f64], xs: &[usize], g: &[f64], b: &[f64], stats: Option<(&[f64], &[f64])>) -> Vec<f64> {
    let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b_| x[(b_ * c + ch) * plane..(b_ * c + ch + 1) * plane].iter().copied())
            .collect();
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                (m, vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64)
            }
        };
        for b_ in 0..n {
            for i in 0..plane {
                let j = (b_ * c + ch) * plane + i;
                y[j] = (x[j] - mean) / (var + BN_EPS).sqrt() * g[ch] + b[ch];
            }
        }
    }
    y
}

fn batch_norm_train(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut xs = small_shape(rng, false);
    xs[2] = xs[2].max(2);
    let x = uniform(rng, &xs, -2.0, 2.0);
    let g = uniform(rng, &[xs[1]], 0.5, 1.5);
    let b = uniform(rng, &[xs[1]], -1.0, 1.0);
    check(
        &[x, g, b],
        rng,
        &|t, v| t.batch_norm(v[0], v[1], v[2], None, BN_EPS as f32).unwrap().0,
        &|p| ref_batch_norm(&p[0], &xs, &p[1], &p[2], None),
    )
}

fn batch_norm_eval(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let xs = small_shape(rng, false);
    let c = xs[1];
    let x = uniform(rng, &xs, -2.0, 2.0);
    let g = uniform(rng, &[c], 0.5, 1.5);
    let b = uniform(rng, &[c], -1.0, 1.0);
    let mean: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f32> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    let (m64, v64): (Vec<f64>, Vec<f64>) = (
        mean.iter().map(|&v| v as f64).collect(),
        var.iter().map(|&v| v as f64).collect(),
    );
    check(
        &[x, g, b],
        rng,
        &|t, v| t.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), BN_EPS as f32).unwrap().0,
        &|p| ref_batch_norm(&p[0], &xs, &p[1], &p[2], Some((&m64, &v64))),
    )
}

fn max_pool(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let xs = small_shape(rng, true);
    let x = distinct(rng, &xs);
    let reference = move |p: &[Vec<f64>]| {
        let os = [xs[0], xs[1], xs[2] / 2, xs[3] / 2];
        let mut y = vec![f64::NEG_INFINITY; os.iter().product()];
        for c in 0..xs[1] {
            for i in 0..xs[2] {
                for j in 0..xs[3] {
                    let o = idx(&os, 0, c, i / 2, j / 2);
                    y[o] = y[o].max(p[0][idx(&xs, 0, c, i, j)]);
                }
            }
        }
        y
    };
    check(&[x], rng, &|t, v| t.max_pool(v[0], 2).unwrap(), &reference)
}

fn upsample(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let xs = small_shape(rng, false);
    let f = *[2usize, 4].choose(rng).unwrap();
    let x = uniform(rng, &xs, -1.0, 1.0);
    let reference = move |p: &[Vec<f64>]| {
        let (h, w) = (xs[2], xs[3]);
        let os = [xs[0], xs[1], h * f, w * f];
        let coord = |o: usize, size: usize| {
            let s = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (size - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(size - 1), s - i0 as f64)
        };
        let mut y = vec![0.0; os.iter().product()];
        for c in 0..xs[1] {
            for i in 0..h * f {
                let (y0, y1, ty) = coord(i, h);
                for j in 0..w * f {
                    let (x0, x1, tx) = coord(j, w);
                    let at = |a: usize, b: usize| p[0][idx(&xs, 0, c, a, b)];
                    y[idx(&os, 0, c, i, j)] = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
                        + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1));
                }
            }
        }
        y
    };
    check(&[x], rng, &|t, v| t.upsample(v[0], f).unwrap(), &reference)
}

fn concat(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let s = small_shape(rng, false);
    let c2 = rng.gen_range(1..=3);
    let a = uniform(rng, &s, -1.0, 1.0);
    let b = uniform(rng, &[1, c2, s[2], s[3]], -1.0, 1.0);
    // The first input is used twice, so its gradient must be the sum of both
    // consumers' contributions.
    check(
        &[a, b],
        rng,
        &|t, v| t.concat(&[v[0], v[1], v[0]]).unwrap(),
        &|p| [p[0].clone(), p[1].clone(), p[0].clone()].concat(),
    )
}

fn add(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let s = small_shape(rng, false);
    let a = uniform(rng, &s, -1.0, 1.0);
    let b = uniform(rng, &s, -1.0, 1.0);
    check(
        &[a, b],
        rng,
        &|t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            t.add(s, v[0]).unwrap()
        },
        &|p| p[0].iter().zip(&p[1]).map(|(a, b)| 2.0 * a + b).collect(),
    )
}

fn relu(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let s = small_shape(rng, false);
    let x = away_from_zero(rng, &s);
    check(&[x], rng, &|t, v| t.relu(v[0]), &|p| p[0].iter().map(|v| v.max(0.0)).collect())
}

fn sigmoid(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let s = small_shape(rng, false);
    let x = uniform(rng, &s, -6.0, 6.0);
    check(
        &[x],
        rng,
        &|t, v| t.sigmoid(v[0]),
        &|p| p[0].iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
    )
}

fn dropout(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let s = small_shape(rng, false);
    let x = uniform(rng, &s, -1.0, 1.0);
    let seed = rng.gen();
    // The mask is read off by dropping out a tensor of ones with the same seed.
    let mut probe = Tape::new();
    let ones = probe.leaf(Tensor::full(&s, 1.0).unwrap(), false);
    let m = probe.dropout(ones, 0.5, seed).unwrap();
    let mask: Vec<f64> = probe.value(m).data().iter().map(|&v| v as f64).collect();
    assert!(mask.iter().all(|&v| v == 0.0 || v == 2.0));
    check(
        &[x],
        rng,
        &|t, v| t.dropout(v[0], 0.5, seed).unwrap(),
        &|p| p[0].iter().zip(&mask).map(|(a, m)| a * m).collect(),
    )
}

fn focal_ref(p: &[f64], y: &[f32], fp: FocalParams) -> f64 {
    let (a, g) = (fp.alpha as f64, fp.gamma as f64);
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            if y > 0.5 {
                -a * (1.0 - p).powf(g) * p.ln()
            } else {
                -a * p.powf(g) * (1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / p.len() as f64
}

fn dice_ref(p: &[f64], y: &[f32]) -> f64 {
    let inter: f64 = p.iter().zip(y).map(|(p, &y)| p * y as f64).sum();
    let total: f64 = p.iter().sum::<f64>() + y.iter().map(|&v| v as f64).sum::<f64>();
    1.0 - (2.0 * inter + 1.0) / (total + 1.0)
}

fn probabilities(rng: &mut ChaCha8Rng) -> (Input, Tensor) {
    let s = small_shape(rng, false);
    let p = uniform(rng, &[s[0], 1, s[2], s[3]], 0.02, 0.98);
    let y = Tensor::from_values(&p.shape, binary(rng, p.values.len())).unwrap();
    (p, y)
}

fn focal(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (p, y) = probabilities(rng);
    let fp = FocalParams {
        gamma: *[0.0f32, 1.0, 2.0].choose(rng).unwrap(),
        ..FocalParams::default()
    };
    let yv = y.data().to_vec();
    check(
        &[p],
        rng,
        &|t, v| t.focal_loss(v[0], &y, fp).unwrap(),
        &|p| vec![focal_ref(&p[0], &yv, fp)],
    )
}

fn dice(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (p, y) = probabilities(rng);
    let yv = y.data().to_vec();
    check(
        &[p],
        rng,
        &|t, v| t.dice_loss(v[0], &y).unwrap(),
        &|p| vec![dice_ref(&p[0], &yv)],
    )
}

fn hybrid(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let (p, y) = probabilities(rng);
    let yv = y.data().to_vec();
    let fp = FocalParams::default();
    check(
        &[p],
        rng,
        &|t, v| dualskip_core::loss::hybrid_on_tape(t, v[0], &y, fp).unwrap(),
        &|p| vec![focal_ref(&p[0], &yv, fp) + dice_ref(&p[0], &yv)],
    )
}

type Primitive = fn(&mut ChaCha8Rng) -> (f64, f64);

pub const PRIMITIVES: &[(&str, Primitive)] = &[
    ("conv2d", conv),
    ("conv_transpose2d", conv_transpose),
    ("batch_norm (batch statistics)", batch_norm_train),
    ("batch_norm (running statistics)", batch_norm_eval),
    ("max_pool", max_pool),
    ("upsample_bilinear", upsample),
    ("concat", concat),
    ("add", add),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("dropout", dropout),
    ("binary focal loss", focal),
    ("dice loss", dice),
    ("hybrid loss", hybrid),
];

/// Runs every primitive for `seeds` random draws.
pub fn run_all(seeds: u64) -> Vec<Outcome> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, &(name, f))| {
            let mut out = Outcome {
                name,
                max_rel_error: 0.0,
                max_forward_error: 0.0,
            };
            for seed in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 131 + i as u64);
                let (g, fwd) = f(&mut rng);
                out.max_rel_error = out.max_rel_error.max(g);
                out.max_forward_error = out.max_forward_error.max(fwd);
            }
            out
        })
        .collect()
}
