//! Training: RMSProp, plateau learning-rate schedule, the epoch loop,
//! checkpoints and the CSV training log.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::arch::{build, ArchSpec};
use crate::autograd::{FocalParams, Tape};
use crate::config::FlatConfig;
use crate::data::{batches, shuffled_order, Sample};
use crate::error::{Error, Result};
use crate::loss::hybrid_on_tape;
use crate::metrics::{Confusion, Metrics};
use crate::model::{Mode, Model, ParamStore};
use crate::tensor::Tensor;

/// Optimisation and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub rms_epsilon: f64,
    /// Multiplier applied to the learning rate on a plateau.
    pub plateau_factor: f64,
    /// Epochs without improvement before the learning rate is reduced.
    pub plateau_patience: usize,
    /// Minimum decrease of the monitored loss that counts as improvement.
    pub plateau_min_delta: f64,
    /// Training stops instead of reducing below this learning rate.
    pub min_learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub focal: FocalParams,
    /// Probability at or above which a pixel is predicted positive.
    pub threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            rms_decay: 0.9,
            rms_epsilon: 1e-7,
            plateau_factor: 0.1,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            min_learning_rate: 1e-6,
            batch_size: 16,
            max_steps: 60_000,
            max_epochs: usize::MAX,
            seed: 0,
            focal: FocalParams::default(),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub const CONFIG_KEYS: &'static [&'static str] = &[
        "learning_rate",
        "rms_decay",
        "rms_epsilon",
        "plateau_factor",
        "plateau_patience",
        "plateau_min_delta",
        "min_learning_rate",
        "batch_size",
        "max_steps",
        "max_epochs",
        "seed",
        "focal_alpha",
        "focal_gamma",
        "threshold",
    ];

    /// Overrides defaults with any of [`Self::CONFIG_KEYS`] present in `c`.
    pub fn from_config(c: &FlatConfig) -> Result<Self> {
        let mut t = TrainConfig::default();
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = c.get_parsed($key)? {
                    $field = v;
                }
            };
        }
        take!("learning_rate", t.learning_rate);
        take!("rms_decay", t.rms_decay);
        take!("rms_epsilon", t.rms_epsilon);
        take!("plateau_factor", t.plateau_factor);
        take!("plateau_patience", t.plateau_patience);
        take!("plateau_min_delta", t.plateau_min_delta);
        take!("min_learning_rate", t.min_learning_rate);
        take!("batch_size", t.batch_size);
        take!("max_steps", t.max_steps);
        take!("max_epochs", t.max_epochs);
        take!("seed", t.seed);
        take!("focal_alpha", t.focal.alpha);
        take!("focal_gamma", t.focal.gamma);
        take!("threshold", t.threshold);
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.rms_decay) || !(self.rms_epsilon > 0.0) {
            return bad("rms_decay must be in [0, 1) and rms_epsilon positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must be in (0, 1)");
        }
        if self.plateau_patience == 0 || self.batch_size == 0 {
            return bad("plateau_patience and batch_size must be positive");
        }
        if !(self.focal.alpha >= 0.0) || !(self.focal.gamma >= 0.0) {
            return bad("focal_alpha and focal_gamma must be non-negative");
        }
        Ok(())
    }
}

/// RMSProp: `s ← ρ·s + (1 − ρ)·g²`, `p ← p − lr·g / (√s + ε)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub decay: f64,
    pub epsilon: f64,
    /// Squared-gradient averages, one per parameter; empty for
    /// non-trainable ones.
    pub accum: Vec<Vec<f32>>,
}

impl RmsProp {
    pub fn new(params: &ParamStore, decay: f64, epsilon: f64) -> Self {
        let accum = params
            .params()
            .iter()
            .map(|p| {
                if p.role.trainable() {
                    vec![0.0; p.value.numel()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        RmsProp { decay, epsilon, accum }
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i`, or
    /// `None` to leave it untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&[f32]>], lr: f64) {
        let rho = self.decay as f32;
        let eps = self.epsilon as f32;
        let lr = lr as f32;
        for ((p, s), g) in params.params_mut().iter_mut().zip(&mut self.accum).zip(grads) {
            let Some(g) = g else { continue };
            if !p.role.trainable() {
                continue;
            }
            for ((w, s), &g) in p.value.data_mut().iter_mut().zip(s.iter_mut()).zip(g.iter()) {
                *s = rho * *s + (1.0 - rho) * g * g;
                *w -= lr * g / (s.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlateauAction {
    Improved,
    Waiting,
    Reduced(f64),
    Stop,
}

/// Reduce-on-plateau schedule on a monitored loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    initial: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    min_lr: f64,
    reductions: u32,
    best: f64,
    wait: usize,
}

impl Plateau {
    pub fn new(cfg: &TrainConfig) -> Self {
        Plateau {
            initial: cfg.learning_rate,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            min_delta: cfg.plateau_min_delta,
            min_lr: cfg.min_learning_rate,
            reductions: 0,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    fn rate_after(&self, reductions: u32) -> f64 {
        self.initial * self.factor.powi(reductions as i32)
    }

    pub fn learning_rate(&self) -> f64 {
        self.rate_after(self.reductions)
    }

    pub fn reductions(&self) -> u32 {
        self.reductions
    }

    /// Restores a schedule that had already reduced `reductions` times.
    pub fn resume(&mut self, reductions: u32) {
        self.reductions = reductions;
    }

    /// Feeds one epoch's monitored loss.
    pub fn observe(&mut self, loss: f64) -> PlateauAction {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
            return PlateauAction::Improved;
        }
        self.wait += 1;
        if self.wait < self.patience {
            return PlateauAction::Waiting;
        }
        self.wait = 0;
        let next = self.rate_after(self.reductions + 1);
        // Relative slack so that 1e-4·0.1² is not judged below 1e-6.
        if next < self.min_lr * (1.0 - 1e-9) {
            return PlateauAction::Stop;
        }
        self.reductions += 1;
        PlateauAction::Reduced(next)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// `NaN` when there is no validation set.
    pub val_loss: f64,
    pub val_metrics: Metrics,
}

pub const CSV_HEADER: &str = "epoch,step,lr,train_loss,val_loss,val_p,val_r,val_iou,val_f1";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let m = self.val_metrics.as_array();
        format!(
            "{},{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.step, self.lr, self.train_loss, self.val_loss, m[0], m[1], m[2], m[3]
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    StepLimit,
    EpochLimit,
    LearningRateFloor,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<EpochLog>,
    pub steps: usize,
    pub stop: StopReason,
    pub schedule: Plateau,
}

/// Mutable training state carried across epochs and through checkpoints.
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: RmsProp,
    pub schedule: Plateau,
    pub step: usize,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: &Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: RmsProp::new(model.params(), config.rms_decay, config.rms_epsilon),
            schedule: Plateau::new(&config),
            config,
            step: 0,
            epoch: 0,
        })
    }

    /// One optimisation step on a batch; returns the batch loss.
    pub fn train_step(&mut self, model: &mut Model, images: &Tensor, masks: &Tensor) -> Result<f64> {
        self.step += 1;
        let mut tape = Tape::new();
        let mode = Mode::Train {
            seed: mix(self.config.seed, self.step as u64),
        };
        let pass = model.forward(&mut tape, images, mode, true)?;
        let loss = hybrid_on_tape(&mut tape, pass.output, masks, self.config.focal)?;
        let value = tape.value(loss).item()? as f64;
        if !value.is_finite() {
            let node = model
                .first_non_finite(&tape, &pass)
                .unwrap_or_else(|| "loss".to_string());
            return Err(Error::Diverged { node, step: self.step });
        }
        let grads = tape.backward(loss)?;
        let per_param: Vec<Option<&[f32]>> = pass.param_vars.iter().map(|&v| grads.slice(v)).collect();
        self.optimizer
            .step(model.params_mut(), &per_param, self.schedule.learning_rate());
        model.apply_batch_stats(&pass.bn_stats);
        Ok(value)
    }

    /// Runs epochs until a stop condition. `on_epoch` sees each finished
    /// epoch (for logging and checkpointing).
    pub fn fit(
        &mut self,
        model: &mut Model,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&EpochLog, &Model, &Trainer) -> Result<()>,
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        let mut history = Vec::new();
        let stop = loop {
            if self.step >= self.config.max_steps {
                break StopReason::StepLimit;
            }
            if self.epoch >= self.config.max_epochs {
                break StopReason::EpochLimit;
            }
            self.epoch += 1;
            let lr = self.schedule.learning_rate();
            let order = shuffled_order(train.len(), mix(self.config.seed, 0x5eed_0000 + self.epoch as u64));
            let (mut loss_sum, mut seen) = (0.0, 0usize);
            for batch in batches(train, &order, self.config.batch_size) {
                let batch = batch?;
                let n = batch.names.len();
                loss_sum += self.train_step(model, &batch.images, &batch.masks)? * n as f64;
                seen += n;
                if self.step >= self.config.max_steps {
                    break;
                }
            }
            let train_loss = loss_sum / seen as f64;
            let (val_loss, val_metrics) = if val.is_empty() {
                (f64::NAN, Metrics::default())
            } else {
                evaluate(model, val, self.config.batch_size, self.config.focal, self.config.threshold)?
            };
            let log = EpochLog {
                epoch: self.epoch,
                step: self.step,
                lr,
                train_loss,
                val_loss,
                val_metrics,
            };
            on_epoch(&log, model, self)?;
            history.push(log);
            let monitored = if val.is_empty() { train_loss } else { val_loss };
            if self.schedule.observe(monitored) == PlateauAction::Stop {
                break StopReason::LearningRateFloor;
            }
        };
        Ok(TrainReport {
            history,
            steps: self.step,
            stop,
            schedule: self.schedule.clone(),
        })
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Eval-mode loss (averaged over samples) and pooled pixel metrics.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    batch_size: usize,
    focal: FocalParams,
    threshold: f32,
) -> Result<(f64, Metrics)> {
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut conf = Confusion::default();
    let (mut loss_sum, mut seen) = (0.0, 0usize);
    for batch in batches(samples, &order, batch_size) {
        let batch = batch?;
        let pred = model.predict(&batch.images)?;
        let n = batch.names.len();
        loss_sum += crate::loss::hybrid(&pred, &batch.masks, focal)? * n as f64;
        seen += n;
        conf.merge(&Confusion::from_predictions(&pred, &batch.masks, threshold)?);
    }
    let loss = if seen == 0 { f64::NAN } else { loss_sum / seen as f64 };
    Ok((loss, conf.metrics()))
}

/// Writes the training log.
pub struct CsvLog<W: Write> {
    out: W,
}

impl<W: Write> CsvLog<W> {
    pub fn new(mut out: W) -> std::io::Result<Self> {
        writeln!(out, "{CSV_HEADER}")?;
        Ok(CsvLog { out })
    }

    pub fn row(&mut self, log: &EpochLog) -> std::io::Result<()> {
        writeln!(self.out, "{}", log.csv_row())?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u32 = 1;
const STATE_TENSOR: &str = "trainer.state";
const OPT_PREFIX: &str = "optimizer.rms.";

/// Everything a checkpoint restores.
pub struct Restored {
    pub model: Model,
    /// Present when the checkpoint was written with training state.
    pub optimizer: Option<RmsProp>,
    pub step: usize,
    pub epoch: usize,
    pub lr_reductions: u32,
}

/// Binary checkpoint: magic, version, architecture text, tensor count, then
/// for each tensor its name length and bytes, rank, dimensions and
/// little-endian `f32` values. All integers are little-endian `u32`.
pub fn save_checkpoint(path: &Path, model: &Model, trainer: Option<&Trainer>) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor)> = model
        .params()
        .params()
        .iter()
        .map(|p| (p.name.clone(), &p.value))
        .collect();
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    if let Some(t) = trainer {
        for (p, acc) in model.params().params().iter().zip(&t.optimizer.accum) {
            if !acc.is_empty() {
                owned.push((
                    format!("{OPT_PREFIX}{}", p.name),
                    Tensor::from_values(p.value.shape(), acc.clone())?,
                ));
            }
        }
        owned.push((
            STATE_TENSOR.to_string(),
            Tensor::from_values(
                &[3],
                vec![t.step as f32, t.epoch as f32, t.schedule.reductions() as f32],
            )?,
        ));
    }
    tensors.extend(owned.iter().map(|(n, t)| (n.clone(), t)));

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let arch = model.spec().to_config().to_text();
    w.write_all(MAGIC).map_err(io)?;
    put_u32(&mut w, VERSION).map_err(io)?;
    put_u32(&mut w, arch.len() as u32).map_err(io)?;
    w.write_all(arch.as_bytes()).map_err(io)?;
    put_u32(&mut w, tensors.len() as u32).map_err(io)?;
    for (name, t) in tensors {
        put_u32(&mut w, name.len() as u32).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        put_u32(&mut w, t.rank() as u32).map_err(io)?;
        for &d in t.shape() {
            put_u32(&mut w, d as u32).map_err(io)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a checkpoint. With `expected`, the stored architecture must equal
/// it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ArchSpec>) -> Result<Restored> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let corrupt = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    let rd = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint(format!("{}: truncated", path.display()))
        } else {
            Error::io(path, e)
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(rd)?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = get_u32(&mut r).map_err(rd)?;
    if version != VERSION {
        return Err(Error::Incompatible(format!("format version {version}, expected {VERSION}")));
    }
    let arch_len = get_u32(&mut r).map_err(rd)? as usize;
    let mut arch = vec![0u8; arch_len];
    r.read_exact(&mut arch).map_err(rd)?;
    let arch = String::from_utf8(arch).map_err(|_| corrupt("architecture text is not UTF-8"))?;
    let spec = ArchSpec::from_config(&FlatConfig::parse(&arch)?)?;
    if let Some(exp) = expected {
        if *exp != spec {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} (depth {}, filters {:?}), expected {} (depth {}, filters {:?})",
                spec.label(),
                spec.depth,
                spec.filters,
                exp.label(),
                exp.depth,
                exp.filters
            )));
        }
    }
    let count = get_u32(&mut r).map_err(rd)? as usize;
    let mut stored = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(&mut r).map_err(rd)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(rd)?;
        let name = String::from_utf8(name).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let rank = get_u32(&mut r).map_err(rd)? as usize;
        if rank == 0 || rank > 8 {
            return Err(corrupt("implausible tensor rank"));
        }
        let dims = (0..rank)
            .map(|_| get_u32(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(rd)?;
        let n: usize = dims.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(rd)?;
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        stored.insert(name, Tensor::from_values(&dims, values)?);
    }

    let graph = build(&spec)?;
    let mut params = ParamStore::new(&graph)?;
    for p in params.params_mut() {
        let t = stored
            .remove(&p.name)
            .ok_or_else(|| Error::Incompatible(format!("missing tensor `{}`", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Incompatible(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t;
    }
    let state = stored.remove(STATE_TENSOR);
    let optimizer = if state.is_some() {
        let mut opt = RmsProp::new(&params, 0.0, 0.0);
        for (p, acc) in params.params().iter().zip(opt.accum.iter_mut()) {
            if acc.is_empty() {
                continue;
            }
            let t = stored
                .remove(&format!("{OPT_PREFIX}{}", p.name))
                .ok_or_else(|| Error::Incompatible(format!("missing optimizer state for `{}`", p.name)))?;
            if t.numel() != acc.len() {
                return Err(Error::Incompatible(format!("optimizer state for `{}` has wrong size", p.name)));
            }
            *acc = t.into_data();
        }
        Some(opt)
    } else {
        None
    };
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Incompatible(format!("unexpected tensor `{extra}`")));
    }
    let (step, epoch, lr_reductions) = match state.as_ref().map(|s| s.data().to_vec()) {
        Some(v) if v.len() == 3 => (v[0] as usize, v[1] as usize, v[2] as u32),
        Some(_) => return Err(corrupt("malformed trainer state")),
        None => (0, 0, 0),
    };
    Ok(Restored {
        model: Model::from_parts(graph, params)?,
        optimizer,
        step,
        epoch,
        lr_reductions,
    })
}

impl Trainer {
    /// Continues from a checkpoint written with training state.
    pub fn resume(model: &Model, config: TrainConfig, restored: &Restored) -> Result<Self> {
        let mut t = Trainer::new(model, config)?;
        if let Some(opt) = &restored.optimizer {
            t.optimizer.accum = opt.accum.clone();
        }
        t.step = restored.step;
        t.epoch = restored.epoch;
        t.schedule.resume(restored.lr_reductions);
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Family, Variant};

    #[test]
    fn rmsprop_first_step_by_hand() {
        let spec = ArchSpec::new(Family::UNet, 2, &Variant::Vanilla).unwrap().with_base_filters(1);
        let model = Model::new(&spec, 0).unwrap();
        let mut params = model.params().clone();
        let i = params.find("enc1.c1.conv.bias").unwrap();
        params.params_mut()[i].value.data_mut()[0] = 1.0;
        let mut opt = RmsProp::new(&params, 0.9, 1e-7);
        let mut grads: Vec<Option<&[f32]>> = vec![None; params.len()];
        let g = [1.0f32];
        grads[i] = Some(&g);
        opt.step(&mut params, &grads, 0.1);
        let v = params.params()[i].value.data()[0];
        assert!((v - 0.68377).abs() < 1e-5, "{v}");
        assert!((opt.accum[i][0] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn constant_loss_for_21_epochs_reduces_twice() {
        let mut p = Plateau::new(&TrainConfig::default());
        let reductions = (0..21)
            .filter(|_| matches!(p.observe(0.5), PlateauAction::Reduced(_)))
            .count();
        assert_eq!(reductions, 2);
        assert!((p.learning_rate() - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn schedule_stops_at_the_floor() {
        let mut p = Plateau::new(&TrainConfig::default());
        let mut actions = Vec::new();
        for _ in 0..40 {
            let a = p.observe(1.0);
            actions.push(a);
            if a == PlateauAction::Stop {
                break;
            }
        }
        assert_eq!(actions.last(), Some(&PlateauAction::Stop));
        assert!(p.learning_rate() >= 1e-6 * (1.0 - 1e-9));
        assert_eq!(p.reductions(), 2);
    }

    #[test]
    fn improvement_must_exceed_min_delta() {
        let mut p = Plateau::new(&TrainConfig::default());
        assert_eq!(p.observe(1.0), PlateauAction::Improved);
        assert_eq!(p.observe(0.99995), PlateauAction::Waiting);
        assert_eq!(p.observe(0.9998), PlateauAction::Improved);
    }

    #[test]
    fn csv_header_and_row() {
        let log = EpochLog {
            epoch: 1,
            step: 10,
            lr: 1e-4,
            train_loss: 0.5,
            val_loss: 0.25,
            val_metrics: Metrics::default(),
        };
        let mut buf = Vec::new();
        let mut csv = CsvLog::new(&mut buf).unwrap();
        csv.row(&log).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(text.lines().nth(1).unwrap(), "1,10,1e-4,0.500000,0.250000,NaN,NaN,NaN,NaN");
    }
}
