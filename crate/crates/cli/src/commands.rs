use std::fs;
use std::path::{Path, PathBuf};

use dualskip_core::data::{self, binarize_mask, discover, load_samples, PairPaths, Raster};
use dualskip_core::gradcheck::{self, TOLERANCE};
use dualskip_core::train::{evaluate, load_checkpoint, save_checkpoint, CsvLog, StopReason};
use dualskip_core::{build, ArchSpec, Confusion, Error, Family, FlatConfig, Model, Trainer, Variant};

use crate::run_config::RunConfig;
use crate::{Failure, EXIT_COMPAT, EXIT_IO, EXIT_USAGE};

type CmdResult = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

pub fn summarize(
    family: Family,
    depth: usize,
    variant: &Variant,
    base_filters: usize,
    input_size: usize,
    expect: Option<f64>,
    brief: bool,
) -> CmdResult {
    if base_filters == 0 {
        return Err(Failure::new(EXIT_USAGE, "--base-filters must be positive"));
    }
    let spec = ArchSpec::new(family, depth, variant)?.with_base_filters(base_filters);
    let graph = build(&spec)?;
    let count = graph.param_count();
    if brief {
        println!(
            "{}: total parameters: {} ({:.3} M)",
            spec.label(),
            dualskip_core::arch::group_thousands(count.total()),
            count.millions()
        );
    } else {
        print!("{}", graph.summarize(input_size, input_size)?);
    }
    if let Some(want) = expect {
        let got = count.millions();
        if (got - want).abs() > 0.001 + 1e-9 {
            return Err(Failure::new(
                EXIT_COMPAT,
                format!("{} has {got:.3} M parameters, expected {want:.3} M", spec.label()),
            ));
        }
        println!("matches expected {want:.3} M");
    }
    Ok(())
}

pub fn gradcheck(family: Family, variant: &Variant, base_filters: usize, size: usize, seed: u64) -> CmdResult {
    if base_filters == 0 {
        return Err(Failure::new(EXIT_USAGE, "--base-filters must be positive"));
    }
    let spec = ArchSpec::new(family, 3, variant)?.with_base_filters(base_filters);
    let mut model = Model::new(&spec, seed)?;
    let (x, y) = gradcheck::random_problem(spec.in_channels, size, seed)?;
    let focal = Default::default();
    let eval = gradcheck::check_model_eval(&model, &x, &y, focal, seed)?;
    let train = gradcheck::check_model(&mut model, &x, &y, focal, seed)?;
    let mut worst = 0.0f64;
    for (what, report) in [("batch statistics", &train), ("running statistics", &eval)] {
        let at = report.worst().map_or("-".to_string(), |p| p.name.clone());
        print!(
            "{} ({what}): {} probes, max relative error {:.3e} ({at})",
            spec.label(),
            report.probes.len(),
            report.max_rel_error()
        );
        if !report.vanishing.is_empty() {
            print!("; {} tensors with identically zero gradient", report.vanishing.len());
        }
        println!();
        worst = worst.max(report.max_rel_error());
    }
    println!("max relative error {worst:.3e}");
    if train.passed() && eval.passed() {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_IO,
            format!("gradient check failed: max relative error exceeds {TOLERANCE}"),
        ))
    }
}

pub fn tile(input: &Path, output: &Path, tile: usize, positive: u8) -> CmdResult {
    if tile == 0 {
        return Err(Failure::new(EXIT_USAGE, "--tile must be positive"));
    }
    let pairs = discover(input)?;
    let (img_dir, lbl_dir) = (output.join("images"), output.join("labels"));
    for d in [&img_dir, &lbl_dir] {
        fs::create_dir_all(d).map_err(|e| io_failure(d, e))?;
    }
    let mut written = Vec::new();
    for p in &pairs {
        let image = Raster::load_rgb(&p.image)?;
        let mask = Raster::load_gray(&p.label)?;
        binarize_mask(&mask, positive).map_err(|e| Failure::from(Error::Dataset(format!("{}: {e}", p.label.display()))))?;
        for s in data::tile_pair(&image, &mask, tile, &p.stem())? {
            let pair = PairPaths {
                image: img_dir.join(format!("{}.png", s.name)),
                label: lbl_dir.join(format!("{}.png", s.name)),
            };
            s.image.save_png(&pair.image)?;
            s.mask.save_png(&pair.label)?;
            written.push(pair);
        }
    }
    data::write_manifest(&output.join("manifest.tsv"), &written)?;
    println!("{} tiles written", written.len());
    Ok(())
}

pub struct TrainFlags {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
    pub resume: Option<PathBuf>,
}

fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>, Failure> {
    items
        .iter()
        .map(|s| FlatConfig::parse_override(s).map_err(|e| Failure::new(EXIT_USAGE, e.to_string())))
        .collect()
}

pub fn train(config: Option<&Path>, overrides: &[String], flags: TrainFlags) -> CmdResult {
    let mut ov = parse_overrides(overrides)?;
    if let Some(d) = &flags.data {
        ov.push(("data".into(), d.display().to_string()));
    }
    if let Some(o) = &flags.out {
        ov.push(("out_dir".into(), o.display().to_string()));
    }
    if let Some(s) = flags.seed {
        ov.push(("seed".into(), s.to_string()));
    }
    if let Some(m) = flags.max_steps {
        ov.push(("max_steps".into(), m.to_string()));
    }
    let cfg = RunConfig::load(config, &ov)?;
    let spec = cfg
        .arch
        .clone()
        .ok_or_else(|| Failure::new(EXIT_USAGE, "the configuration must set `family`"))?;
    let data_path = cfg
        .data
        .clone()
        .ok_or_else(|| Failure::new(EXIT_USAGE, "no training data: set `data` or pass --data"))?;

    let samples = load_samples(&discover(&data_path)?, cfg.tile_size, cfg.mask_positive)?;
    let (train_set, val_set) = match &cfg.val_data {
        Some(v) => (samples, load_samples(&discover(v)?, cfg.tile_size, cfg.mask_positive)?),
        None => data::split(samples, cfg.train_fraction, cfg.train.seed)?,
    };

    let (mut model, mut trainer) = match &flags.resume {
        Some(ckpt) => {
            let restored = load_checkpoint(ckpt, Some(&spec))?;
            let trainer = Trainer::resume(&restored.model, cfg.train.clone(), &restored)?;
            (restored.model, trainer)
        }
        None => {
            let model = Model::new(&spec, cfg.train.seed)?;
            let trainer = Trainer::new(&model, cfg.train.clone())?;
            (model, trainer)
        }
    };

    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_failure(&cfg.out_dir, e))?;
    let resolved = cfg.out_dir.join("config.txt");
    let mut full = spec.to_config();
    for (k, v) in cfg.raw.iter() {
        if !ArchSpec::CONFIG_KEYS.contains(&k) {
            full.set(k, v);
        }
    }
    fs::write(&resolved, full.to_text()).map_err(|e| io_failure(&resolved, e))?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let file = fs::File::create(&log_path).map_err(|e| io_failure(&log_path, e))?;
    let mut csv = CsvLog::new(std::io::BufWriter::new(file)).map_err(|e| io_failure(&log_path, e))?;
    let last = cfg.out_dir.join("last.ckpt");
    let best = cfg.out_dir.join("best.ckpt");
    let mut best_loss = f64::INFINITY;

    eprintln!(
        "training {} on {} tiles ({} validation), {} parameters",
        spec.label(),
        train_set.len(),
        val_set.len(),
        model.graph().param_count().total()
    );
    let report = trainer.fit(&mut model, &train_set, &val_set, |log, model, trainer| {
        csv.row(log).map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        eprintln!(
            "epoch {:>4} step {:>6} lr {:.1e} train {:.4} val {:.4} {}",
            log.epoch, log.step, log.lr, log.train_loss, log.val_loss, log.val_metrics
        );
        save_checkpoint(&last, model, Some(trainer))?;
        let monitored = if log.val_loss.is_nan() { log.train_loss } else { log.val_loss };
        if monitored < best_loss {
            best_loss = monitored;
            save_checkpoint(&best, model, Some(trainer))?;
        }
        Ok(())
    })?;
    let why = match report.stop {
        StopReason::StepLimit => "step limit reached",
        StopReason::EpochLimit => "epoch limit reached",
        StopReason::LearningRateFloor => "learning rate floor reached",
    };
    println!(
        "stopped after {} steps, {} epochs: {why}",
        report.steps,
        report.history.len()
    );
    Ok(())
}

pub fn eval(
    config: Option<&Path>,
    overrides: &[String],
    data_flag: Option<PathBuf>,
    checkpoint: Option<&Path>,
    predictions: Option<&Path>,
    write_masks: Option<&Path>,
) -> CmdResult {
    let mut ov = parse_overrides(overrides)?;
    if let Some(d) = &data_flag {
        ov.push(("data".into(), d.display().to_string()));
    }
    let cfg = RunConfig::load(config, &ov)?;
    let data_path = cfg
        .data
        .clone()
        .ok_or_else(|| Failure::new(EXIT_USAGE, "no evaluation data: set `data` or pass --data"))?;
    let pairs = discover(&data_path)?;

    let metrics = if let Some(dir) = predictions {
        let mut conf = Confusion::default();
        for p in &pairs {
            let label = binarize_mask(&Raster::load_gray(&p.label)?, cfg.mask_positive)?;
            let pred_path = dir.join(format!("{}.png", p.stem()));
            let pred = Raster::load_gray(&pred_path)?;
            if (pred.height, pred.width) != (label.height, label.width) {
                return Err(Error::Dataset(format!(
                    "{}: prediction is {}x{}, label is {}x{}",
                    pred_path.display(),
                    pred.height,
                    pred.width,
                    label.height,
                    label.width
                ))
                .into());
            }
            let pt = pred.to_tensor(255.0);
            let lt = label.to_tensor(1.0);
            conf.merge(&Confusion::from_predictions(&pt, &lt, 0.5)?);
        }
        conf.metrics()
    } else {
        let ckpt = checkpoint.expect("clap requires --checkpoint or --predictions");
        let restored = load_checkpoint(ckpt, cfg.arch.as_ref())?;
        let model = restored.model;
        let samples = load_samples(&pairs, cfg.tile_size, cfg.mask_positive)?;
        if let Some(dir) = write_masks {
            fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            for s in &samples {
                let batch = data::make_batch(&[s])?;
                let pred = model.predict(&batch.images)?;
                let bytes = pred
                    .data()
                    .iter()
                    .map(|&v| if v >= cfg.train.threshold { 255 } else { 0 })
                    .collect();
                Raster::new(s.mask.height, s.mask.width, 1, bytes)?.save_png(&dir.join(format!("{}.png", s.name)))?;
            }
        }
        evaluate(&model, &samples, cfg.train.batch_size, cfg.train.focal, cfg.train.threshold)?.1
    };
    print!("{}", metrics.table());
    println!("{metrics}");
    Ok(())
}
