mod common;

use common::synthetic::squares;
use dualskip_core::arch::GraphBuilder;
use dualskip_core::data::make_batch;
use dualskip_core::model::ParamRole;
use dualskip_core::train::{load_checkpoint, save_checkpoint, CsvLog, Plateau, PlateauAction, RmsProp};
use dualskip_core::{ArchSpec, Error, Family, Mode, Model, ParamStore, Tape, Tensor, TrainConfig, Trainer, Variant};
use proptest::prelude::*;

fn tiny(family: Family) -> ArchSpec {
    ArchSpec::new(family, 3, &Variant::All).unwrap().with_base_filters(2)
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 3,
        max_epochs: 3,
        seed,
        ..Default::default()
    }
}

fn bits(store: &ParamStore) -> Vec<Vec<u32>> {
    store
        .params()
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

/// Trains `spec` on synthetic squares and returns the CSV log text.
fn run(spec: &ArchSpec, cfg: TrainConfig) -> (String, Model) {
    let data = squares(7, 16, 3);
    let (train, val) = data.split_at(5);
    let mut model = Model::new(spec, cfg.seed).unwrap();
    let mut trainer = Trainer::new(&model, cfg).unwrap();
    let mut csv = CsvLog::new(Vec::new()).unwrap();
    trainer
        .fit(&mut model, train, val, |log, _, _| {
            csv.row(log).unwrap();
            Ok(())
        })
        .unwrap();
    (String::from_utf8(csv.into_inner()).unwrap(), model)
}

#[test]
fn he_init_is_seeded_and_zeroes_offsets() {
    let spec = tiny(Family::ResUNet);
    let a = Model::new(&spec, 7).unwrap();
    let b = Model::new(&spec, 7).unwrap();
    let c = Model::new(&spec, 8).unwrap();
    assert_eq!(bits(a.params()), bits(b.params()));
    assert_ne!(bits(a.params()), bits(c.params()));
    for p in a.params().params() {
        let expect = match p.role {
            ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => Some(0.0),
            ParamRole::Gamma | ParamRole::RunningVar => Some(1.0),
            ParamRole::Weight => None,
        };
        if let Some(v) = expect {
            assert!(p.value.data().iter().all(|&x| x == v), "{}", p.name);
        }
    }
}

#[test]
fn he_init_variance_follows_fan_in() {
    let spec = ArchSpec::new(Family::UNet, 2, &Variant::Vanilla).unwrap();
    let model = Model::new(&spec, 3).unwrap();
    let w = &model.params().params()[model.params().find("enc1.g1.conv.weight").unwrap()].value;
    assert_eq!(w.numel(), 64 * 64 * 9);
    let n = w.numel() as f64;
    let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let want = 2.0 / 576.0;
    assert!((var / want - 1.0).abs() < 0.1, "variance {var}, expected {want}");
}

/// A one-node graph whose two parameters (a 1×1 weight and a bias) serve as
/// scalars for optimiser tests.
fn scalar_store() -> ParamStore {
    let spec = ArchSpec::new(Family::UNet, 2, &Variant::Vanilla).unwrap();
    let mut b = GraphBuilder::new(spec);
    let x = b.input(1).unwrap();
    b.conv("c", x, 1, 1).unwrap();
    ParamStore::new(&b.finish()).unwrap()
}

#[test]
fn rmsprop_leaves_parameters_alone_without_gradient() {
    let mut store = scalar_store();
    for p in store.params_mut() {
        p.value.data_mut()[0] = 0.75;
    }
    let before = bits(&store);
    let mut opt = RmsProp::new(&store, 0.9, 1e-7);
    for _ in 0..5 {
        opt.step(&mut store, &[Some(&[0.0]), Some(&[0.0])], 0.1);
    }
    assert_eq!(bits(&store), before);
}

#[test]
fn rmsprop_minimises_a_parabola() {
    let mut store = scalar_store();
    for p in store.params_mut() {
        p.value.data_mut()[0] = 3.0;
    }
    let mut opt = RmsProp::new(&store, 0.9, 1e-7);
    for _ in 0..200 {
        let g: Vec<f32> = store.params().iter().map(|p| 2.0 * p.value.data()[0]).collect();
        opt.step(&mut store, &[Some(&g[..1]), Some(&g[1..])], 0.05);
    }
    for p in store.params() {
        assert!(p.value.data()[0].abs() < 0.1, "{} = {}", p.name, p.value.data()[0]);
    }
}

proptest! {
    #[test]
    fn learning_rate_only_takes_decade_steps(losses in prop::collection::vec(0.0f64..1.0, 1..200)) {
        let cfg = TrainConfig { plateau_patience: 3, ..Default::default() };
        let mut schedule = Plateau::new(&cfg);
        let mut last = schedule.learning_rate();
        for l in losses {
            if schedule.observe(l) == PlateauAction::Stop {
                break;
            }
            let lr = schedule.learning_rate();
            prop_assert!(lr <= last);
            let k = schedule.reductions() as i32;
            prop_assert!((lr - 1e-4 * 0.1f64.powi(k)).abs() <= 1e-18);
            prop_assert!(lr >= 1e-6 * (1.0 - 1e-9));
            last = lr;
        }
    }
}

#[test]
fn training_and_evaluation_modes_differ() {
    let spec = ArchSpec::new(Family::UNet, 3, &Variant::Vanilla).unwrap().with_base_filters(4);
    let model = Model::new(&spec, 1).unwrap();
    let batch = make_batch(&squares(2, 16, 9).iter().collect::<Vec<_>>()).unwrap();
    let out = |mode| {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &batch.images, mode, false).unwrap();
        tape.value(pass.output).clone()
    };
    let eval = out(Mode::Eval);
    assert_eq!(eval, out(Mode::Eval));
    let a = out(Mode::Train { seed: 1 });
    let b = out(Mode::Train { seed: 2 });
    assert!(eval.max_abs_diff(&a).unwrap() > 1e-3, "batch statistics have no effect");
    // Only the dropout mask depends on the seed.
    assert!(a.max_abs_diff(&b).unwrap() > 0.0, "dropout is inactive in training");
    let mut no_dropout = spec.clone();
    no_dropout.dropout = 0.0;
    let plain = Model::new(&no_dropout, 1).unwrap();
    let run = |seed| {
        let mut tape = Tape::new();
        let pass = plain.forward(&mut tape, &batch.images, Mode::Train { seed }, false).unwrap();
        tape.value(pass.output).clone()
    };
    assert_eq!(run(1), run(2));
}

#[test]
fn fixed_seed_reproduces_the_log() {
    let spec = tiny(Family::UNet3Plus);
    let (first, a) = run(&spec, config(5));
    let (second, b) = run(&spec, config(5));
    assert_eq!(first.lines().count(), 4, "{first}");
    assert_eq!(first, second);
    assert_eq!(bits(a.params()), bits(b.params()));
    let (other, _) = run(&spec, config(6));
    assert_ne!(first, other);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny(Family::ResUNet);
    let data = squares(4, 16, 2);
    let mut model = Model::new(&spec, 0).unwrap();
    let mut trainer = Trainer::new(&model, config(0)).unwrap();
    let batch = make_batch(&data.iter().collect::<Vec<_>>()).unwrap();
    for _ in 0..3 {
        trainer.train_step(&mut model, &batch.images, &batch.masks).unwrap();
    }
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &model, Some(&trainer)).unwrap();
    let restored = load_checkpoint(&path, Some(&spec)).unwrap();
    assert_eq!(bits(restored.model.params()), bits(model.params()));
    assert_eq!(restored.optimizer.as_ref().map(|o| &o.accum), Some(&trainer.optimizer.accum));
    assert_eq!((restored.step, restored.epoch), (3, 0));
    let x = &batch.images;
    let (p, q) = (model.predict(x).unwrap(), restored.model.predict(x).unwrap());
    assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let again = dir.path().join("b.ckpt");
    save_checkpoint(&again, &restored.model, Some(&Trainer::resume(&restored.model, config(0), &restored).unwrap()))
        .unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny(Family::UNet);
    let data = squares(7, 16, 3);
    let (train, val) = data.split_at(5);
    let full = |epochs| TrainConfig {
        max_epochs: epochs,
        ..config(4)
    };

    let mut straight = Model::new(&spec, 4).unwrap();
    Trainer::new(&straight, full(4))
        .unwrap()
        .fit(&mut straight, train, val, |_, _, _| Ok(()))
        .unwrap();

    let mut first = Model::new(&spec, 4).unwrap();
    let mut trainer = Trainer::new(&first, full(2)).unwrap();
    trainer.fit(&mut first, train, val, |_, _, _| Ok(())).unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&path, &first, Some(&trainer)).unwrap();

    let restored = load_checkpoint(&path, Some(&spec)).unwrap();
    let mut resumed = Trainer::resume(&restored.model, full(4), &restored).unwrap();
    let mut second = restored.model;
    let report = resumed.fit(&mut second, train, val, |_, _, _| Ok(())).unwrap();
    assert_eq!(report.history.first().map(|l| l.epoch), Some(3));
    assert_eq!(bits(second.params()), bits(straight.params()));
}

#[test]
fn loading_into_another_architecture_fails() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny(Family::UNet);
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Model::new(&spec, 0).unwrap(), None).unwrap();
    for other in [
        ArchSpec::new(Family::UNet, 3, &Variant::Small).unwrap().with_base_filters(2),
        ArchSpec::new(Family::UNet, 3, &Variant::All).unwrap().with_base_filters(4),
        tiny(Family::ResUNet),
    ] {
        match load_checkpoint(&path, Some(&other)) {
            Err(Error::Incompatible(_)) => {}
            Err(e) => panic!("wrong error kind: {e}"),
            Ok(_) => panic!("{} accepted a {} checkpoint", other.label(), spec.label()),
        }
    }
    assert!(load_checkpoint(&path, None).unwrap().optimizer.is_none());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Model::new(&tiny(Family::UNet), 0).unwrap(), None).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint(&path, None).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    std::fs::write(&path, bad_magic).unwrap();
    assert!(load_checkpoint(&path, None).is_err());
}

#[test]
fn divergence_names_the_first_bad_node() {
    let spec = tiny(Family::UNet);
    let mut model = Model::new(&spec, 0).unwrap();
    let mut trainer = Trainer::new(&model, config(0)).unwrap();
    let i = model.params().find("enc2.c1.conv.weight").unwrap();
    model.params_mut().params_mut()[i].value.data_mut()[0] = f32::NAN;
    let images = Tensor::full(&[1, 3, 16, 16], 0.5).unwrap();
    let masks = Tensor::zeros(&[1, 1, 16, 16]).unwrap();
    match trainer.train_step(&mut model, &images, &masks) {
        Err(Error::Diverged { node, step }) => {
            assert_eq!(node, "enc2.c1.conv");
            assert_eq!(step, 1);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
