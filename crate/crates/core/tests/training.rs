mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msgfm::model::{init_model, Binder, SensorEmbedder};
use msgfm::numeric::{Tape, Tensor};
use msgfm::sensors::{gen_synthetic, SensorRegistry, SensorSpec, SyntheticConfig};
use msgfm::training::{lr_at, make_schedule, schedule_for, Sampler, TrainConfig, Trainer};
use msgfm::Error;

use common::*;

#[test]
fn batch_sizes_follow_dataset_sizes() {
    let s = make_schedule(&[(0, 100), (1, 50), (2, 3)], 8).unwrap();
    assert_eq!(s.iter().map(|x| x.batch_size).collect::<Vec<_>>(), vec![8, 4, 1]);
    assert!(s.iter().all(|x| x.steps_per_epoch == 13));
    assert_eq!(s[1].lr_scale, 0.5);
    assert!(make_schedule(&[(0, 0)], 8).is_err());
    assert!(make_schedule(&[(0, 4)], 0).is_err());
}

#[test]
fn overrides_apply_by_name() {
    let d = pair_dataset(16, 16, 0);
    let mut cfg = tiny_train(0, 0.5);
    cfg.set("train.batch.s2", "3").unwrap();
    cfg.set("train.lr_scale.sar", "0.25").unwrap();
    let s = schedule_for(&d, &cfg).unwrap();
    assert_eq!(s[1].batch_size, 3);
    assert_eq!(s[0].lr_scale, 0.25);
    cfg.set("train.batch.nope", "3").unwrap();
    assert!(matches!(schedule_for(&d, &cfg), Err(Error::Config(_))));
}

#[test]
fn lr_warmup_then_steps() {
    let cfg = TrainConfig {
        base_lr: 1e-3,
        warmup_lr: 1e-5,
        warmup_epochs: 2,
        milestones: vec![4, 6],
        gamma: 0.1,
        ..TrainConfig::default()
    };
    assert!((lr_at(0, 10, &cfg) - 0.01).abs() < 1e-15);
    assert!((lr_at(10, 10, &cfg) - (0.01 + 0.99 * 0.5)).abs() < 1e-15);
    assert_eq!(lr_at(20, 10, &cfg), 1.0);
    assert!((lr_at(45, 10, &cfg) - 0.1).abs() < 1e-15);
    assert!((lr_at(60, 10, &cfg) - 0.01).abs() < 1e-15);
}

#[test]
fn sampler_covers_each_epoch_once() {
    let d = pair_dataset(10, 16, 0);
    let cfg = TrainConfig { base_batch: 5, ..tiny_train(0, 0.5) };
    let sched = schedule_for(&d, &cfg).unwrap();
    let sampler = Sampler::new(9);
    let mut seen: Vec<usize> = (0..2).flat_map(|r| sampler.sensor_round(&d, &sched[0], r)).collect();
    seen.sort();
    assert_eq!(seen, d.sensor_indices(0).to_vec());
    assert_eq!(Sampler::new(9).sensor_round(&d, &sched[0], 7), sampler.sensor_round(&d, &sched[0], 7));
}

#[test]
fn same_seed_same_run() {
    let d = pair_dataset(8, 32, 0);
    let run = || {
        let mut t = Trainer::new(d.clone(), tiny_model(), tiny_train(5, 0.5)).unwrap();
        (0..3).map(|_| t.step().unwrap()).collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    for m in &a {
        assert!(m.aux.is_some());
        let mim: f64 = m.mim.values().sum();
        assert!((m.loss - (mim + 0.01 * m.aux.unwrap())).abs() < 1e-5);
        for r in &m.routing {
            assert_eq!(r.report.total_tokens(), r.report.assigned.iter().sum::<usize>());
        }
    }
}

#[test]
fn embedder_rejects_foreign_channels() {
    let reg = pair_registry();
    let params = init_model::<f32>(&tiny_model(), &reg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut tape = Tape::new();
    let mut binder = Binder::frozen(&params);
    let emb = SensorEmbedder::for_sensor(&params, 0).unwrap();
    let x = tape.constant(Tensor::zeros(&[1, 4, 32, 32]));
    let err = emb.embed(&mut tape, &mut binder, 1, x, &[false; 64]).unwrap_err();
    assert!(matches!(err, Error::ChannelMismatch { expected: 0, expected_channels: 2, got: 1, got_channels: 4 }));
}

#[test]
fn unpaired_sensor_trains_alone() {
    let reg = SensorRegistry::new(vec![
        SensorSpec::new(0, "a", 3),
        SensorSpec::new(1, "b", 1).paired(2),
        SensorSpec::new(2, "c", 2).paired(1),
    ])
    .unwrap();
    let d = gen_synthetic(
        &reg,
        &SyntheticConfig {
            n_per_sensor: 4,
            width: 32,
            height: 32,
            patch_multiple: 4,
            ..SyntheticConfig::default()
        },
    )
    .unwrap();
    let mut t = Trainer::new(d, tiny_model(), tiny_train(0, 1.0)).unwrap();
    let m = t.step().unwrap();
    assert_eq!(m.mim.len(), 3);
    assert!(m.loss.is_finite());
    // Only the paired samples can go cross-sensor.
    assert!(m.cross_fraction > 0.0 && m.cross_fraction < 1.0);
}
