mod common;

use trialigner::eval::RetrievalMode;
use trialigner::mining::mine_hard_negatives;
use trialigner::model::{ModelConfig, ModelParams};
use trialigner::store::{DatasetBundle, SplitRole};
use trialigner::train::{train, train_with_monitor, EpochLog, Monitor, TrainConfig, TrainError};

fn model(seed: u64) -> ModelParams {
    ModelParams::init(
        &ModelConfig {
            d_native: 8,
            d_english: 8,
            hidden: 8,
            dropout_p: 0.2,
            concat_from_normalized: false,
        },
        seed,
    )
}

fn bundle() -> DatasetBundle {
    common::tiny_bundle(11, 40, 60, 8, 10)
}

fn config(epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        max_epochs: epochs,
        patience,
        seed: 5,
        ..Default::default()
    }
}

fn without_time(log: &[EpochLog]) -> Vec<EpochLog> {
    log.iter()
        .cloned()
        .map(|mut l| {
            l.seconds = 0.0;
            l
        })
        .collect()
}

#[test]
fn flat_monitor_stops_after_patience() {
    let out = train_with_monitor(model(1), &bundle(), &config(10, 1), None, &mut |_, _| Ok(0.5)).unwrap();
    assert_eq!(out.log.len(), 2);
    assert_eq!(out.best_epoch, 1);

    let out = train_with_monitor(model(1), &bundle(), &config(10, 3), None, &mut |_, e| Ok(1.0 / e as f64))
        .unwrap();
    assert_eq!(out.log.len(), 4);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn best_snapshot_is_the_best_epoch() {
    let script = [0.1, 0.5, 0.3, 0.2, 0.9];
    let mut snapshots = Vec::new();
    let out = train_with_monitor(model(2), &bundle(), &config(5, 2), None, &mut |m, e| {
        snapshots.push(m.clone());
        Ok(script[e - 1])
    })
    .unwrap();
    assert_eq!(out.log.len(), 4);
    assert_eq!(out.best_epoch, 2);
    assert_eq!(out.best_monitor, 0.5);
    assert_eq!(out.best, snapshots[1]);
    assert!(out.log.iter().all(|l| l.monitor_value <= out.best_monitor));
}

#[test]
fn real_monitor_best_dominates_log() {
    let mut cfg = config(4, 4);
    cfg.monitor = Monitor {
        mode: RetrievalMode::Crosslingual,
        k: 5,
    };
    let out = train(model(3), &bundle(), &cfg, None).unwrap();
    assert_eq!(out.log.len(), 4);
    assert!(out.log.iter().all(|l| l.monitor_value <= out.best_monitor));
    assert_eq!(out.log[out.best_epoch - 1].monitor_value, out.best_monitor);
    assert!(out.log.iter().all(|l| l.monitor_name == "dev_crosslingual_recall@5"));
}

#[test]
fn seeded_training_is_reproducible() {
    let b = bundle();
    let a = train(model(4), &b, &config(3, 3), None).unwrap();
    let again = train(model(4), &b, &config(3, 3), None).unwrap();
    assert_eq!(without_time(&a.log), without_time(&again.log));
    assert_eq!(a.best, again.best);

    let mut other = config(3, 3);
    other.seed = 6;
    let c = train(model(4), &b, &other, None).unwrap();
    assert_ne!(without_time(&a.log), without_time(&c.log));
}

#[test]
fn learning_rate_follows_cosine_schedule() {
    let out = train_with_monitor(model(1), &bundle(), &config(4, 10), None, &mut |_, _| Ok(0.0)).unwrap();
    let lrs: Vec<f64> = out.log.iter().map(|l| l.lr).collect();
    assert_eq!(lrs.len(), 4);
    assert_eq!(lrs[0], 1e-3);
    for (e, lr) in lrs.iter().enumerate() {
        let expect = 0.5e-3 * (1.0 + (std::f64::consts::PI * e as f64 / 4.0).cos());
        assert!((lr - expect).abs() < 1e-15);
    }
}

#[test]
fn loss_decreases_on_learnable_data() {
    let data = trialigner::synth::generate(&trialigner::synth::SynthConfig {
        posts: 60,
        facts: 200,
        dim: 16,
        ..Default::default()
    })
    .unwrap();
    let m = ModelParams::init(
        &ModelConfig {
            d_native: 16,
            d_english: 16,
            hidden: 32,
            dropout_p: 0.1,
            concat_from_normalized: false,
        },
        1,
    );
    let out = train_with_monitor(m, &data.bundle, &config(8, 8), None, &mut |_, _| Ok(0.0)).unwrap();
    assert!(out.log.last().unwrap().mean_loss < out.log[0].mean_loss);
}

#[test]
fn empty_splits_are_errors() {
    let no_dev = common::tiny_bundle(1, 20, 30, 8, 0);
    assert!(matches!(
        train(model(1), &no_dev, &config(2, 1), None),
        Err(TrainError::EmptyDevSplit)
    ));
    let mut no_train = bundle();
    for role in no_train.split.values_mut() {
        *role = SplitRole::Dev;
    }
    assert!(matches!(
        train(model(1), &no_train, &config(2, 1), None),
        Err(TrainError::EmptyTrainSplit)
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TrainConfig { batch_size: 1, ..config(2, 1) },
        TrainConfig { patience: 0, ..config(2, 1) },
        TrainConfig { learning_rate: 0.0, ..config(2, 1) },
        TrainConfig { max_epochs: 0, ..config(2, 1) },
        TrainConfig { margin_weight: -1.0, ..config(2, 1) },
    ] {
        assert!(matches!(
            train_with_monitor(model(1), &bundle(), &cfg, None, &mut |_, _| Ok(0.0)),
            Err(TrainError::InvalidConfig(_))
        ));
    }
}

#[test]
fn overflowing_scale_is_divergence() {
    let mut m = model(1);
    m.fusion.log_scale = [800.0; 3];
    match train_with_monitor(m, &bundle(), &config(3, 3), None, &mut |_, _| Ok(0.0)) {
        Err(TrainError::Divergence { epoch, last_finite_loss }) => {
            assert_eq!(epoch, 1);
            assert_eq!(last_finite_loss, None);
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn margin_term_contributes_to_loss() {
    let b = bundle();
    let train_ids: Vec<&str> = b.posts_in(SplitRole::Train).iter().map(|p| p.post_id.as_str()).collect();
    let negs = mine_hard_negatives(&b.post_english, &b.fact_english, &b.pairs, 5, Some(&train_ids)).unwrap();
    let plain = train_with_monitor(model(7), &b, &config(1, 1), None, &mut |_, _| Ok(0.0)).unwrap();
    let cfg = TrainConfig {
        margin: 10.0,
        margin_weight: 1.0,
        ..config(1, 1)
    };
    let with = train_with_monitor(model(7), &b, &cfg, Some(&negs), &mut |_, _| Ok(0.0)).unwrap();
    assert!(with.log[0].mean_loss.is_finite());
    assert!(with.log[0].mean_loss > plain.log[0].mean_loss);

    let zero_weight = train_with_monitor(model(7), &b, &config(1, 1), Some(&negs), &mut |_, _| Ok(0.0)).unwrap();
    assert_eq!(without_time(&zero_weight.log), without_time(&plain.log));
}
