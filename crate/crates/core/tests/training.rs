use wbc_core::config::{Stage, StageConfig};
use wbc_core::data::{synth_images, ImageSet, SynthConfig};
use wbc_core::model::Model;
use wbc_core::nn::{named_tensors, Activation};
use wbc_core::train::*;
use wbc_core::{Error, Rng};

const SIZE: usize = 32;

fn sets() -> (ImageSet, ImageSet) {
    sets_of(12)
}

/// Subjects 0 and 1 of each class train, subject 2 validates.
fn sets_of(cells: usize) -> (ImageSet, ImageSet) {
    let cfg = SynthConfig {
        subjects_per_class: 3,
        cells_per_subject: cells,
        size: SIZE,
        test_subjects_per_class: 0,
    };
    let items = synth_images(&cfg, &Rng::new(3)).unwrap();
    let (val, train): (Vec<_>, Vec<_>) = items
        .into_iter()
        .partition(|(r, _)| r.subject_id.ends_with('2'));
    let build = |v: Vec<(wbc_core::data::Record, wbc_core::Tensor)>| {
        let imgs: Vec<_> = v.iter().map(|(_, t)| t.clone()).collect();
        ImageSet::from_images(
            &imgs,
            v.iter().map(|(r, _)| r.label).collect(),
            v.iter().map(|(r, _)| r.subject_id.clone()).collect(),
        )
        .unwrap()
    };
    (build(train), build(val))
}

fn stage(s: Stage) -> StageConfig {
    StageConfig {
        input_size: SIZE,
        ..StageConfig::for_stage(s)
    }
}

fn quick() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: 2,
        patience: 2,
        ..Default::default()
    }
}

fn weights(m: &Model) -> Vec<(String, Vec<f64>)> {
    named_tensors(m)
        .into_iter()
        .filter(|(n, _)| !Model::is_buffer(n))
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect()
}

#[test]
fn same_seed_same_log() {
    let (tr, va) = sets();
    let a = train_stage(&stage(Stage::S1), &quick(), &tr, &va).unwrap();
    let b = train_stage(&stage(Stage::S1), &quick(), &tr, &va).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(weights(&a.model), weights(&b.model));
}

#[test]
fn log_format_and_best_epoch() {
    let (tr, va) = sets();
    let out = train_stage(&stage(Stage::S1), &quick(), &tr, &va).unwrap();
    let csv = out.log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_LOG_HEADER));
    for l in lines {
        assert_eq!(l.split(',').count(), 6, "{l}");
    }
    let accs = out.log.val_accuracies();
    assert_eq!(accs.len(), out.epochs_run);
    let max = accs.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(out.meta.val_accuracy, 100.0 * max);
    assert_eq!(accs[out.meta.epoch - 1], max);
    // the returned weights are the best epoch's
    let again = evaluate(&out.model, &va, 16).unwrap();
    assert_eq!(again.accuracy, max);
}

#[test]
fn zero_learning_rate_changes_nothing_trainable() {
    let (tr, va) = sets();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        max_epochs: 3,
        patience: 3,
        ..quick()
    };
    let out = train_stage(&stage(Stage::S1), &cfg, &tr, &va).unwrap();
    let init =
        wbc_core::model::build_stage(&stage(Stage::S1), None, &mut Rng::new(cfg.seed).derive(1))
            .unwrap();
    assert_eq!(weights(&out.model), weights(&init));
    let accs = out.log.val_accuracies();
    assert!(accs.windows(2).all(|w| w[0] == w[1]), "{accs:?}");
}

#[test]
fn first_epoch_lowers_training_loss() {
    let (tr, va) = sets_of(80);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..quick()
    };
    let out = train_stage(&stage(Stage::S1), &cfg, &tr, &va).unwrap();
    let losses = &out.batch_losses[0];
    assert_eq!(losses.len(), tr.len() / 8);
    let q = losses.len() / 3;
    let head: f64 = losses[..q].iter().sum::<f64>() / q as f64;
    let tail: f64 = losses[losses.len() - q..].iter().sum::<f64>() / q as f64;
    assert!(tail < head, "{losses:?}");
}

#[test]
fn evaluate_is_pure() {
    let (tr, va) = sets();
    let out = train_stage(
        &stage(Stage::S1),
        &TrainConfig {
            max_epochs: 1,
            ..quick()
        },
        &tr,
        &va,
    )
    .unwrap();
    let before = parameter_hashes(&out.model);
    let a = evaluate(&out.model, &va, 5).unwrap();
    let b = evaluate(&out.model, &va, 64).unwrap();
    assert_eq!(a.confusion, b.confusion);
    assert!((a.loss.unwrap() - b.loss.unwrap()).abs() < 1e-12);
    assert_eq!(before, parameter_hashes(&out.model));
    let c = a.confusion;
    assert_eq!(a.accuracy, (c.tp + c.tn) as f64 / c.total() as f64);
    assert_eq!(c.total(), va.len());
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let (tr, va) = sets();
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..quick()
    };
    match train_stage(&stage(Stage::S1), &cfg, &tr, &va) {
        Err(Error::Divergence {
            epoch,
            learning_rate,
            ..
        }) => {
            assert_eq!(epoch, 1);
            assert_eq!(learning_rate, 1e300);
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.meta)),
    }
}

#[test]
fn config_validation() {
    let (tr, va) = sets();
    for bad in [
        TrainConfig {
            batch_size: 1,
            ..quick()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..quick()
        },
        TrainConfig {
            momentum: 1.0,
            ..quick()
        },
        TrainConfig {
            patience: 0,
            ..quick()
        },
        TrainConfig {
            class_weights: Some([0.0, 0.0]),
            ..quick()
        },
    ] {
        assert!(matches!(
            train_stage(&stage(Stage::S1), &bad, &tr, &va),
            Err(Error::Config(_))
        ));
    }
    assert!(matches!(
        train_stage(&stage(Stage::S3), &quick(), &tr, &va),
        Err(Error::Config(_))
    ));
    let wrong_size = StageConfig {
        input_size: 64,
        ..stage(Stage::S1)
    };
    assert!(matches!(
        train_stage(&wrong_size, &quick(), &tr, &va),
        Err(Error::Data(_))
    ));
}

#[test]
fn every_activation_trains() {
    let (tr, va) = sets();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..quick()
    };
    for act in [Activation::Relu, Activation::Prelu, Activation::Ptelu] {
        let sc = StageConfig {
            activation: act,
            ..stage(Stage::S1)
        };
        let out = train_stage(&sc, &cfg, &tr, &va).unwrap();
        assert_eq!(out.log.records.len(), 2 * out.epochs_run);
        assert!(out.log.to_csv().lines().skip(1).all(|l| !l.contains("NaN")));
    }
}

#[test]
fn hybrid_trains_only_the_fusion_layer() {
    let (tr, va) = sets();
    let cfg = TrainConfig {
        max_epochs: 1,
        ..quick()
    };
    let a = train_stage(&stage(Stage::S1), &cfg, &tr, &va)
        .unwrap()
        .model;
    let b = train_stage(&stage(Stage::S2C), &cfg, &tr, &va)
        .unwrap()
        .model;
    let widths = a.feature_width() + b.feature_width();
    let out = train_hybrid_on(&stage(Stage::S3C), a.clone(), b.clone(), &cfg, &tr, &va).unwrap();
    assert_eq!(out.outcome.model.feature_width(), widths);
    assert!(out.audit.changed_components().is_empty());
    let changed = out.audit.changed();
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| n.starts_with("fc.")), "{changed:?}");

    // augmented samples take the uncached path and keep the freeze
    let aug = StageConfig {
        augmentation: wbc_core::config::AugmentMode::NormalOnly,
        ..stage(Stage::S3C)
    };
    let out = train_hybrid_on(&aug, a.clone(), b.clone(), &cfg, &tr, &va).unwrap();
    assert!(out.audit.changed_components().is_empty());

    // components must match the hybrid
    let err = train_hybrid_on(&stage(Stage::S3), a, b, &cfg, &tr, &va).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
