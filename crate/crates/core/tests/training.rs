mod common;

use std::path::Path;

use common::{desk_model_config, desk_train_config, oracle_metrics};
use ndarray::Array3;
use shuffle_histo::backbone::BackboneSource;
use shuffle_histo::checkpoint::load_checkpoint;
use shuffle_histo::config::ExperimentConfig;
use shuffle_histo::data::{scan_dataset, synth_dataset, Magnification, SynthSpec};
use shuffle_histo::metrics::{round2, DEFAULT_THRESHOLD};
use shuffle_histo::model::{build_model, HybridModel};
use shuffle_histo::nn::Module;
use shuffle_histo::training::{
    evaluate, predict_probs, read_history, run_experiment, select_m, sweep_m, train, write_history,
    TensorDataset, TrainConfig,
};
use shuffle_histo::Error;

fn small_data(root: &Path) -> TensorDataset {
    let spec = SynthSpec {
        n_per_class: 12,
        width: 48,
        height: 36,
        seed: 4,
        ..SynthSpec::default()
    };
    synth_dataset(root, &spec).unwrap();
    let manifest = scan_dataset(root).unwrap();
    common::load_all(&manifest, desk_model_config().input_size)
}

fn model(seed: u64) -> HybridModel<f32> {
    build_model(&desk_model_config(), &BackboneSource::RandomInit, seed).unwrap()
}

fn snapshot(
    model: &HybridModel<f32>,
    prefix: &str,
    include_buffers: bool,
) -> Vec<(String, Vec<u32>)> {
    let mut out = Vec::new();
    model.visit_params("", &mut |name, p| {
        if name.starts_with(prefix) && (include_buffers || !p.is_buffer()) {
            out.push((
                name.to_string(),
                p.value.iter().map(|v| v.to_bits()).collect(),
            ));
        }
    });
    out
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let mut m = model(1);
    m.set_backbone_frozen(false);
    let before = snapshot(&m, "", false);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 3,
        // one batch per epoch, so batch statistics see the same images every time
        batch_size: data.len(),
        ..desk_train_config(0)
    };
    let (state, best) = train(&mut m, &data, &data, &cfg).unwrap();
    assert_eq!(snapshot(&m, "", false), before);
    let losses: Vec<f64> = state.history.iter().map(|h| h.train_loss).collect();
    assert!(
        losses
            .windows(2)
            .all(|w| (w[0] - w[1]).abs() <= 1e-6 * w[0]),
        "{losses:?}"
    );
    // identical accuracies every epoch: ties keep the earliest
    assert_eq!(best.epoch, 1);
    assert_eq!(state.best_epoch, 1);
}

#[test]
fn frozen_backbone_is_bit_identical_then_trains() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let mut cfg_model = desk_model_config();
    cfg_model.freeze_backbone_epochs = 2;
    let mut m = build_model::<f32>(&cfg_model, &BackboneSource::RandomInit, 2).unwrap();
    let backbone0 = snapshot(&m, "backbone.", true);
    let rest0 = snapshot(&m, "stem.", false);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..desk_train_config(0)
    };
    train(&mut m, &data, &data, &cfg).unwrap();
    assert_eq!(snapshot(&m, "backbone.", true), backbone0);
    assert_ne!(snapshot(&m, "stem.", false), rest0);

    let mut m = build_model::<f32>(&cfg_model, &BackboneSource::RandomInit, 2).unwrap();
    let cfg = TrainConfig { epochs: 3, ..cfg };
    train(&mut m, &data, &data, &cfg).unwrap();
    assert_ne!(
        snapshot(&m, "backbone.", false),
        snapshot(&model(2), "backbone.", false)
    );
}

#[test]
fn identical_seeds_give_identical_histories() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        augment: true,
        ..desk_train_config(5)
    };
    let run = || {
        let mut m = model(5);
        let (state, best) = train(&mut m, &data, &data, &cfg).unwrap();
        (state, snapshot(&best.model, "", true))
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a.history, b.history);
    assert_eq!(wa, wb);
    assert_eq!(a.history.len(), a.epoch);

    let mut m = model(5);
    let (c, _) = train(&mut m, &data, &data, &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn best_checkpoint_accuracy_matches_reevaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"));
    let mut m = model(3);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 8,
        ..desk_train_config(3)
    };
    let (state, best) = train(&mut m, &data, &data, &cfg).unwrap();
    assert_eq!(best.metrics.accuracy, state.best_val_accuracy);
    let path = dir.path().join("best");
    best.save(&path).unwrap();
    let (loaded, meta) = load_checkpoint::<f32>(&path).unwrap();
    let again = evaluate(&loaded, &data, Magnification::X40).unwrap();
    assert!((again.accuracy - meta.metrics.as_ref().unwrap().accuracy).abs() <= 1e-9);
    assert_eq!(meta.epoch, state.best_epoch);
    assert!(state
        .history
        .iter()
        .all(|h| h.val_accuracy <= state.best_val_accuracy));
    let first_best = state
        .history
        .iter()
        .find(|h| h.val_accuracy == state.best_val_accuracy)
        .unwrap();
    assert_eq!(first_best.epoch, state.best_epoch);
}

#[test]
fn evaluation_matches_pair_scan_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let m = model(8);
    let probs = predict_probs(&m, &data).unwrap();
    let o = oracle_metrics(&probs, data.labels(), DEFAULT_THRESHOLD);
    let r = evaluate(&m, &data, Magnification::X40).unwrap();
    assert_eq!(r.accuracy, round2(o.accuracy));
    assert_eq!(r.precision, round2(o.precision));
    assert_eq!(r.recall, round2(o.recall));
    assert_eq!(r.f1, round2(o.f1));
    assert_eq!(r.counts.total(), data.len());
}

#[test]
fn zeroed_head_predicts_everything_malignant() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let mut m = model(8);
    m.zero_head();
    let r = evaluate(&m, &data, Magnification::X40).unwrap();
    assert_eq!(r.recall, 100.0);
    assert_eq!(r.counts.tn, 0);
    assert_eq!(r.counts.fn_, 0);
}

#[test]
fn empty_sets_and_bad_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let empty = TensorDataset::default();
    let mut m = model(0);
    let cfg = desk_train_config(0);
    assert!(matches!(
        train(&mut m, &empty, &data, &cfg),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        train(&mut m, &data, &empty, &cfg),
        Err(Error::InvalidArgument(_))
    ));
    assert!(evaluate(&m, &empty, Magnification::X40).is_err());
    let bad = TrainConfig { epochs: 0, ..cfg };
    assert!(matches!(
        train(&mut m, &data, &data, &bad),
        Err(Error::Config(_))
    ));
}

#[test]
fn non_finite_loss_names_epoch_and_batch() {
    let size = desk_model_config().input_size;
    let mut images: Vec<Array3<f32>> = (0..6)
        .map(|i| Array3::from_elem((3, size, size), i as f32 * 0.1))
        .collect();
    images[5][[0, 0, 0]] = f32::NAN;
    let labels = vec![0, 1, 0, 1, 0, 1];
    let data = TensorDataset::new(images, labels).unwrap();
    let mut m = model(0);
    let cfg = TrainConfig {
        batch_size: 1,
        ..desk_train_config(0)
    };
    match train(&mut m, &data, &data, &cfg) {
        Err(Error::Divergence { epoch, batch }) => {
            assert_eq!(epoch, 1);
            assert!((1..=6).contains(&batch));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn early_stopping_truncates_history() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let mut m = model(0);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 10,
        early_stop_patience: Some(2),
        ..desk_train_config(0)
    };
    let (state, _) = train(&mut m, &data, &data, &cfg).unwrap();
    assert!(state.stopped_early);
    assert_eq!(state.history.len(), 3);
    assert_eq!(state.epoch, 3);
}

#[test]
fn history_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(&dir.path().join("data"));
    let mut m = model(0);
    let cfg = TrainConfig {
        epochs: 2,
        ..desk_train_config(0)
    };
    let (state, _) = train(&mut m, &data, &data, &cfg).unwrap();
    let path = dir.path().join("history.csv");
    write_history(&path, &state.history).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("epoch,train_loss,val_loss,val_accuracy\n"));
    assert_eq!(read_history(&path).unwrap(), state.history);
}

#[test]
fn run_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let data_root = dir.path().join("data");
    synth_dataset(
        &data_root,
        &SynthSpec {
            n_per_class: 16,
            width: 48,
            height: 36,
            ..SynthSpec::default()
        },
    )
    .unwrap();
    let manifest = scan_dataset(&data_root).unwrap();
    let cfg = ExperimentConfig {
        model: desk_model_config(),
        train: TrainConfig {
            epochs: 2,
            ..desk_train_config(1)
        },
        random_backbone: true,
        ..ExperimentConfig::default()
    };
    let run = dir.path().join("runs/r1");
    let summary = run_experiment(&run, &manifest, &cfg).unwrap();
    for f in [
        "config.json",
        "train.txt",
        "val.txt",
        "test.txt",
        "history.csv",
        "best.weights",
        "best.meta.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(
        ExperimentConfig::load(&run.join("config.json")).unwrap(),
        cfg
    );
    assert_eq!(
        read_history(&run.join("history.csv")).unwrap(),
        summary.state.history
    );

    let no_weights = ExperimentConfig {
        random_backbone: false,
        ..cfg
    };
    let err = run_experiment(&dir.path().join("runs/r2"), &manifest, &no_weights).unwrap_err();
    assert!(matches!(err, Error::PretrainedUnavailable { .. }), "{err}");
}

#[test]
fn sweep_selection_rules() {
    assert_eq!(select_m(&[(1, 97.0), (2, 96.0), (3, 96.0)]), Some(1));
    assert_eq!(select_m(&[(1, 95.0), (2, 95.0)]), Some(1));
    assert_eq!(select_m(&[(1, 90.0), (2, 95.0)]), Some(2));
}

#[test]
fn sweep_rejects_bad_candidates_and_labels_failures() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let cfg = TrainConfig {
        epochs: 1,
        ..desk_train_config(0)
    };
    let base = desk_model_config();
    let src = BackboneSource::RandomInit;
    assert!(sweep_m(&[], &base, &src, &data, &data, &cfg).is_err());
    assert!(sweep_m(&[1, 0], &base, &src, &data, &data, &cfg).is_err());
    let missing = BackboneSource::Pretrained("/nonexistent.safetensors".into());
    match sweep_m(&[2], &base, &missing, &data, &data, &cfg) {
        Err(Error::Sweep { m, .. }) => assert_eq!(m, 2),
        other => panic!("expected a labelled sweep error, got {other:?}"),
    }
}
