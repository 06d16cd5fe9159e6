use seiznet::data::{load_csv, synthetic_samples, write_csv, PrepareOptions, Prepared, SplitName, TaskSpec};
use seiznet::models::{build_model, Arch, ModelGraph};
use seiznet::persistence::{decode, encode, CheckpointMeta};
use seiznet::training::{evaluate, train, TrainConfig};
use seiznet::Error;

fn prepared(task: u8, per_class: usize) -> Prepared {
    let opts = PrepareOptions {
        seed: 4,
        ..PrepareOptions::default()
    };
    Prepared::new(synthetic_samples(per_class, 21), TaskSpec::new(task).unwrap(), opts).unwrap()
}

fn lenet_config(task: u8, epochs: usize) -> TrainConfig {
    TrainConfig {
        arch: Arch::Lenet1d,
        task,
        epochs,
        batch_size: 16,
        seed: 8,
        ..TrainConfig::default()
    }
}

fn bits(model: &ModelGraph<f32>) -> Vec<Vec<u32>> {
    model
        .state()
        .iter()
        .map(|t| t.iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn partial_final_batch_is_kept() {
    let p = prepared(4, 10);
    let ten = p.train.subset(&(0..10).collect::<Vec<_>>());
    let mut model = build_model::<f32>(Arch::Lenet1d, 5, 0).unwrap();
    let config = TrainConfig {
        epochs: 1,
        batch_size: 4,
        ..lenet_config(4, 1)
    };
    let out = train(&mut model, &ten, &p.val, &config, |_| {}).unwrap();
    assert_eq!(out.steps, 3);
    assert_eq!(out.history.len(), 1);
}

#[test]
fn identical_runs_are_bit_identical() {
    let p = prepared(3, 20);
    let run = || {
        let mut model = build_model::<f32>(Arch::Lenet1d, 3, 8).unwrap();
        let out = train(&mut model, &p.train, &p.val, &lenet_config(3, 3), |_| {}).unwrap();
        let history: Vec<_> = out
            .history
            .iter()
            .map(|r| {
                (
                    r.train_loss.to_bits(),
                    r.train_accuracy,
                    r.val_loss.to_bits(),
                    r.val_accuracy,
                )
            })
            .collect();
        (history, bits(&model), out.best.state)
    };
    assert_eq!(run(), run());
}

#[test]
fn best_epoch_has_max_val_accuracy() {
    let p = prepared(1, 20);
    let mut model = build_model::<f32>(Arch::Lenet1d, 2, 8).unwrap();
    let out = train(&mut model, &p.train, &p.val, &lenet_config(1, 5), |_| {}).unwrap();
    let max = out.history.iter().map(|r| r.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(out.best.val_accuracy, max);
    let first = out.history.iter().find(|r| r.val_accuracy == max).unwrap();
    assert_eq!(out.best.epoch, first.epoch);

    model.set_state(&out.best.state).unwrap();
    assert_eq!(evaluate(&model, &p.val).unwrap().accuracy, out.best.val_accuracy);
}

#[test]
fn evaluation_is_pure() {
    let p = prepared(2, 20);
    let mut model = build_model::<f32>(Arch::Resnet26, 2, 3).unwrap();
    let config = TrainConfig {
        arch: Arch::Resnet26,
        ..lenet_config(2, 1)
    };
    train(&mut model, &p.train, &p.val, &config, |_| {}).unwrap();
    let before = bits(&model);
    let a = evaluate(&model, &p.test).unwrap();
    let b = evaluate(&model, &p.test).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, bits(&model));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let p = prepared(4, 20);
    let mut model = build_model::<f32>(Arch::Resnet26, 5, 2).unwrap();
    let config = TrainConfig {
        arch: Arch::Resnet26,
        ..lenet_config(4, 1)
    };
    let out = train(&mut model, &p.train, &p.val, &config, |_| {}).unwrap();
    let meta = CheckpointMeta {
        arch: Arch::Resnet26,
        task: 4,
        num_classes: 5,
        input_len: 178,
        seed: 2,
        best_epoch: out.best.epoch,
        val_accuracy: out.best.val_accuracy,
        config: serde_json::to_value(&config).unwrap(),
    };
    let ck = decode(&encode(&model, &p.standardizer, &meta).unwrap()).unwrap();
    let (x, _) = p.test.batch(&(0..p.test.len()).collect::<Vec<_>>());
    let before = model.infer(&x).unwrap();
    let after = ck.model.infer(&x).unwrap();
    let to_bits = |t: &seiznet::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(to_bits(&before), to_bits(&after));
}

#[test]
fn poisoned_weights_abort_with_coordinates() {
    let p = prepared(1, 10);
    let mut model = build_model::<f32>(Arch::Lenet1d, 2, 0).unwrap();
    model.linear_mut("fc3").unwrap().weight_mut().data_mut()[0] = f32::NAN;
    match train(&mut model, &p.train, &p.val, &lenet_config(1, 1), |_| {}) {
        Err(Error::Diverged { epoch: 1, batch: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn class_count_mismatch_rejected() {
    let p = prepared(4, 10);
    let mut model = build_model::<f32>(Arch::Lenet1d, 2, 0).unwrap();
    assert!(matches!(
        train(&mut model, &p.train, &p.val, &lenet_config(4, 1), |_| {}),
        Err(Error::LabelOutOfRange { .. })
    ));
}

#[test]
fn split_files_reload() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    let samples = synthetic_samples(12, 3);
    write_csv(&raw, &samples).unwrap();
    assert_eq!(load_csv(&raw).unwrap(), samples);

    let p = Prepared::new(samples, TaskSpec::new(1).unwrap(), PrepareOptions::default()).unwrap();
    let train_csv = dir.path().join("train.csv");
    p.write_split(SplitName::Train, &train_csv).unwrap();
    let back = load_csv(&train_csv).unwrap();
    assert_eq!(back.len(), p.assignment.train.len());
    for (s, &i) in back.iter().zip(&p.assignment.train) {
        assert_eq!(s, &p.dataset.samples[i]);
    }
    let text = std::fs::read_to_string(&train_csv).unwrap();
    assert!(text.lines().next().unwrap().ends_with(",X178,y,task_label"));
}

#[test]
fn standardized_training_features_are_centered() {
    let p = prepared(4, 30);
    let l = p.train.signal_len;
    for j in 0..l {
        let mean: f64 = p.train.features.chunks_exact(l).map(|r| r[j] as f64).sum::<f64>() / p.train.len() as f64;
        assert!(mean.abs() < 1e-6, "position {j}: {mean}");
    }
}
