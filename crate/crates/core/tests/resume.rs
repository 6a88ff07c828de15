use bmp_core::checkpoint::Checkpoint;
use bmp_core::data::{generate_synthetic, Dataset, SyntheticWorldConfig};
use bmp_core::model::ModelConfig;
use bmp_core::tensor::Real;
use bmp_core::training::{train, SampleIndex, TrainConfig, Trainer};
use std::path::Path;

fn world() -> Dataset {
    generate_synthetic(&SyntheticWorldConfig {
        n_attrs: 4,
        n_objs: 5,
        dim: 10,
        images_per_pair: 6,
        seed: 4,
        ..Default::default()
    })
    .unwrap()
}

fn trainer<T: Real>(ds: &Dataset, epochs: usize) -> Trainer<T> {
    let cfg = TrainConfig {
        batch_size: 8,
        epochs,
        seed: 21,
        ..Default::default()
    };
    Trainer::new(ModelConfig::new(4, 5, ds.input_dim(), 6), cfg).unwrap()
}

fn through_bytes<T: Real>(t: &Trainer<T>, ds: &Dataset) -> Trainer<T> {
    let bytes = Checkpoint::from_trainer(t, &ds.universe).to_bytes();
    Checkpoint::<T>::from_bytes(&bytes, Path::new("memory"))
        .unwrap()
        .into_trainer()
        .unwrap()
}

fn split_run_matches<T: Real>() {
    let ds = world();
    let index = SampleIndex::from_dataset(&ds).unwrap();
    let mut straight = trainer::<T>(&ds, 1);
    let losses: Vec<f64> = (0..10)
        .map(|_| straight.step(&ds, &index).unwrap().losses.total)
        .collect();

    let mut first = trainer::<T>(&ds, 1);
    for _ in 0..5 {
        first.step(&ds, &index).unwrap();
    }
    let mut resumed = through_bytes(&first, &ds);
    drop(first);
    let tail: Vec<f64> = (0..5)
        .map(|_| resumed.step(&ds, &index).unwrap().losses.total)
        .collect();

    assert_eq!(resumed.model, straight.model);
    assert_eq!(resumed.optimizer, straight.optimizer);
    assert_eq!(resumed.step, 10);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&tail), bits(&losses[5..]));
}

#[test]
fn five_plus_five_steps_equal_ten_in_f64() {
    split_run_matches::<f64>();
}

#[test]
fn five_plus_five_steps_equal_ten_in_f32() {
    split_run_matches::<f32>();
}

#[test]
fn resuming_between_epochs_reproduces_the_records() {
    let ds = world();
    let mut straight = trainer::<f64>(&ds, 3);
    let full = train(&mut straight, &ds, |_, _, _| Ok(())).unwrap();

    let mut first = trainer::<f64>(&ds, 1);
    let head = train(&mut first, &ds, |_, _, _| Ok(())).unwrap();
    let mut resumed = through_bytes(&first, &ds);
    resumed.config.epochs = 3;
    let tail = train(&mut resumed, &ds, |_, _, _| Ok(())).unwrap();

    let joined: Vec<_> = head.records.iter().chain(&tail.records).collect();
    assert_eq!(joined.len(), full.records.len());
    for (a, b) in joined.iter().zip(&full.records) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert_eq!(a.val_auc.to_bits(), b.val_auc.to_bits());
    }
    assert_eq!(resumed.model, straight.model);
    assert_eq!(tail.best_epoch, full.best_epoch);
    assert_eq!(tail.best_val_auc, full.best_val_auc);
}

#[test]
fn restored_checkpoint_rejects_other_vocabularies() {
    let ds = world();
    let other = generate_synthetic(&SyntheticWorldConfig {
        n_attrs: 3,
        n_objs: 5,
        dim: 10,
        images_per_pair: 6,
        ..Default::default()
    })
    .unwrap();
    let ckpt = Checkpoint::from_trainer(&trainer::<f64>(&ds, 1), &ds.universe);
    assert!(ckpt.check_universe(&ds.universe).is_ok());
    assert!(ckpt.check_universe(&other.universe).is_err());
}
