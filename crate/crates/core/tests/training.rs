//! Training-loop behavior: overfitting, loss composition, determinism and
//! failure handling.

use std::path::Path;

use transmusic::array::Quantization;
use transmusic::dataset::{Dataset, DatasetConfig};
use transmusic::model::{ModelConfig, TransMusic};
use transmusic::nn::{AdamConfig, Tape};
use transmusic::training::{cross_entropy, loss_csv_path, rmspe_loss, train, train_step, TrainConfig, LOSS_CSV_HEADER};
use transmusic::Error;

fn small_dataset(count: u64, snapshots: usize, seed: u64) -> Dataset {
    let cfg = DatasetConfig {
        count,
        snapshots,
        base_seed: seed,
        ..Default::default()
    };
    Dataset {
        base_seed: seed,
        records: (0..count).map(|i| cfg.record(i).unwrap()).collect(),
    }
}

#[test]
fn overfits_a_64_record_dataset() {
    let data = small_dataset(64, 50, 21);
    let mut model = TransMusic::new(ModelConfig::default(), 5).unwrap();
    let cfg = TrainConfig::default();
    let adam = AdamConfig::default();
    let batch: Vec<usize> = (0..64).collect();
    let mut last = f64::INFINITY;
    for epoch in 0..2000 {
        let (r, _) = train_step(&mut model, &data.records, &batch, &cfg, &adam).unwrap();
        last = (r / 64.0).to_degrees();
        if last < 0.5 {
            eprintln!("reached {last:.3} deg after {} epochs", epoch + 1);
            break;
        }
    }
    assert!(last < 0.5, "training RMSPE still {last:.3} deg after 2000 epochs");
}

#[test]
fn zero_ce_weight_leaves_source_number_head_without_gradient() {
    let data = small_dataset(4, 20, 3);
    let model = TransMusic::new(ModelConfig::default(), 1).unwrap();
    let inputs: Vec<_> = data
        .records
        .iter()
        .map(|r| r.snapshots.with_quantization(Quantization::OneBit).unwrap())
        .collect();
    let refs: Vec<_> = inputs.iter().collect();
    let truths: Vec<&[f64]> = data.records.iter().map(|r| r.scenario.thetas()).collect();
    let classes: Vec<usize> = data.records.iter().map(|r| r.scenario.sources()).collect();
    let mut tape = Tape::new();
    let p = model.store().bind(&mut tape, true);
    let out = model.forward_on(&mut tape, &p, &refs).unwrap();
    let l1 = rmspe_loss(&mut tape, out.doas, &truths, 0.25).unwrap();
    let l2 = cross_entropy(&mut tape, out.sn_probs, &classes, 0.0).unwrap();
    let total = tape.add(l1, l2).unwrap();
    tape.backward(total).unwrap();
    for (param, &v) in model.store().params().iter().zip(p.vars()) {
        let g = tape.grad(v);
        if param.name.starts_with("sn.") {
            assert!(g.is_none_or(|g| g.iter().all(|x| *x == 0.0)), "{}", param.name);
        }
    }
    let enc = model.store().id("encoder.1.ffn.0.weight").unwrap();
    assert!(tape.grad(p.var(enc)).is_some_and(|g| g.iter().any(|x| *x != 0.0)));
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed,
        validation_fraction: 0.25,
        ..Default::default()
    }
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let data = small_dataset(48, 30, 8);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tmck"), dir.path().join("b.tmck"));
    let ra = train(&quick_config(4), &ModelConfig::default(), &data, &a, |_| {}).unwrap();
    let rb = train(&quick_config(4), &ModelConfig::default(), &data, &b, |_| {}).unwrap();
    assert_eq!(ra.reports, rb.reports);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(loss_csv_path(&a)).unwrap(),
        std::fs::read(loss_csv_path(&b)).unwrap()
    );
    let rc = train(&quick_config(5), &ModelConfig::default(), &data, &b, |_| {}).unwrap();
    assert_ne!(ra.reports, rc.reports);
}

#[test]
fn loss_log_has_one_row_per_epoch_plus_initial() {
    let data = small_dataset(32, 20, 2);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.tmck");
    let out = train(&quick_config(1), &ModelConfig::default(), &data, &ckpt, |_| {}).unwrap();
    let csv = std::fs::read_to_string(loss_csv_path(&ckpt)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], LOSS_CSV_HEADER);
    assert_eq!(lines.len(), 1 + 4);
    assert_eq!(out.reports.len(), 4);
    assert_eq!(out.reports[0].epoch, 0);
    assert!(out
        .reports
        .iter()
        .all(|r| r.train_rmspe.is_finite() && r.val_rmspe.is_finite()));
    let best = out.reports.iter().map(|r| r.val_rmspe).fold(f64::INFINITY, f64::min);
    assert_eq!(out.reports[out.best_epoch].val_rmspe, best);
    let loaded = TransMusic::load(&ckpt).unwrap();
    assert_eq!(loaded.store().params()[0].value, out.model.store().params()[0].value);
}

#[test]
fn divergence_aborts_and_keeps_last_good_checkpoint() {
    let data = small_dataset(32, 20, 6);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.tmck");
    let cfg = TrainConfig {
        learning_rate: 1e200,
        ..quick_config(2)
    };
    let err = train(&cfg, &ModelConfig::default(), &data, &ckpt, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let kept = TransMusic::load(&ckpt).unwrap();
    assert!(kept.store().params().iter().all(|p| p.value.is_finite()));
}

#[test]
fn antenna_mismatch_is_a_config_error() {
    let data = small_dataset(8, 10, 1);
    let mc = ModelConfig {
        antennas: 6,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let err = train(&quick_config(0), &mc, &data, &dir.path().join("m"), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn invalid_train_configs_are_rejected() {
    let data = small_dataset(8, 10, 1);
    let p = Path::new("/nonexistent/never-written");
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
        TrainConfig {
            ce_weight: -1.0,
            ..Default::default()
        },
    ] {
        assert!(matches!(
            train(&cfg, &ModelConfig::default(), &data, p, |_| {}),
            Err(Error::Config(_))
        ));
    }
}
