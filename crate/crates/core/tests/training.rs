mod common;

use common::{rng, synthetic_pairs, uniform};
use proptest::prelude::*;

use fpdm::data::{make_dataset, save_image, DatasetManifest, DistortionRanges, ImageFormat};
use fpdm::metrics::{SsimConfig, PSNR_CAP_DB};
use fpdm::model::ModelConfig;
use fpdm::training::{
    checkpoint_name, default_phase_boundary, evaluate_dirs, evaluate_with, lr_schedule,
    sgd_nesterov_step, train, train_pairs, Checkpoint, NesterovSgd, TrainConfig, TrainLog,
    CHECKPOINT_MAGIC, LOG_FILE,
};
use fpdm::{Error, Tensor};

fn tiny(epochs: usize, batch: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        phase_boundary: default_phase_boundary(epochs),
        seed,
        model: ModelConfig {
            depth: 2,
            base_features: 2,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn nesterov_matches_expanded_recurrence() {
    // Quadratic bowl f(θ) = ½·a·θ², gradient a·θ, tracked with the update
    // expanded as θ' = θ + m²·v − (1 + m)·lr·g.
    let a = [0.5, 2.0, 3.0, 0.1];
    let mut theta = Tensor::<f64>::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let mut vel = Tensor::<f64>::zeros(&[4]);
    let mut t_ref: Vec<f64> = theta.data().to_vec();
    let mut v_ref = vec![0.0; 4];
    let (lr, m) = (0.05, 0.9);
    for _ in 0..100 {
        let g = Tensor::from_fn(&[4], |i| a[i] * theta.data()[i]);
        sgd_nesterov_step(&mut theta, &g, &mut vel, lr, m).unwrap();
        for i in 0..4 {
            let g = a[i] * t_ref[i];
            t_ref[i] += m * m * v_ref[i] - (1.0 + m) * lr * g;
            v_ref[i] = m * v_ref[i] - lr * g;
        }
    }
    for i in 0..4 {
        let scale = t_ref[i].abs().max(1.0);
        assert!((theta.data()[i] - t_ref[i]).abs() / scale <= 1e-12);
        assert!((vel.data()[i] - v_ref[i]).abs() <= 1e-12);
    }
}

#[test]
fn schedule_phases_and_decay() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(0, 0, &cfg), (0.1, 0.75));
    assert_eq!(lr_schedule(49, 0, &cfg), (0.1, 0.75));
    assert_eq!(lr_schedule(50, 0, &cfg), (0.01, 0.95));
    assert_eq!(lr_schedule(74, 0, &cfg), (0.01, 0.95));
    assert_eq!(cfg.decay, 0.00001);
    for updates in [1u64, 100, 12_345, 1_000_000] {
        let (lr, _) = lr_schedule(3, updates, &cfg);
        assert_eq!(lr, 0.1 / (1.0 + 0.00001 * updates as f64));
        let (lr, _) = lr_schedule(60, updates, &cfg);
        assert_eq!(lr, 0.01 / (1.0 + 0.00001 * updates as f64));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = tiny(2, 1, 0);
    c.batch_size = 0;
    assert!(c.validate().is_err());
    let mut c = tiny(2, 1, 0);
    c.momentum_phase2 = 1.0;
    assert!(c.validate().is_err());
    let mut c = tiny(2, 1, 0);
    c.lr_phase1 = -0.1;
    assert!(c.validate().is_err());
}

#[test]
fn one_epoch_bookkeeping() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synthetic_pairs(3, 2);
    let out = train_pairs::<f32>(&tiny(1, 1, 0), &pairs, Some(dir.path()), &mut |_| {}).unwrap();
    assert_eq!(out.log.rows.len(), 2);
    assert_eq!(out.log.rows[0].step, 0);
    assert_eq!(out.log.rows[1].step, 1);
    assert_eq!(out.checkpoint_paths, vec![dir.path().join(checkpoint_name(1))]);
    assert!(dir.path().join(LOG_FILE).exists());
    assert_eq!(out.checkpoint.epoch, 1);
    assert_eq!(out.checkpoint.updates, 2);
    let saved = Checkpoint::<f32>::load(&out.checkpoint_paths[0]).unwrap();
    assert_eq!(saved, out.checkpoint);
}

#[test]
fn log_learning_rates_follow_the_schedule_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = synthetic_pairs(5, 3);
    let cfg = TrainConfig {
        phase_boundary: 1,
        decay: 0.01,
        ..tiny(3, 2, 1)
    };
    let out = train_pairs::<f32>(&cfg, &pairs, Some(dir.path()), &mut |_| {}).unwrap();
    assert_eq!(out.log.rows.len(), 6);
    let reloaded = TrainLog::load(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(reloaded, out.log);
    for row in &reloaded.rows {
        let (lr, _) = lr_schedule(row.epoch, row.step, &cfg);
        assert_eq!(row.lr.to_bits(), lr.to_bits());
    }
    let means = out.log.epoch_means();
    assert_eq!(means.len(), 3);
}

#[test]
fn training_is_deterministic() {
    let pairs = synthetic_pairs(8, 3);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = train_pairs::<f32>(&tiny(2, 2, 4), &pairs, Some(dir.path()), &mut |_| {}).unwrap();
        let ckpt = std::fs::read(&out.checkpoint_paths[1]).unwrap();
        let log = std::fs::read(dir.path().join(LOG_FILE)).unwrap();
        (ckpt, log)
    };
    assert_eq!(run(), run());
}

#[test]
fn training_requires_ground_truth() {
    let mut pairs = synthetic_pairs(1, 1);
    pairs[0].clean = None;
    assert!(matches!(
        train_pairs::<f32>(&tiny(1, 1, 0), &pairs, None, &mut |_| {}),
        Err(Error::Dataset(_))
    ));
    assert!(train_pairs::<f32>(&tiny(1, 1, 0), &[], None, &mut |_| {}).is_err());
}

#[test]
fn train_reads_a_generated_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_dataset(2, 6, dir.path(), &DistortionRanges::default(), ImageFormat::Png).unwrap();
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded.entries, manifest.entries);
    let out = train::<f32>(&tiny(1, 2, 0), &loaded, None, &mut |_| {}).unwrap();
    assert_eq!(out.log.rows.len(), 1);
    assert!(out.checkpoint_paths.is_empty());
}

fn trained_checkpoint() -> (Checkpoint<f32>, fpdm::model::ModelGraph<f32>) {
    let pairs = synthetic_pairs(2, 2);
    let out = train_pairs::<f32>(&tiny(2, 2, 3), &pairs, None, &mut |_| {}).unwrap();
    (out.checkpoint, out.model)
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let (ckpt, mut model) = trained_checkpoint();
    assert_eq!(ckpt.entry_count(), 2 * model.params().len());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fpdm");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let mut rebuilt = loaded.build_model().unwrap();
    let x = uniform(&[1, 1, 368, 400], 0.0, 1.0, &mut rng(1)).cast::<f32>();
    let cfg_size = |m: &mut fpdm::model::ModelGraph<f32>| m.set_input_size(368, 400).unwrap();
    cfg_size(&mut model);
    cfg_size(&mut rebuilt);
    let a = model.infer(&x).unwrap();
    let b = rebuilt.infer(&x).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(loaded.optimizer().velocities(), ckpt.velocities.as_slice());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let (ckpt, _) = trained_checkpoint();
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[..4], CHECKPOINT_MAGIC);

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::<f32>::from_bytes(&bad_magic), Err(Error::Parse(_))));

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bad_version),
        Err(Error::Version { found: 9, .. })
    ));

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes[..cut]), Err(Error::Parse(_))), "cut {}", cut);
    }

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(Checkpoint::<f32>::from_bytes(&trailing), Err(Error::Parse(_))));

    // An f32 file read as f64 carries the wrong dtype tag.
    assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::Parse(_))));
}

#[test]
fn checkpoint_rejects_mismatched_model() {
    let (ckpt, _) = trained_checkpoint();
    let other = ModelConfig {
        depth: 2,
        base_features: 4,
        ..ModelConfig::default()
    };
    let mut model = fpdm::model::ModelGraph::<f32>::build(&other, 0).unwrap();
    assert!(ckpt.apply_to(&mut model).is_err());
}

#[test]
fn optimizer_restores_from_checkpoint() {
    let (ckpt, model) = trained_checkpoint();
    let opt: NesterovSgd<f32> = ckpt.optimizer();
    assert_eq!(opt.velocities().len(), model.params().len());
    assert!(opt.velocities().iter().any(|v| v.data().iter().any(|&x| x != 0.0)));
}

#[test]
fn evaluating_a_directory_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    for (i, p) in synthetic_pairs(1, 3).iter().enumerate() {
        save_image(&p.distorted, &dir.path().join(format!("img{}.png", i))).unwrap();
    }
    let report = evaluate_dirs(dir.path(), dir.path(), &SsimConfig::default()).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.mean.mse, 0.0);
    assert_eq!(report.mean.psnr_db, PSNR_CAP_DB);
    assert!((report.mean.ssim - 1.0).abs() < 1e-9);
}

#[test]
fn evaluation_means_are_per_image_averages() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_dataset(3, 2, dir.path(), &DistortionRanges::default(), ImageFormat::Pgm).unwrap();
    let report = evaluate_with(&manifest, &SsimConfig::default(), |img| Ok(img.clone())).unwrap();
    let mut total = 0.0;
    for i in 0..manifest.len() {
        let pair = manifest.load_pair(i).unwrap();
        let clean = pair.clean.unwrap();
        let mse = pair
            .distorted
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / clean.data().len() as f64;
        assert!((report.rows[i].mse - mse).abs() < 1e-12);
        total += mse;
    }
    assert!((report.mean.mse - total / 3.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_momentum_step_is_gradient_descent(p in -10.0f64..10.0, g in -10.0f64..10.0, lr in 1e-4f64..1.0) {
        let mut param = Tensor::scalar(p);
        let mut v = Tensor::zeros(&[]);
        sgd_nesterov_step(&mut param, &Tensor::scalar(g), &mut v, lr, 0.0).unwrap();
        prop_assert_eq!(param.data()[0], p - lr * g);
    }

    #[test]
    fn schedule_lr_never_increases_within_a_phase(epoch in 0usize..75, u in 0u64..1_000_000) {
        let cfg = TrainConfig::default();
        let (a, _) = lr_schedule(epoch, u, &cfg);
        let (b, _) = lr_schedule(epoch, u + 1, &cfg);
        prop_assert!(b <= a);
        prop_assert!(a > 0.0);
    }
}
