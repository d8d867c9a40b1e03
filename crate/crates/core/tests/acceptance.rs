//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{max_rel_diff, naive_conv, rng, synthetic_pairs, uniform};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use fpdm::autodiff::{conv2d, Var};
use fpdm::data::{pad_edge, unpad, DatasetManifest, GrayImage, NATIVE_SIZE, PADDED_SIZE};
use fpdm::gradcheck::{run_suite, GradCheckConfig};
use fpdm::metrics::{combined_loss, ms_ssim, psnr_from_mse, ssim, LossConfig, SsimConfig};
use fpdm::model::{Arch, BnOrder, ModelConfig, ModelGraph};
use fpdm::training::{
    evaluate, lr_schedule, train_pairs, Checkpoint, TrainConfig, TrainLog, LOG_FILE,
};
use fpdm::{Error, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fpdm(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fpdm"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "fpdm {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let reports = run_suite(&GradCheckConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    check(
        failed.is_empty() && worst <= 1e-3 && elapsed <= Duration::from_secs(120),
        format!(
            "{} checks, worst rel err {:.2e} (≤ 1e-3), {:.1}s (≤ 120s), failed {:?}",
            reports.len(),
            worst,
            elapsed.as_secs_f64(),
            failed
        ),
    )
}

fn conv_oracle() -> Outcome {
    let mut r = rng(77);
    let mut worst = 0.0f64;
    let cases = 120;
    for _ in 0..cases {
        let n = r.gen_range(1..=8);
        let c = r.gen_range(1..=8);
        let o = r.gen_range(1..=8);
        let h = r.gen_range(1..=8);
        let w = r.gen_range(1..=8);
        let k = [1, 3, 5, 7][r.gen_range(0..4)];
        let x = uniform(&[n, c, h, w], -1.0, 1.0, &mut r);
        let wt = uniform(&[o, c, k, k], -1.0, 1.0, &mut r);
        let b = uniform(&[o], -1.0, 1.0, &mut r);
        let got = conv2d(&Var::constant(x.clone()), &Var::constant(wt.clone()), &Var::constant(b.clone()))
            .map_err(|e| e.to_string())?;
        worst = worst.max(max_rel_diff(got.value().data(), naive_conv(&x, &wt, &b).data()));
    }
    check(worst <= 1e-12, format!("{} instances, worst rel diff {:.2e} (≤ 1e-12)", cases, worst))
}

fn metric_closed_forms() -> Outcome {
    let cfg = SsimConfig::default();
    let x = uniform(&[1, 1, 48, 48], 0.0, 1.0, &mut rng(1));
    let self_ssim = ssim(&x, &x, &cfg).map_err(|e| e.to_string())?;
    let zeros = Tensor::<f64>::zeros(&[1, 1, 32, 32]);
    let ones = Tensor::<f64>::ones(&[1, 1, 32, 32]);
    let bw = ssim(&zeros, &ones, &cfg).map_err(|e| e.to_string())?;
    let c1 = 0.01f64 * 0.01;
    let psnr = psnr_from_mse(0.01, 1.0);
    let loss_cfg = LossConfig::default();
    let loss = combined_loss(&Var::constant(x.clone()), &Var::constant(x), &loss_cfg)
        .map_err(|e| e.to_string())?
        .item();
    check(
        (self_ssim - 1.0).abs() <= 1e-9
            && (bw - c1 / (1.0 + c1)).abs() <= 1e-7
            && (bw - 9.999e-5).abs() <= 1e-7
            && psnr == 20.0
            && loss.abs() <= 1e-9
            && loss_cfg.delta == 0.85,
        format!(
            "ssim(x,x)={:.12}, ssim(0,1)={:.6e}, psnr(0.01)={}, loss(x,x)={:.1e}",
            self_ssim, bw, psnr, loss
        ),
    )
}

fn shape_contract() -> Outcome {
    let (h, w) = PADDED_SIZE;
    let x = uniform(&[1, 1, h, w], 0.0, 1.0, &mut rng(4)).cast::<f32>();
    let mut notes = Vec::new();
    let mut ok = true;
    for arch in [Arch::FpdMnet, Arch::Unet] {
        for order in [BnOrder::AfterRelu, BnOrder::BeforeRelu] {
            let cfg = ModelConfig {
                arch,
                bn_order: order,
                depth: 4,
                base_features: 64,
                input_height: h,
                input_width: w,
                ..ModelConfig::default()
            };
            let mut model = ModelGraph::<f32>::build(&cfg, 0).map_err(|e| e.to_string())?;
            let y = model.infer(&x).map_err(|e| e.to_string())?;
            let inside = y.data().iter().all(|&v| v > 0.0 && v < 1.0);
            ok &= y.shape() == [1, 1, h, w] && inside;
            notes.push(format!("{} {:?}", cfg.variant_name(), y.shape()));
        }
    }
    let img = GrayImage::from_fn(NATIVE_SIZE.0, NATIVE_SIZE.1, |r, c| ((r * 7 + c * 3) % 256) as f32 / 255.0);
    let (padded, plan) = pad_edge(&img).map_err(|e| e.to_string())?;
    let back = unpad(&padded, &plan).map_err(|e| e.to_string())?;
    ok &= padded.dims() == (368, 496) && back == img;
    check(ok, format!("{}; pad 275x400 -> {:?}, unpad exact {}", notes.join(", "), padded.dims(), back == img))
}

fn schedule_contract() -> Outcome {
    let cfg = TrainConfig::default();
    let table_ok = lr_schedule(0, 0, &cfg) == (0.1, 0.75)
        && lr_schedule(49, 0, &cfg) == (0.1, 0.75)
        && lr_schedule(50, 0, &cfg) == (0.01, 0.95)
        && cfg.decay == 0.00001
        && lr_schedule(10, 5000, &cfg).0 == 0.1 / (1.0 + 0.00001 * 5000.0);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let small = TrainConfig {
        epochs: 3,
        batch_size: 1,
        phase_boundary: 2,
        model: ModelConfig {
            depth: 2,
            base_features: 2,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    train_pairs::<f32>(&small, &synthetic_pairs(1, 2), Some(dir.path()), &mut |_| {})
        .map_err(|e| e.to_string())?;
    let log = TrainLog::load(&dir.path().join(LOG_FILE)).map_err(|e| e.to_string())?;
    let bits_ok = log
        .rows
        .iter()
        .all(|r| r.lr.to_bits() == lr_schedule(r.epoch, r.step, &small).0.to_bits());
    check(
        table_ok && bits_ok && log.rows.len() == 6,
        format!("table values {}, {} logged lr values bit-exact {}", table_ok, log.rows.len(), bits_ok),
    )
}

fn overfit_demo() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let start = Instant::now();
    fpdm(&["generate-data", "--out", p(&data), "--count", "4", "--seed", "7"])?;
    fpdm(&[
        "train", "--data", p(&data), "--out", p(&run), "--depth", "2", "--base", "8", "--batch", "2",
        "--epochs", "150", "--seed", "1", "--quiet",
    ])?;
    let elapsed = start.elapsed();
    let log = TrainLog::load(&run.join(LOG_FILE)).map_err(|e| e.to_string())?;
    let means = log.epoch_means();
    let (first, last) = (means[0], *means.last().unwrap());
    let reduction = 1.0 - last / first;
    let ckpt = Checkpoint::<f32>::load(&run.join("final.fpdm")).map_err(|e| e.to_string())?;
    let mut model = ckpt.build_model().map_err(|e| e.to_string())?;
    let manifest = DatasetManifest::load(&data).map_err(|e| e.to_string())?;
    let report = evaluate(&mut model, &manifest, &SsimConfig::default()).map_err(|e| e.to_string())?;
    check(
        log.rows.len() == 300
            && reduction >= 0.5
            && report.mean.psnr_db >= 18.0
            && elapsed <= Duration::from_secs(15 * 60),
        format!(
            "{} steps, epoch loss {:.4} -> {:.4} ({:.0}% drop, need ≥ 50%), train PSNR {:.2} dB (need ≥ 18), {:.0}s (≤ 900s)",
            log.rows.len(),
            first,
            last,
            100.0 * reduction,
            report.mean.psnr_db,
            elapsed.as_secs_f64()
        ),
    )
}

fn end_to_end(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let data = root.join("data");
    let run = root.join("run");
    let preds = root.join("preds");
    fpdm(&["generate-data", "--out", p(&data), "--count", "3", "--seed", "11"])?;
    fpdm(&[
        "train", "--data", p(&data), "--out", p(&run), "--depth", "2", "--base", "2", "--batch", "2",
        "--epochs", "2", "--seed", "5", "--quiet",
    ])?;
    fpdm(&["infer", "--model", p(&run.join("final.fpdm")), "--input", p(&data.join("distorted")), "--output", p(&preds)])?;
    let mut files = Vec::new();
    for sub in ["data/clean", "data/distorted", "data", "run", "preds"] {
        let dir = root.join(sub);
        let mut names: Vec<_> = std::fs::read_dir(&dir)
            .map_err(|e| e.to_string())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for path in names {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            files.push((rel, std::fs::read(&path).map_err(|e| e.to_string())?));
        }
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fa = end_to_end(a.path())?;
    let fb = end_to_end(b.path())?;
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        fa.len() == fb.len() && differing.is_empty() && fa.len() >= 15,
        format!("{} files compared byte for byte, differing {:?}", fa.len(), differing),
    )
}

fn checkpoint_integrity() -> Outcome {
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        phase_boundary: 1,
        model: ModelConfig {
            depth: 2,
            base_features: 4,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let out = train_pairs::<f32>(&cfg, &synthetic_pairs(21, 2), None, &mut |_| {}).map_err(|e| e.to_string())?;
    let mut model = out.model;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("c.fpdm");
    out.checkpoint.save(&path).map_err(|e| e.to_string())?;
    let mut loaded = Checkpoint::<f32>::load(&path)
        .and_then(|c| c.build_model())
        .map_err(|e| e.to_string())?;
    let x = uniform(&[2, 1, 368, 496], 0.0, 1.0, &mut rng(8)).cast::<f32>();
    let before = model.infer(&x).map_err(|e| e.to_string())?;
    let after = loaded.infer(&x).map_err(|e| e.to_string())?;
    let identical = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mut corrupt = Vec::new();
    let mut magic = bytes.clone();
    magic[1] ^= 0xff;
    corrupt.push(magic);
    corrupt.push(bytes[..bytes.len() - 5].to_vec());
    corrupt.push(bytes[..bytes.len() / 3].to_vec());
    let mut extra = bytes.clone();
    extra.extend_from_slice(b"junk");
    corrupt.push(extra);
    let rejected = corrupt
        .iter()
        .filter(|c| matches!(Checkpoint::<f32>::from_bytes(c), Err(Error::Parse(_))))
        .count();
    check(
        identical && rejected == corrupt.len(),
        format!("forward bit-identical {}, corrupted files rejected {}/{}", identical, rejected, corrupt.len()),
    )
}

fn ms_ssim_monotonicity() -> Outcome {
    let cfg = LossConfig::default();
    let mut bad = Vec::new();
    for seed in 0..10u64 {
        let clean = synthetic_pairs(seed + 100, 1).remove(0).clean.unwrap();
        let clean: Tensor<f64> = clean.to_tensor();
        let mut r = rng(seed);
        let scores: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|&sigma| {
                let normal = Normal::new(0.0, sigma).unwrap();
                let noisy = Tensor::from_fn(clean.shape(), |i| clean.data()[i] + normal.sample(&mut r));
                ms_ssim(&clean, &noisy, &cfg).unwrap()
            })
            .collect();
        if !(scores[0] > scores[1] && scores[1] > scores[2]) {
            bad.push((seed, scores));
        }
    }
    check(bad.is_empty(), format!("10 seeds, non-monotone {:?}", bad))
}

fn main() {
    // `cargo test -- <filter>` passes arguments; honour `--list` quietly.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient suite", gradient_suite),
        ("2 convolution oracle", conv_oracle),
        ("3 metric closed forms", metric_closed_forms),
        ("4 architecture shape contract", shape_contract),
        ("5 schedule contract", schedule_contract),
        ("6 overfit demo", overfit_demo),
        ("7 determinism", determinism),
        ("8 checkpoint integrity", checkpoint_integrity),
        ("9 ms-ssim monotonicity", ms_ssim_monotonicity),
    ];
    let mut failures = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {} [{:.1}s]", name, detail, secs),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {}: {} [{:.1}s]", name, detail, secs);
            }
        }
    }
    println!("acceptance: {} passed, {} failed", 9 - failures, failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
