//! The named finite-difference checks run by `fpdm gradcheck` and the test
//! suite: every differentiable op plus two tiny complete networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;

use super::{grad_check, grad_check_many, GradCheckConfig, GradReport};
use crate::autodiff::{self as ad, BatchNormState, Mode, Var};
use crate::error::{Error, Result};
use crate::metrics::{combined_loss, l1_loss, ms_ssim_var, ssim_var, LossConfig, SsimConfig};
use crate::model::{Arch, ModelConfig, ModelGraph};
use crate::tensor::Tensor;

/// Check names in the order `all` runs them.
pub const SUITE: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "abs",
    "pow_scalar",
    "clamp_min",
    "relu",
    "sigmoid",
    "sum",
    "mean",
    "mean_per_sample",
    "avg_pool2x2",
    "gaussian_filter",
    "conv2d",
    "conv2d_1x1",
    "conv2d_5x5",
    "max_pool2x2",
    "upsample2x",
    "concat_channels",
    "dropout",
    "batch_norm",
    "batch_norm_infer",
    "l1_loss",
    "ssim",
    "ms_ssim",
    "combined_loss",
    "model_mnet",
    "model_unet",
];

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element carries a distinct upstream gradient.
fn project(y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let weights = Var::constant(uniform(y.shape(), -1.0, 1.0, seed ^ 0x5eed));
    Ok(ad::sum(&ad::mul(y, &weights)?))
}

/// SSIM settings small enough for three scales on 32×32 images.
fn small_ssim() -> SsimConfig {
    SsimConfig {
        window: 7,
        sigma: 1.0,
        ..SsimConfig::default()
    }
}

fn small_loss() -> LossConfig {
    LossConfig {
        ssim: small_ssim(),
        ..LossConfig::default()
    }
}

fn unary(
    name: &str,
    shape: &[usize],
    range: (f64, f64),
    cfg: &GradCheckConfig,
    op: impl Fn(&Var<f64>) -> Result<Var<f64>>,
) -> Result<GradReport> {
    let x = uniform(shape, range.0, range.1, 1);
    grad_check(name, |v| project(&op(v)?, 2), &x, cfg)
}

fn binary(
    name: &str,
    b_range: (f64, f64),
    cfg: &GradCheckConfig,
    op: impl Fn(&Var<f64>, &Var<f64>) -> Result<Var<f64>>,
) -> Result<GradReport> {
    let a = uniform(&[2, 3, 4], -1.0, 1.0, 3);
    let b = uniform(&[2, 3, 4], b_range.0, b_range.1, 4);
    grad_check_many(name, |v| project(&op(&v[0], &v[1])?, 5), &[a, b], cfg)
}

fn conv(name: &str, k: usize, cfg: &GradCheckConfig) -> Result<GradReport> {
    let x = uniform(&[2, 3, 6, 7], -1.0, 1.0, 6);
    let w = uniform(&[4, 3, k, k], -0.5, 0.5, 7);
    let b = uniform(&[4], -0.5, 0.5, 8);
    grad_check_many(
        name,
        |v| project(&ad::conv2d(&v[0], &v[1], &v[2])?, 9),
        &[x, w, b],
        cfg,
    )
}

fn batch_norm(name: &str, mode: Mode, cfg: &GradCheckConfig) -> Result<GradReport> {
    let x = uniform(&[3, 2, 4, 5], -2.0, 2.0, 10);
    let gamma = uniform(&[2], 0.5, 1.5, 11);
    let beta = uniform(&[2], -0.5, 0.5, 12);
    let mut initial = BatchNormState::new(2);
    initial.running_mean = vec![0.3, -0.2];
    initial.running_var = vec![1.4, 0.6];
    let state = RefCell::new(initial);
    grad_check_many(
        name,
        |v| {
            let y = ad::batch_norm(&v[0], &v[1], &v[2], &mut state.borrow_mut(), mode)?;
            project(&y, 13)
        },
        &[x, gamma, beta],
        cfg,
    )
}

fn image_pair(
    name: &str,
    cfg: &GradCheckConfig,
    op: impl Fn(&Var<f64>, &Var<f64>) -> Result<Var<f64>>,
) -> Result<GradReport> {
    let x = uniform(&[2, 1, 32, 32], 0.05, 0.95, 14);
    let y = uniform(&[2, 1, 32, 32], 0.05, 0.95, 15);
    grad_check_many(name, |v| op(&v[0], &v[1]), &[x, y], cfg)
}

/// Tiny network (depth 2, base 2, 16×16, batch 2) checked with respect to
/// its input and every parameter in training mode, dropout included.
fn model(name: &str, arch: Arch, cfg: &GradCheckConfig) -> Result<GradReport> {
    let config = ModelConfig {
        arch,
        depth: 2,
        base_features: 2,
        input_height: 16,
        input_width: 16,
        ..ModelConfig::default()
    };
    let graph = ModelGraph::<f64>::build(&config, 21)?;
    let mut inputs = vec![uniform(&[2, 1, 16, 16], 0.0, 1.0, 22)];
    inputs.extend(graph.params().iter().map(|p| p.value.clone()));
    let graph = RefCell::new(graph);
    grad_check_many(
        name,
        |v| {
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let y = graph
                .borrow_mut()
                .trace(&v[0], &v[1..], Mode::Train, &mut rng)?;
            project(&y, 24)
        },
        &inputs,
        cfg,
    )
}

/// Runs one named check.
pub fn run_named(name: &str, cfg: &GradCheckConfig) -> Result<GradReport> {
    let c = cfg;
    match name {
        "add" => binary(name, (-1.0, 1.0), c, ad::add),
        "sub" => binary(name, (-1.0, 1.0), c, ad::sub),
        "mul" => binary(name, (-1.0, 1.0), c, ad::mul),
        "div" => binary(name, (0.5, 1.5), c, ad::div),
        "scale" => unary(name, &[3, 5], (-1.0, 1.0), c, |x| Ok(ad::scale(x, -1.7))),
        "add_scalar" => unary(name, &[3, 5], (-1.0, 1.0), c, |x| Ok(ad::add_scalar(x, 0.3))),
        "abs" => unary(name, &[3, 5], (-1.0, 1.0), c, |x| Ok(ad::abs(x))),
        "pow_scalar" => unary(name, &[3, 5], (0.2, 1.5), c, |x| Ok(ad::pow_scalar(x, 1.7))),
        "clamp_min" => unary(name, &[3, 5], (-1.0, 1.0), c, |x| Ok(ad::clamp_min(x, 0.1))),
        "relu" => unary(name, &[3, 5], (-1.0, 1.0), c, |x| Ok(ad::relu(x))),
        "sigmoid" => unary(name, &[3, 5], (-3.0, 3.0), c, |x| Ok(ad::sigmoid(x))),
        "sum" => unary(name, &[3, 5], (-1.0, 1.0), c, |x| Ok(ad::sum(x))),
        "mean" => unary(name, &[3, 5], (-1.0, 1.0), c, |x| Ok(ad::mean(x))),
        "mean_per_sample" => unary(name, &[3, 2, 2, 2], (-1.0, 1.0), c, ad::mean_per_sample),
        "avg_pool2x2" => unary(name, &[2, 2, 4, 6], (-1.0, 1.0), c, ad::avg_pool2x2),
        "gaussian_filter" => {
            let kernel = small_ssim().kernel::<f64>();
            unary(name, &[2, 1, 9, 10], (-1.0, 1.0), c, move |x| {
                ad::gaussian_filter_valid(x, &kernel)
            })
        }
        "conv2d" => conv(name, 3, c),
        "conv2d_1x1" => conv(name, 1, c),
        "conv2d_5x5" => conv(name, 5, c),
        "max_pool2x2" => unary(name, &[2, 2, 4, 6], (-1.0, 1.0), c, ad::max_pool2x2),
        "upsample2x" => unary(name, &[2, 2, 3, 4], (-1.0, 1.0), c, ad::upsample2x),
        "concat_channels" => {
            let a = uniform(&[2, 1, 3, 3], -1.0, 1.0, 16);
            let b = uniform(&[2, 3, 3, 3], -1.0, 1.0, 17);
            grad_check_many(
                name,
                |v| project(&ad::concat_channels(v)?, 18),
                &[a, b],
                c,
            )
        }
        "dropout" => unary(name, &[4, 25], (-1.0, 1.0), c, |x| {
            ad::dropout(x, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(19))
        }),
        "batch_norm" => batch_norm(name, Mode::Train, c),
        "batch_norm_infer" => batch_norm(name, Mode::Infer, c),
        "l1_loss" => image_pair(name, c, l1_loss),
        "ssim" => image_pair(name, c, |x, y| ssim_var(x, y, &small_ssim())),
        "ms_ssim" => image_pair(name, c, |x, y| ms_ssim_var(x, y, &small_loss())),
        "combined_loss" => image_pair(name, c, |x, y| combined_loss(x, y, &small_loss())),
        "model_mnet" => model(name, Arch::FpdMnet, c),
        "model_unet" => model(name, Arch::Unet, c),
        other => Err(Error::Config(format!(
            "unknown gradient check {:?}; known: all, {}",
            other,
            SUITE.join(", ")
        ))),
    }
}

/// Runs every check in [`SUITE`] order.
pub fn run_suite(cfg: &GradCheckConfig) -> Result<Vec<GradReport>> {
    SUITE.iter().map(|name| run_named(name, cfg)).collect()
}
