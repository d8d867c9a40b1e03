#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fpdm::data::{sample_recipe, DistortionRanges, ImagePair};
use fpdm::model::{Arch, ModelConfig};
use fpdm::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Straight six-loop zero-padded "same" convolution.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * o * h * wd];
    for s in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad;
                                let ix = xx as isize + kx as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += wdat[((oc * c + ic) * k + ky) * k + kx]
                                    * xd[((s * c + ic) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((s * o + oc) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, h, wd], out).unwrap()
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Parameter count from the layer recipe, counted independently of the
/// builder: 3×3 conv units (weights + bias + BN scale/shift), 1×1 right-leg
/// projections and the 1×1 head.
pub fn expected_params(cfg: &ModelConfig) -> usize {
    let f = cfg.base_features;
    let d = cfg.depth;
    let mnet = cfg.arch == Arch::FpdMnet;
    let unit = |cin: usize, cout: usize| cin * 9 * cout + cout + 2 * cout;
    let block = |cin: usize, feat: usize| unit(cin, feat) + unit(feat, feat);
    let out_of = |feat: usize| if mnet { 2 * feat } else { feat };
    let leg = if mnet { 1 } else { 0 };

    let mut total = 0;
    let mut prev = 1;
    for l in 0..d {
        let cin = if l == 0 { 1 } else { prev + leg };
        total += block(cin, f << l);
        prev = out_of(f << l);
    }
    total += block(prev + leg, f << d);
    prev = out_of(f << d);
    let lf = (f / 4).max(1);
    let mut legs = 0;
    for l in (0..d).rev() {
        total += block(prev + out_of(f << l), f << l);
        prev = out_of(f << l);
        if mnet && l > 0 {
            total += prev * lf + lf;
            legs += lf;
        }
    }
    total + (prev + legs) + 1
}

pub fn synthetic_pairs(seed: u64, count: usize) -> Vec<ImagePair> {
    let ranges = DistortionRanges::default();
    (0..count)
        .map(|i| {
            let r = sample_recipe(seed, i, &ranges);
            let (clean, distorted) = r.render().unwrap();
            ImagePair {
                id: r.id,
                distorted,
                clean: Some(clean),
            }
        })
        .collect()
}
