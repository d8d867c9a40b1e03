//! Reference-based image quality metrics and the training loss.
//!
//! All images are N×C×H×W tensors with values in `[0, 1]`. The SSIM family
//! is built from differentiable graph operations so the same code serves as
//! evaluation metric and as loss term.

use std::io::Write;
use std::path::Path;

use crate::autodiff::{
    abs, add, add_scalar, avg_pool2x2, clamp_min, div, gaussian_filter_valid, mean,
    mean_per_sample, mul, pow_scalar, scale, sub, Var,
};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// PSNR reported for a pair with zero mean squared error.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Lower bound applied to per-scale MS-SSIM terms before the fractional
/// power, keeping the product and its gradient finite.
pub const MS_SSIM_TERM_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "SSIM window must be odd, got {}",
                self.window
            )));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(Error::Config(
                "SSIM sigma, K1, K2 and dynamic range must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalised 1-D Gaussian window.
    pub fn kernel<T: Float>(&self) -> Vec<T> {
        let centre = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - centre;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| T::from_f64(v / total)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the MS-SSIM term; the L1 term gets `1 - delta`.
    pub delta: f64,
    /// One exponent per scale, finest first.
    pub scale_weights: Vec<f64>,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 0.85,
            scale_weights: vec![0.0710, 0.4530, 0.4760],
            ssim: SsimConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn scales(&self) -> usize {
        self.scale_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.ssim.validate()?;
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta must lie in [0, 1], got {}", self.delta)));
        }
        if self.scale_weights.is_empty() {
            return Err(Error::Config("MS-SSIM needs at least one scale".into()));
        }
        let total: f64 = self.scale_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "MS-SSIM scale weights must sum to 1, got {}",
                total
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    a.expect_same_shape(b)?;
    if a.is_empty() {
        return Err(Error::Shape("metrics need non-empty images".into()));
    }
    Ok(())
}

pub fn mse<T: Float>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    check_pair(pred, reference)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&p, &r)| {
            let d = p.as_f64() - r.as_f64();
            d * d
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Mean absolute difference.
pub fn l1<T: Float>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    check_pair(pred, reference)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&p, &r)| (p.as_f64() - r.as_f64()).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// `10·log10(peak² / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr<T: Float>(pred: &Tensor<T>, reference: &Tensor<T>, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, reference)?, peak))
}

/// Luminance and contrast-structure maps, each N×C×(H−w+1)×(W−w+1).
fn ssim_maps<T: Float>(x: &Var<T>, y: &Var<T>, cfg: &SsimConfig) -> Result<(Var<T>, Var<T>)> {
    let kernel: Vec<T> = cfg.kernel();
    let filt = |v: &Var<T>| gaussian_filter_valid(v, &kernel);

    let mu_x = filt(x)?;
    let mu_y = filt(y)?;
    let mu_xx = mul(&mu_x, &mu_x)?;
    let mu_yy = mul(&mu_y, &mu_y)?;
    let mu_xy = mul(&mu_x, &mu_y)?;
    let var_x = sub(&filt(&mul(x, x)?)?, &mu_xx)?;
    let var_y = sub(&filt(&mul(y, y)?)?, &mu_yy)?;
    let cov = sub(&filt(&mul(x, y)?)?, &mu_xy)?;

    let (c1, c2) = (cfg.c1(), cfg.c2());
    let lum = div(
        &add_scalar(&scale(&mu_xy, 2.0), c1),
        &add_scalar(&add(&mu_xx, &mu_yy)?, c1),
    )?;
    let cs = div(
        &add_scalar(&scale(&cov, 2.0), c2),
        &add_scalar(&add(&var_x, &var_y)?, c2),
    )?;
    Ok((lum, cs))
}

fn check_window<T: Float>(x: &Var<T>, window: usize, what: &str) -> Result<()> {
    let (_, _, h, w) = x.value().dims4()?;
    if h < window || w < window {
        return Err(Error::TooSmall(format!(
            "{}: {}×{} image is smaller than the {}-pixel window",
            what, h, w, window
        )));
    }
    Ok(())
}

/// Per-sample SSIM, shape `[N]`.
pub fn ssim_per_sample<T: Float>(x: &Var<T>, y: &Var<T>, cfg: &SsimConfig) -> Result<Var<T>> {
    cfg.validate()?;
    x.value().expect_same_shape(y.value())?;
    check_window(x, cfg.window, "ssim")?;
    let (lum, cs) = ssim_maps(x, y, cfg)?;
    mean_per_sample(&mul(&lum, &cs)?)
}

/// Differentiable SSIM averaged over the batch.
pub fn ssim_var<T: Float>(x: &Var<T>, y: &Var<T>, cfg: &SsimConfig) -> Result<Var<T>> {
    Ok(mean(&ssim_per_sample(x, y, cfg)?))
}

/// SSIM of two images (batch mean for N > 1).
pub fn ssim<T: Float>(pred: &Tensor<T>, reference: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    check_pair(pred, reference)?;
    let v = ssim_var(
        &Var::constant(pred.clone()),
        &Var::constant(reference.clone()),
        cfg,
    )?;
    Ok(v.item().as_f64())
}

/// Per-sample multi-scale SSIM, shape `[N]`.
///
/// Scale `j` contributes its mean contrast-structure term raised to
/// `scale_weights[j]`; the coarsest scale contributes the full SSIM
/// (luminance included). Scales are produced by 2×2 mean pooling.
pub fn ms_ssim_per_sample<T: Float>(x: &Var<T>, y: &Var<T>, cfg: &LossConfig) -> Result<Var<T>> {
    cfg.validate()?;
    x.value().expect_same_shape(y.value())?;
    let (_, _, h, w) = x.value().dims4()?;
    let scales = cfg.scales();
    let factor = 1usize << (scales - 1);
    if h / factor < cfg.ssim.window || w / factor < cfg.ssim.window {
        return Err(Error::TooSmall(format!(
            "ms_ssim: {}×{} image cannot support {} scales with a {}-pixel window",
            h, w, scales, cfg.ssim.window
        )));
    }

    let mut x = x.clone();
    let mut y = y.clone();
    let mut product: Option<Var<T>> = None;
    for (j, &weight) in cfg.scale_weights.iter().enumerate() {
        let (lum, cs) = ssim_maps(&x, &y, &cfg.ssim)?;
        let last = j + 1 == scales;
        let term = if last {
            mean_per_sample(&mul(&lum, &cs)?)?
        } else {
            mean_per_sample(&cs)?
        };
        let term = pow_scalar(&clamp_min(&term, MS_SSIM_TERM_FLOOR), weight);
        product = Some(match product {
            Some(p) => mul(&p, &term)?,
            None => term,
        });
        if !last {
            x = avg_pool2x2(&x)?;
            y = avg_pool2x2(&y)?;
        }
    }
    Ok(product.expect("at least one scale"))
}

/// Differentiable MS-SSIM averaged over the batch.
pub fn ms_ssim_var<T: Float>(x: &Var<T>, y: &Var<T>, cfg: &LossConfig) -> Result<Var<T>> {
    Ok(mean(&ms_ssim_per_sample(x, y, cfg)?))
}

pub fn ms_ssim<T: Float>(pred: &Tensor<T>, reference: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    check_pair(pred, reference)?;
    let v = ms_ssim_var(
        &Var::constant(pred.clone()),
        &Var::constant(reference.clone()),
        cfg,
    )?;
    Ok(v.item().as_f64())
}

/// Differentiable mean absolute error.
pub fn l1_loss<T: Float>(pred: &Var<T>, reference: &Var<T>) -> Result<Var<T>> {
    Ok(mean(&abs(&sub(pred, reference)?)))
}

/// `delta · (1 − MS-SSIM) + (1 − delta) · L1`.
pub fn combined_loss<T: Float>(pred: &Var<T>, reference: &Var<T>, cfg: &LossConfig) -> Result<Var<T>> {
    cfg.validate()?;
    pred.value().expect_same_shape(reference.value())?;
    let l1_term = (cfg.delta < 1.0)
        .then(|| l1_loss(pred, reference))
        .transpose()?;
    if cfg.delta == 0.0 {
        return Ok(l1_term.expect("delta < 1"));
    }
    let ms = ms_ssim_var(pred, reference, cfg)?;
    let structural = scale(&add_scalar(&scale(&ms, -1.0), 1.0), cfg.delta);
    match l1_term {
        Some(l1) => add(&structural, &scale(&l1, 1.0 - cfg.delta)),
        None => Ok(structural),
    }
}

/// Metrics of one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub id: String,
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricsRow {
    /// Computes MSE, PSNR (peak 1) and SSIM of a prediction.
    pub fn compute<T: Float>(
        id: impl Into<String>,
        pred: &Tensor<T>,
        reference: &Tensor<T>,
        cfg: &SsimConfig,
    ) -> Result<Self> {
        let pred = pred.cast::<f64>();
        let reference = reference.cast::<f64>();
        let mse = mse(&pred, &reference)?;
        Ok(Self {
            id: id.into(),
            mse,
            psnr_db: psnr_from_mse(mse, 1.0),
            ssim: ssim(&pred, &reference, cfg)?,
        })
    }
}

/// Per-image metrics with their arithmetic means.
///
/// PSNR is averaged per image rather than derived from the mean MSE, and a
/// zero-MSE image contributes [`PSNR_CAP_DB`].
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsRow,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<MetricsRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dataset("a metrics report needs at least one image".into()));
        }
        let n = rows.len() as f64;
        let mean = MetricsRow {
            id: "mean".into(),
            mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
            psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        };
        Ok(Self { rows, mean })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "mse", "psnr_db", "ssim"])?;
        for row in self.rows.iter().chain(std::iter::once(&self.mean)) {
            w.write_record([
                row.id.clone(),
                row.mse.to_string(),
                row.psnr_db.to_string(),
                row.ssim.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, h, w], |i| f(i / w, i % w))
    }

    fn ridges(h: usize, w: usize) -> Tensor<f64> {
        img(h, w, |r, c| 0.5 + 0.4 * ((r as f64 * 0.7 + c as f64 * 0.3).sin()))
    }

    #[test]
    fn mse_of_identical_and_opposite_constants() {
        let a = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let b = Tensor::<f64>::ones(&[1, 1, 4, 4]);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let b = Tensor::<f64>::zeros(&[1, 1, 4, 5]);
        assert!(matches!(mse(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(l1(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn psnr_values() {
        assert_eq!(psnr_from_mse(0.01, 1.0), 20.0);
        assert_eq!(psnr_from_mse(0.0, 1.0), PSNR_CAP_DB);
        assert!((psnr_from_mse(0.0268, 1.0) - 15.7187).abs() < 1e-4);
    }

    #[test]
    fn l1_of_constants() {
        let a = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let b = Tensor::<f64>::full(&[1, 1, 4, 4], 0.5);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(l1(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn ssim_identity_and_constants() {
        let cfg = SsimConfig::default();
        let x = ridges(16, 20);
        assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let c = Tensor::<f64>::full(&[1, 1, 12, 12], 0.3);
        assert!((ssim(&c, &c, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let zero = Tensor::<f64>::zeros(&[1, 1, 12, 12]);
        let one = Tensor::<f64>::ones(&[1, 1, 12, 12]);
        let expected = 1e-4 / (1.0 + 1e-4);
        assert!((ssim(&zero, &one, &cfg).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let x = Tensor::<f64>::zeros(&[1, 1, 10, 30]);
        assert!(matches!(
            ssim(&x, &x, &SsimConfig::default()),
            Err(Error::TooSmall(_))
        ));
    }

    #[test]
    fn single_scale_ms_ssim_is_ssim() {
        let cfg = LossConfig {
            scale_weights: vec![1.0],
            ..Default::default()
        };
        let x = ridges(16, 16);
        let y = x.map(|v| (v * 0.8 + 0.05).min(1.0));
        let a = ms_ssim(&x, &y, &cfg).unwrap();
        let b = ssim(&x, &y, &cfg.ssim).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn ms_ssim_rejects_too_many_scales() {
        let x = ridges(40, 40);
        assert!(matches!(
            ms_ssim(&x, &x, &LossConfig::default()),
            Err(Error::TooSmall(_))
        ));
    }

    #[test]
    fn combined_loss_with_zero_delta_is_l1() {
        let cfg = LossConfig {
            delta: 0.0,
            ..Default::default()
        };
        let x = ridges(8, 8);
        let y = x.map(|v| v * 0.5);
        let loss = combined_loss(&Var::constant(x.clone()), &Var::constant(y.clone()), &cfg).unwrap();
        let direct = l1_loss(&Var::constant(x), &Var::constant(y)).unwrap();
        assert_eq!(loss.item(), direct.item());
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            scale_weights: vec![0.5, 0.4],
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = LossConfig {
            delta: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SsimConfig {
            window: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn report_means_and_csv_layout() {
        let rows = vec![
            MetricsRow { id: "a".into(), mse: 0.01, psnr_db: 20.0, ssim: 0.5 },
            MetricsRow { id: "b".into(), mse: 0.03, psnr_db: 30.0, ssim: 0.7 },
        ];
        let report = MetricsReport::from_rows(rows).unwrap();
        assert!((report.mean.mse - 0.02).abs() < 1e-12);
        assert!((report.mean.psnr_db - 25.0).abs() < 1e-12);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,mse,psnr_db,ssim");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,"));
    }
}
