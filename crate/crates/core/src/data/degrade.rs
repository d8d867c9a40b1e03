//! The distortion model turning clean prints into degraded inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

use super::filters::{bilinear, draw_segment, gaussian_blur, resize, smooth_noise};
use super::GrayImage;
use crate::error::{Error, Result};

/// Value written into occluded pixels.
pub const OCCLUDER_VALUE: f32 = 1.0;

const OCCLUSION_BLOB_SIGMA: f64 = 12.0;

/// Parameters of one degradation. The identity configuration leaves the
/// image untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionConfig {
    /// Gaussian blur sigma in pixels.
    pub blur_sigma: f64,
    /// Additive brightness shift.
    pub brightness_delta: f64,
    /// Contrast gain about mid-gray.
    pub contrast_gain: f64,
    /// Maximum elastic displacement in pixels.
    pub elastic_alpha: f64,
    /// Smoothing of the elastic displacement field in pixels.
    pub elastic_sigma: f64,
    /// Fraction of pixels covered by occluding blobs.
    pub occlusion_fraction: f64,
    pub scratch_count: usize,
    pub rotation_deg: f64,
    /// Downscale factor in `[1, 2]` applied then undone.
    pub resolution_factor: f64,
    /// Weight of the procedural background texture.
    pub background_blend: f64,
    pub seed: u64,
}

impl DistortionConfig {
    pub fn identity(seed: u64) -> Self {
        Self {
            blur_sigma: 0.0,
            brightness_delta: 0.0,
            contrast_gain: 1.0,
            elastic_alpha: 0.0,
            elastic_sigma: 8.0,
            occlusion_fraction: 0.0,
            scratch_count: 0,
            rotation_deg: 0.0,
            resolution_factor: 1.0,
            background_blend: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::Config(format!("distortion {} out of range: {}", what, v)))
        };
        let finite = [
            self.blur_sigma,
            self.brightness_delta,
            self.contrast_gain,
            self.elastic_alpha,
            self.elastic_sigma,
            self.occlusion_fraction,
            self.rotation_deg,
            self.resolution_factor,
            self.background_blend,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("distortion values must be finite".into()));
        }
        if self.blur_sigma < 0.0 {
            return bad("blur_sigma", self.blur_sigma);
        }
        if self.contrast_gain <= 0.0 {
            return bad("contrast_gain", self.contrast_gain);
        }
        if self.elastic_alpha < 0.0 {
            return bad("elastic_alpha", self.elastic_alpha);
        }
        if self.elastic_alpha > 0.0 && self.elastic_sigma <= 0.0 {
            return bad("elastic_sigma", self.elastic_sigma);
        }
        if !(0.0..=1.0).contains(&self.occlusion_fraction) {
            return bad("occlusion_fraction", self.occlusion_fraction);
        }
        if !(1.0..=2.0).contains(&self.resolution_factor) {
            return bad("resolution_factor", self.resolution_factor);
        }
        if !(0.0..=1.0).contains(&self.background_blend) {
            return bad("background_blend", self.background_blend);
        }
        Ok(())
    }
}

impl fmt::Display for DistortionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "blur_sigma={:.4} brightness_delta={:.4} contrast_gain={:.4} elastic_alpha={:.4} \
             elastic_sigma={:.4} occlusion_fraction={:.4} scratch_count={} rotation_deg={:.4} \
             resolution_factor={:.4} background_blend={:.4} seed={}",
            self.blur_sigma,
            self.brightness_delta,
            self.contrast_gain,
            self.elastic_alpha,
            self.elastic_sigma,
            self.occlusion_fraction,
            self.scratch_count,
            self.rotation_deg,
            self.resolution_factor,
            self.background_blend,
            self.seed
        )
    }
}

#[derive(Clone, Copy)]
enum Stage {
    Elastic = 1,
    Background = 2,
    Scratches = 3,
    Occlusion = 4,
}

fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// Degrades `clean` and returns the result; `clean` is not modified.
pub fn degrade(clean: &GrayImage, cfg: &DistortionConfig) -> Result<GrayImage> {
    Ok(degrade_with_mask(clean, cfg)?.0)
}

/// Like [`degrade`], also returning the occlusion mask (true = occluded).
pub fn degrade_with_mask(
    clean: &GrayImage,
    cfg: &DistortionConfig,
) -> Result<(GrayImage, Vec<bool>)> {
    cfg.validate()?;
    let (h, w) = clean.dims();
    let mut img = clean.clone();
    if cfg.rotation_deg != 0.0 {
        img = rotate(&img, cfg.rotation_deg);
    }
    if cfg.elastic_alpha > 0.0 {
        img = elastic(&img, cfg.elastic_alpha, cfg.elastic_sigma, cfg.seed);
    }
    if cfg.blur_sigma > 0.0 {
        img = GrayImage::new(h, w, gaussian_blur(img.data(), h, w, cfg.blur_sigma))?;
    }
    if cfg.resolution_factor > 1.0 {
        let sh = ((h as f64 / cfg.resolution_factor).round() as usize).max(1);
        let sw = ((w as f64 / cfg.resolution_factor).round() as usize).max(1);
        img = resize(&resize(&img, sh, sw), h, w);
    }
    if cfg.brightness_delta != 0.0 || cfg.contrast_gain != 1.0 {
        let (g, d) = (cfg.contrast_gain as f32, cfg.brightness_delta as f32);
        for v in img.data_mut() {
            *v = (*v - 0.5) * g + 0.5 + d;
        }
    }
    if cfg.background_blend > 0.0 {
        let bg = background_texture(h, w, cfg.seed);
        let wb = cfg.background_blend as f32;
        for (v, b) in img.data_mut().iter_mut().zip(bg.data()) {
            *v *= 1.0 - wb * (1.0 - b);
        }
    }
    if cfg.scratch_count > 0 {
        scratches(&mut img, cfg.scratch_count, cfg.seed);
    }
    let mask = occlusion_mask(h, w, cfg.occlusion_fraction, cfg.seed);
    for (v, &m) in img.data_mut().iter_mut().zip(&mask) {
        if m {
            *v = OCCLUDER_VALUE;
        }
    }
    img.clamp_unit();
    Ok((img, mask))
}

/// Rotation about the image centre; uncovered corners become white.
fn rotate(img: &GrayImage, degrees: f64) -> GrayImage {
    let (h, w) = img.dims();
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    GrayImage::from_fn(h, w, |r, col| {
        let (dy, dx) = (r as f64 - cy, col as f64 - cx);
        let sy = cy + c * dy - s * dx;
        let sx = cx + s * dy + c * dx;
        bilinear(img, sy, sx, Some(1.0))
    })
}

fn elastic(img: &GrayImage, alpha: f64, sigma: f64, seed: u64) -> GrayImage {
    let (h, w) = img.dims();
    let mut rng = stage_rng(seed, Stage::Elastic);
    let dy = smooth_noise(&mut rng, h, w, sigma);
    let dx = smooth_noise(&mut rng, h, w, sigma);
    GrayImage::from_fn(h, w, |r, c| {
        let i = r * w + c;
        bilinear(
            img,
            r as f64 + alpha * dy[i] as f64,
            c as f64 + alpha * dx[i] as f64,
            None,
        )
    })
}

/// Document-like backdrop: smooth mottling, a linear shading ramp and lines of
/// short dark strokes standing in for printed text. Values in `[0, 1]`.
pub fn background_texture(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = stage_rng(seed, Stage::Background);
    let mottle_sigma = rng.gen_range(6.0..20.0);
    let mottle = smooth_noise(&mut rng, h, w, mottle_sigma);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let ramp = rng.gen_range(0.0..0.3);
    let (sa, ca) = angle.sin_cos();
    let diag = ((h * h + w * w) as f64).sqrt();
    let mut bg = GrayImage::from_fn(h, w, |r, c| {
        let t = (r as f64 * sa + c as f64 * ca) / diag;
        let v = 0.8 + 0.15 * mottle[r * w + c] as f64 - ramp * (t + 0.5).clamp(0.0, 1.0);
        v as f32
    });
    let line_gap = rng.gen_range(14.0..28.0);
    let glyph_h = line_gap * rng.gen_range(0.35..0.55);
    let ink = rng.gen_range(0.0..0.4) as f32;
    let mut y = rng.gen_range(4.0..line_gap);
    while y + glyph_h < h as f64 {
        let mut x = rng.gen_range(2.0..20.0);
        while x < w as f64 {
            if rng.gen_bool(0.15) {
                x += glyph_h * rng.gen_range(1.0..3.0);
                continue;
            }
            let strokes = rng.gen_range(1..=3);
            for _ in 0..strokes {
                let a = (y + rng.gen_range(0.0..glyph_h), x + rng.gen_range(0.0..glyph_h * 0.6));
                let b = (y + rng.gen_range(0.0..glyph_h), x + rng.gen_range(0.0..glyph_h * 0.6));
                draw_segment(&mut bg, a, b, 0.7, ink);
            }
            x += glyph_h * rng.gen_range(0.7..1.0);
        }
        y += line_gap;
    }
    bg.clamp_unit();
    bg
}

fn scratches(img: &mut GrayImage, count: usize, seed: u64) {
    let (h, w) = img.dims();
    let mut rng = stage_rng(seed, Stage::Scratches);
    for _ in 0..count {
        let start = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let len = rng.gen_range(30.0..160.0);
        let end = (start.0 + len * angle.sin(), start.1 + len * angle.cos());
        let radius = rng.gen_range(0.5..1.8);
        let value = if rng.gen_bool(0.7) {
            rng.gen_range(0.85..1.0)
        } else {
            rng.gen_range(0.0..0.2)
        };
        draw_segment(img, start, end, radius, value);
    }
}

/// Blob-shaped mask covering exactly `round(fraction · h · w)` pixels: the
/// highest values of a smooth random field.
pub fn occlusion_mask(h: usize, w: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let n = h * w;
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut mask = vec![false; n];
    if k == 0 {
        return mask;
    }
    let mut rng = stage_rng(seed, Stage::Occlusion);
    let field = smooth_noise(&mut rng, h, w, OCCLUSION_BLOB_SIGMA);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GrayImage {
        GrayImage::from_fn(60, 80, |r, c| 0.5 + 0.5 * ((r + 2 * c) as f32 * 0.4).sin())
    }

    fn heavy(seed: u64) -> DistortionConfig {
        DistortionConfig {
            blur_sigma: 1.2,
            brightness_delta: 0.3,
            contrast_gain: 1.8,
            elastic_alpha: 5.0,
            elastic_sigma: 6.0,
            occlusion_fraction: 0.1,
            scratch_count: 3,
            rotation_deg: 12.0,
            resolution_factor: 1.7,
            background_blend: 0.6,
            seed,
        }
    }

    #[test]
    fn identity_config_is_identity() {
        let img = sample();
        assert_eq!(degrade(&img, &DistortionConfig::identity(5)).unwrap(), img);
    }

    #[test]
    fn output_stays_in_unit_range_and_input_is_untouched() {
        let img = sample();
        let copy = img.clone();
        let out = degrade(&img, &heavy(3)).unwrap();
        assert_eq!(img, copy);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(out, img);
    }

    #[test]
    fn deterministic_per_seed() {
        let img = sample();
        assert_eq!(
            degrade(&img, &heavy(9)).unwrap(),
            degrade(&img, &heavy(9)).unwrap()
        );
        assert_ne!(
            degrade(&img, &heavy(9)).unwrap(),
            degrade(&img, &heavy(10)).unwrap()
        );
    }

    #[test]
    fn occlusion_mask_has_exact_size() {
        let m = occlusion_mask(50, 40, 0.25, 1);
        assert_eq!(m.iter().filter(|&&b| b).count(), 500);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = DistortionConfig::identity(0);
        cfg.occlusion_fraction = 1.5;
        assert!(degrade(&sample(), &cfg).is_err());
        let mut cfg = DistortionConfig::identity(0);
        cfg.resolution_factor = 3.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn background_texture_is_bounded() {
        let bg = background_texture(64, 64, 2);
        assert!(bg.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
