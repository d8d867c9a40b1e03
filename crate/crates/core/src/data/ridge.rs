//! Procedural clean fingerprints: concentric sinusoidal ridges around a
//! random core, bent by a smooth random warp and cut by a soft elliptical
//! print mask on a white background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

use super::pad::NATIVE_SIZE;
use super::GrayImage;
use crate::error::{Error, Result};

const WARP_TERMS: usize = 3;
/// Upper bound on the warp Jacobian norm, which bounds how far the local
/// ridge spacing can drift from the nominal period.
const WARP_SLOPE: f64 = 0.12;
const MASK_EDGE: f64 = 0.06;

#[derive(Clone, Copy, Debug)]
struct WarpTerm {
    ky: f64,
    kx: f64,
    phase: f64,
    amp: f64,
}

/// Geometry drawn from the seed before rendering.
#[derive(Clone, Debug)]
pub struct RidgeLayout {
    /// Ridge centre `(row, col)`.
    pub core: (f64, f64),
    /// Mask ellipse centre `(row, col)`.
    pub mask_center: (f64, f64),
    /// Mask semi-axes `(rows, cols)`.
    pub mask_axes: (f64, f64),
    pub period: f64,
    phase0: f64,
    warp_y: Vec<WarpTerm>,
    warp_x: Vec<WarpTerm>,
}

impl RidgeLayout {
    pub fn new(seed: u64, period: f64, smoothness: f64) -> Result<Self> {
        if !(period >= 2.0) || !period.is_finite() {
            return Err(Error::Parameter(format!(
                "ridge period must be at least 2 pixels, got {}",
                period
            )));
        }
        if !(smoothness > 0.0) || !smoothness.is_finite() {
            return Err(Error::Parameter(format!(
                "orientation smoothness must be positive, got {}",
                smoothness
            )));
        }
        let (h, w) = (NATIVE_SIZE.0 as f64, NATIVE_SIZE.1 as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask_center = (
            h * rng.gen_range(0.47..0.53),
            w * rng.gen_range(0.47..0.53),
        );
        let mask_axes = (h * rng.gen_range(0.40..0.47), w * rng.gen_range(0.25..0.31));
        let core = (
            mask_center.0 + mask_axes.0 * rng.gen_range(-0.3..0.3),
            mask_center.1 + mask_axes.1 * rng.gen_range(-0.3..0.3),
        );
        let amp = WARP_SLOPE * smoothness / (TAU * WARP_TERMS as f64);
        let mut terms = || {
            (0..WARP_TERMS)
                .map(|_| {
                    let angle = rng.gen_range(0.0..TAU);
                    // Wavelengths in [smoothness, 2·smoothness].
                    let freq = 1.0 / (smoothness * rng.gen_range(1.0..2.0));
                    WarpTerm {
                        ky: freq * angle.sin(),
                        kx: freq * angle.cos(),
                        phase: rng.gen_range(0.0..TAU),
                        amp: amp * rng.gen_range(0.5..1.0),
                    }
                })
                .collect::<Vec<_>>()
        };
        let warp_y = terms();
        let warp_x = terms();
        let phase0 = rng.gen_range(0.0..TAU);
        Ok(Self {
            core,
            mask_center,
            mask_axes,
            period,
            phase0,
            warp_y,
            warp_x,
        })
    }

    fn warp(terms: &[WarpTerm], y: f64, x: f64) -> f64 {
        terms
            .iter()
            .map(|t| t.amp * (TAU * (t.ky * y + t.kx * x) + t.phase).sin())
            .sum()
    }

    /// Ridge intensity before masking, in `[0, 1]` (0 = ridge centre).
    pub fn ridge_value(&self, y: f64, x: f64) -> f64 {
        let wy = y + Self::warp(&self.warp_y, y, x);
        let wx = x + Self::warp(&self.warp_x, y, x);
        let r = ((wy - self.core.0).powi(2) + (wx - self.core.1).powi(2)).sqrt();
        0.5 + 0.5 * (TAU * r / self.period + self.phase0).cos()
    }

    /// Normalised elliptical radius; 1 on the mask boundary.
    pub fn mask_radius(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.mask_center.0) / self.mask_axes.0;
        let dx = (x - self.mask_center.1) / self.mask_axes.1;
        (dy * dy + dx * dx).sqrt()
    }

    /// Print coverage in `[0, 1]` with a smooth fall-off at the rim.
    pub fn mask(&self, y: f64, x: f64) -> f64 {
        let t = ((1.0 - self.mask_radius(y, x)) / MASK_EDGE).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

    pub fn render(&self) -> GrayImage {
        let (h, w) = NATIVE_SIZE;
        GrayImage::from_fn(h, w, |r, c| {
            let (y, x) = (r as f64, c as f64);
            let m = self.mask(y, x);
            let v = if m > 0.0 {
                m * self.ridge_value(y, x) + (1.0 - m)
            } else {
                1.0
            };
            v.clamp(0.0, 1.0) as f32
        })
    }
}

/// A 275×400 clean print, deterministic in `seed`.
///
/// `period` is the ridge spacing in pixels; `smoothness` is the shortest
/// wavelength (pixels) of the random warp bending the ridge flow.
pub fn generate_ridge_pattern(seed: u64, period: f64, smoothness: f64) -> Result<GrayImage> {
    Ok(RidgeLayout::new(seed, period, smoothness)?.render())
}
