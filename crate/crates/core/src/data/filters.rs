//! Small image-processing helpers shared by the generator and the
//! distortion stages. All work in f32 on row-major buffers.

use rand::Rng;

use super::GrayImage;

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with replicated borders.
pub(crate) fn gaussian_blur(data: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0f32;
            for (j, kv) in k.iter().enumerate() {
                let sx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for (j, kv) in k.iter().enumerate() {
            let sy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
            let src = &tmp[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

/// Uniform noise in `[-1, 1]` smoothed by a Gaussian and rescaled to unit
/// maximum magnitude.
pub(crate) fn smooth_noise<R: Rng>(rng: &mut R, h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let raw: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
    let mut out = gaussian_blur(&raw, h, w, sigma);
    let peak = out.iter().fold(0f32, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v /= peak);
    }
    out
}

/// Bilinear sample at fractional `(y, x)`; outside the image returns `fill`
/// when given, otherwise the nearest edge value.
pub(crate) fn bilinear(img: &GrayImage, y: f64, x: f64, fill: Option<f32>) -> f32 {
    let (h, w) = img.dims();
    if let Some(f) = fill {
        if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
            return f;
        }
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
    let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples to `(h, w)` with pixel-centre alignment.
pub(crate) fn resize(img: &GrayImage, h: usize, w: usize) -> GrayImage {
    let (sh, sw) = img.dims();
    let (ry, rx) = (sh as f64 / h as f64, sw as f64 / w as f64);
    GrayImage::from_fn(h, w, |r, c| {
        bilinear(
            img,
            (r as f64 + 0.5) * ry - 0.5,
            (c as f64 + 0.5) * rx - 0.5,
            None,
        )
    })
}

/// Stamps a filled disc of radius `radius` centred at `(y, x)`.
pub(crate) fn stamp_disc(img: &mut GrayImage, y: f64, x: f64, radius: f64, value: f32) {
    let (h, w) = img.dims();
    let r0 = (y - radius).floor().max(0.0) as usize;
    let r1 = ((y + radius).ceil() as isize).min(h as isize - 1);
    let c0 = (x - radius).floor().max(0.0) as usize;
    let c1 = ((x + radius).ceil() as isize).min(w as isize - 1);
    if r1 < 0 || c1 < 0 {
        return;
    }
    for r in r0..=r1 as usize {
        for c in c0..=c1 as usize {
            let (dy, dx) = (r as f64 - y, c as f64 - x);
            if dy * dy + dx * dx <= radius * radius {
                img.set(r, c, value);
            }
        }
    }
}

/// Draws a thick segment by stamping discs every half pixel.
pub(crate) fn draw_segment(
    img: &mut GrayImage,
    from: (f64, f64),
    to: (f64, f64),
    radius: f64,
    value: f32,
) {
    let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        stamp_disc(
            img,
            from.0 + t * (to.0 - from.0),
            from.1 + t * (to.1 - from.1),
            radius,
            value,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalised_and_symmetric() {
        let k = gaussian_kernel(1.5);
        assert_eq!(k.len(), 11);
        let s: f32 = k.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn blur_keeps_constants() {
        let data = vec![0.3f32; 20 * 30];
        let out = gaussian_blur(&data, 20, 30, 2.0);
        assert!(out.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = GrayImage::from_fn(6, 9, |r, c| (r * 9 + c) as f32 / 54.0);
        let back = resize(&img, 6, 9);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
