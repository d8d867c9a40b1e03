//! Edge-replication padding that brings images to network-friendly sizes.

use super::GrayImage;
use crate::error::{Error, Result};

/// Native size of generated fingerprints (rows × columns).
pub const NATIVE_SIZE: (usize, usize) = (275, 400);
/// Padded network input for native-size images.
pub const PADDED_SIZE: (usize, usize) = (368, 496);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadPlan {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl PadPlan {
    /// Centres `(h, w)` inside `(target_h, target_w)`, giving the odd
    /// remainder to the bottom and right.
    pub fn centered(h: usize, w: usize, target_h: usize, target_w: usize) -> Result<Self> {
        if target_h < h || target_w < w {
            return Err(Error::Shape(format!(
                "cannot pad {}×{} down to {}×{}",
                h, w, target_h, target_w
            )));
        }
        let (dh, dw) = (target_h - h, target_w - w);
        Ok(Self {
            top: dh / 2,
            bottom: dh - dh / 2,
            left: dw / 2,
            right: dw - dw / 2,
        })
    }

    /// 275×400 maps to 368×496 whenever that size suits the network;
    /// any other size is padded up to the next multiple of `multiple`.
    pub fn for_size(h: usize, w: usize, multiple: usize) -> Result<Self> {
        let multiple = multiple.max(1);
        if (h, w) == NATIVE_SIZE
            && PADDED_SIZE.0 % multiple == 0
            && PADDED_SIZE.1 % multiple == 0
        {
            return Self::centered(h, w, PADDED_SIZE.0, PADDED_SIZE.1);
        }
        let up = |v: usize| v.div_ceil(multiple) * multiple;
        Self::centered(h, w, up(h), up(w))
    }

    pub fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h + self.top + self.bottom, w + self.left + self.right)
    }
}

/// Pads with a plan chosen by [`PadPlan::for_size`] for a depth-4 network
/// (multiples of 16), so 275×400 becomes 368×496.
pub fn pad_edge(image: &GrayImage) -> Result<(GrayImage, PadPlan)> {
    let plan = PadPlan::for_size(image.height(), image.width(), 16)?;
    Ok((pad_with(image, &plan), plan))
}

/// Replicates the nearest edge pixel into the padding.
pub fn pad_with(image: &GrayImage, plan: &PadPlan) -> GrayImage {
    let (h, w) = image.dims();
    let (ph, pw) = plan.padded_dims(h, w);
    GrayImage::from_fn(ph, pw, |r, c| {
        let sr = r.saturating_sub(plan.top).min(h - 1);
        let sc = c.saturating_sub(plan.left).min(w - 1);
        image.get(sr, sc)
    })
}

/// Crops the padding back off.
pub fn unpad(image: &GrayImage, plan: &PadPlan) -> Result<GrayImage> {
    let (ph, pw) = image.dims();
    let (vert, horiz) = (plan.top + plan.bottom, plan.left + plan.right);
    if ph <= vert || pw <= horiz {
        return Err(Error::Shape(format!(
            "{}×{} image is too small to remove padding {:?}",
            ph, pw, plan
        )));
    }
    let (h, w) = (ph - vert, pw - horiz);
    Ok(GrayImage::from_fn(h, w, |r, c| image.get(r + plan.top, c + plan.left)))
}

/// Crops a 368×496 network output back to 275×400.
pub fn unpad_native(image: &GrayImage) -> Result<GrayImage> {
    if image.dims() != PADDED_SIZE {
        return Err(Error::Shape(format!(
            "expected a {}×{} image, got {}×{}",
            PADDED_SIZE.0,
            PADDED_SIZE.1,
            image.height(),
            image.width()
        )));
    }
    let plan = PadPlan::for_size(NATIVE_SIZE.0, NATIVE_SIZE.1, 16)?;
    unpad(image, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_native() -> GrayImage {
        let (h, w) = NATIVE_SIZE;
        GrayImage::from_fn(h, w, |r, c| ((r * 31 + c * 17) % 251) as f32 / 250.0)
    }

    #[test]
    fn native_size_pads_to_network_size() {
        let (padded, plan) = pad_edge(&random_native()).unwrap();
        assert_eq!(padded.dims(), PADDED_SIZE);
        assert_eq!(
            plan,
            PadPlan {
                top: 46,
                bottom: 47,
                left: 48,
                right: 48
            }
        );
    }

    #[test]
    fn corners_replicate_input_corners() {
        let img = random_native();
        let (p, _) = pad_edge(&img).unwrap();
        let (h, w) = img.dims();
        let (ph, pw) = p.dims();
        assert_eq!(p.get(0, 0), img.get(0, 0));
        assert_eq!(p.get(0, pw - 1), img.get(0, w - 1));
        assert_eq!(p.get(ph - 1, 0), img.get(h - 1, 0));
        assert_eq!(p.get(ph - 1, pw - 1), img.get(h - 1, w - 1));
    }

    #[test]
    fn unpad_inverts_pad() {
        let img = random_native();
        let (p, plan) = pad_edge(&img).unwrap();
        assert_eq!(unpad(&p, &plan).unwrap(), img);
        assert_eq!(unpad_native(&p).unwrap(), img);
    }

    #[test]
    fn unpad_native_rejects_other_sizes() {
        assert!(unpad_native(&GrayImage::filled(100, 100, 0.0)).is_err());
    }

    #[test]
    fn constant_edges_survive_re_padding() {
        let img = GrayImage::filled(275, 400, 0.75);
        let (p, plan) = pad_edge(&img).unwrap();
        let again = pad_with(&unpad(&p, &plan).unwrap(), &plan);
        assert_eq!(again, p);
    }

    #[test]
    fn other_sizes_round_up_to_multiple() {
        let plan = PadPlan::for_size(300, 300, 16).unwrap();
        assert_eq!(plan.padded_dims(300, 300), (304, 304));
        assert_eq!((plan.top, plan.bottom), (2, 2));
        let plan = PadPlan::for_size(275, 400, 32).unwrap();
        assert_eq!(plan.padded_dims(275, 400), (288, 416));
        let plan = PadPlan::for_size(64, 64, 16).unwrap();
        assert_eq!(plan.padded_dims(64, 64), (64, 64));
    }
}
