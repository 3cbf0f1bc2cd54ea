//! Flip and colour-jitter augmentation for patch pairs.
//!
//! Flips move both stains together so the pair stays registered. Colour
//! jitter touches only the H&E input; the IHC image is a reconstruction
//! target and is left as is.

use std::sync::Arc;

use rand::Rng as _;

use super::color::{hsv_to_rgb, rgb_to_hsv};
use super::{Image, PatchRecord};
use crate::rng::rng;

/// Sampling ranges for [`AugmentParams::sample`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRanges {
    pub flips: bool,
    /// Hue is rotated by a uniform draw from `[-hue_degrees, hue_degrees]`.
    pub hue_degrees: f64,
    pub saturation: (f64, f64),
    pub brightness: f64,
    pub contrast: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            flips: true,
            hue_degrees: 20.0,
            saturation: (0.75, 1.25),
            brightness: 0.15,
            contrast: (0.75, 1.25),
        }
    }
}

impl AugmentRanges {
    pub fn none() -> Self {
        AugmentRanges {
            flips: false,
            hue_degrees: 0.0,
            saturation: (1.0, 1.0),
            brightness: 0.0,
            contrast: (1.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub hue_shift: f64,
    pub saturation_scale: f64,
    pub brightness_delta: f64,
    pub contrast_scale: f64,
    pub seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip_h: false,
            flip_v: false,
            hue_shift: 0.0,
            saturation_scale: 1.0,
            brightness_delta: 0.0,
            contrast_scale: 1.0,
            seed: 0,
        }
    }

    pub fn sample(ranges: &AugmentRanges, seed: u64) -> Self {
        let mut r = rng(seed);
        let mut between = |lo: f64, hi: f64| if hi > lo { r.gen_range(lo..=hi) } else { lo };
        let hue_shift = between(-ranges.hue_degrees, ranges.hue_degrees);
        let saturation_scale = between(ranges.saturation.0, ranges.saturation.1);
        let brightness_delta = between(-ranges.brightness, ranges.brightness);
        let contrast_scale = between(ranges.contrast.0, ranges.contrast.1);
        let (flip_h, flip_v) = if ranges.flips {
            (r.gen(), r.gen())
        } else {
            (false, false)
        };
        AugmentParams {
            flip_h,
            flip_v,
            hue_shift,
            saturation_scale,
            brightness_delta,
            contrast_scale,
            seed,
        }
    }

    pub fn apply_geometry(&self, image: &mut Image) {
        if self.flip_h {
            image.flip_horizontal();
        }
        if self.flip_v {
            image.flip_vertical();
        }
    }

    /// Hue rotation and saturation scaling in HSV, then brightness shift and
    /// contrast scaling about 0.5 in RGB, clamped to `[0, 1]`. Stages with
    /// identity parameters are skipped, so identity params are exact.
    pub fn apply_color(&self, image: &mut Image) {
        let hsv_stage = self.hue_shift != 0.0 || self.saturation_scale != 1.0;
        let rgb_stage = self.brightness_delta != 0.0 || self.contrast_scale != 1.0;
        if image.channels != 3 || !(hsv_stage || rgb_stage) {
            return;
        }
        for y in 0..image.height {
            for x in 0..image.width {
                let mut rgb = image.pixel(y, x);
                if hsv_stage {
                    let [h, s, v] = rgb_to_hsv(rgb);
                    rgb = hsv_to_rgb([
                        (h + self.hue_shift).rem_euclid(360.0),
                        (s * self.saturation_scale).clamp(0.0, 1.0),
                        v,
                    ]);
                }
                if rgb_stage {
                    for c in &mut rgb {
                        *c = (*c + self.brightness_delta - 0.5) * self.contrast_scale + 0.5;
                    }
                }
                image.set_pixel(y, x, rgb.map(|c| c.clamp(0.0, 1.0)));
            }
        }
    }
}

pub fn augment(record: &PatchRecord, params: &AugmentParams) -> PatchRecord {
    let mut he = (*record.he_image).clone();
    params.apply_geometry(&mut he);
    params.apply_color(&mut he);
    let ihc = record.ihc_image.as_ref().map(|img| {
        let mut img = (**img).clone();
        params.apply_geometry(&mut img);
        Arc::new(img)
    });
    let mask = record.mask.as_ref().map(|m| {
        let mut m = (**m).clone();
        if params.flip_h {
            for row in m.data.chunks_exact_mut(m.width) {
                row.reverse();
            }
        }
        if params.flip_v {
            let rows: Vec<Vec<u8>> = m
                .data
                .chunks_exact(m.width)
                .rev()
                .map(<[u8]>::to_vec)
                .collect();
            m.data = rows.concat();
        }
        Arc::new(m)
    });
    PatchRecord {
        he_image: Arc::new(he),
        ihc_image: ihc,
        mask,
        ..record.clone()
    }
}
