//! Weak (flip) and strong (flip + photometric + cutout) augmentation with
//! replayable records.

use serde::{Deserialize, Serialize};

use crate::geometry::BoxXYXY;
use crate::image::Image;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    Weak,
    Strong,
}

/// Parameters of the strong view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrongAugConfig {
    pub noise_sigma: f64,
    /// Side of the square cutout patch; 0 disables it.
    pub cutout_size: usize,
    pub channel_scale: (f64, f64),
    pub flip_probability: f64,
}

impl Default for StrongAugConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            cutout_size: 8,
            channel_scale: (0.8, 1.2),
            flip_probability: 0.5,
        }
    }
}

/// Everything needed to replay an augmentation bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub flip: bool,
    pub image_width: f64,
    pub noise_seed: u64,
    pub noise_sigma: f64,
    /// `[x, y, w, h]` in pixels.
    pub cutout: Option<[usize; 4]>,
    pub channel_scale: [f64; 3],
}

impl AugmentationRecord {
    pub fn identity(image_width: f64) -> Self {
        Self {
            flip: false,
            image_width,
            noise_seed: 0,
            noise_sigma: 0.0,
            cutout: None,
            channel_scale: [1.0; 3],
        }
    }

    /// Map a box through the geometric part of the record.
    pub fn map_box(&self, b: &BoxXYXY) -> BoxXYXY {
        if self.flip {
            b.hflip(self.image_width)
        } else {
            *b
        }
    }

    pub fn apply_image(&self, image: &Image) -> Image {
        let mut out = if self.flip { image.hflip() } else { image.clone() };
        let photometric = self.noise_sigma > 0.0
            || self.cutout.is_some()
            || self.channel_scale != [1.0; 3];
        if !photometric {
            return out;
        }
        let mut noise = SplitMix64::new(self.noise_seed);
        let ch = out.channels;
        for (i, v) in out.data.iter_mut().enumerate() {
            let mut x = *v * self.channel_scale[i % ch];
            if self.noise_sigma > 0.0 {
                x += self.noise_sigma * noise.normal();
            }
            *v = x.clamp(0.0, 1.0);
        }
        if let Some([cx, cy, cw, chh]) = self.cutout {
            for y in cy..(cy + chh).min(out.height) {
                for x in cx..(cx + cw).min(out.width) {
                    out.pixel_mut(y, x).fill(0.5);
                }
            }
        }
        out
    }

    /// Replay on an image and its boxes.
    pub fn apply(&self, image: &Image, boxes: &[BoxXYXY]) -> (Image, Vec<BoxXYXY>) {
        (
            self.apply_image(image),
            boxes.iter().map(|b| self.map_box(b)).collect(),
        )
    }
}

/// Draw an augmentation record.
///
/// Draw order: flip, then (strong only) noise seed, cutout x, cutout y and
/// three channel scales.
pub fn draw_record(
    mode: AugMode,
    image: &Image,
    strong: &StrongAugConfig,
    rng: &mut SplitMix64,
) -> AugmentationRecord {
    let w = image.width as f64;
    match mode {
        AugMode::Weak => AugmentationRecord {
            flip: rng.chance(0.5),
            ..AugmentationRecord::identity(w)
        },
        AugMode::Strong => {
            let flip = rng.chance(strong.flip_probability);
            let noise_seed = rng.next();
            let cutout = if strong.cutout_size > 0 {
                let s = strong.cutout_size;
                let x = (rng.next() % (image.width.saturating_sub(s) + 1) as u64) as usize;
                let y = (rng.next() % (image.height.saturating_sub(s) + 1) as u64) as usize;
                Some([x, y, s, s])
            } else {
                None
            };
            let (lo, hi) = strong.channel_scale;
            let mut channel_scale = [1.0; 3];
            for c in &mut channel_scale {
                *c = if hi > lo { rng.uniform(lo, hi) } else { lo };
            }
            AugmentationRecord {
                flip,
                image_width: w,
                noise_seed,
                noise_sigma: strong.noise_sigma,
                cutout,
                channel_scale,
            }
        }
    }
}

/// Augment an image and its boxes; returns the record for replay.
pub fn augment(
    image: &Image,
    boxes: &[BoxXYXY],
    mode: AugMode,
    strong: &StrongAugConfig,
    rng: &mut SplitMix64,
) -> (Image, Vec<BoxXYXY>, AugmentationRecord) {
    let record = draw_record(mode, image, strong, rng);
    let (img, bxs) = record.apply(image, boxes);
    (img, bxs, record)
}
