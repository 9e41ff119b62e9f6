use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxCoder, BoxXYXY};

/// How the RCN stages regress boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxMode {
    /// One 4-delta output shared by every class.
    Shared,
    /// One 4-delta channel per class; the highest-scoring class's box is
    /// resampled by the next stage.
    CategorySpecific,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub backbone_channels: [usize; 3],
    pub rpn_channels: usize,
    pub anchor_sizes: Vec<f64>,
    pub roi_size: usize,
    /// Bilinear samples per bin side.
    pub roi_samples: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub box_mode: BoxMode,
    /// IoU for positive assignment at each cascade stage.
    pub stage_ious: Vec<f64>,
    pub rpn_coder: BoxCoder,
    pub stage_coders: Vec<BoxCoder>,
    pub class_bias_init: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            backbone_channels: [16, 32, 32],
            rpn_channels: 32,
            anchor_sizes: vec![8.0, 16.0, 24.0],
            roi_size: 4,
            roi_samples: 2,
            hidden: 128,
            num_classes: 12,
            box_mode: BoxMode::Shared,
            stage_ious: vec![0.5, 0.6],
            rpn_coder: BoxCoder::new([1.0, 1.0, 1.0, 1.0]),
            stage_coders: vec![
                BoxCoder::new([5.0, 5.0, 2.5, 2.5]),
                BoxCoder::new([10.0, 10.0, 5.0, 5.0]),
            ],
            class_bias_init: -2.0,
        }
    }
}

impl ArchConfig {
    pub fn with_classes(num_classes: usize, box_mode: BoxMode) -> Self {
        Self {
            num_classes,
            box_mode,
            ..Self::default()
        }
    }

    pub fn stride(&self) -> usize {
        8
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / self.stride()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[2]
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_sizes.len()
    }

    pub fn num_anchors(&self) -> usize {
        let f = self.feature_size();
        f * f * self.anchors_per_cell()
    }

    pub fn roi_dim(&self) -> usize {
        self.roi_size * self.roi_size * self.feature_channels()
    }

    pub fn num_stages(&self) -> usize {
        self.stage_ious.len()
    }

    /// Width of each stage's box head output.
    pub fn box_outputs(&self) -> usize {
        match self.box_mode {
            BoxMode::Shared => 4,
            BoxMode::CategorySpecific => 4 * self.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.stride() != 0 || self.image_size < 32 {
            return Err(Error::Config(format!(
                "image size {} must be a multiple of 8 and at least 32",
                self.image_size
            )));
        }
        if self.num_classes == 0 || self.anchor_sizes.is_empty() || self.roi_size == 0 {
            return Err(Error::Config("empty architecture dimension".into()));
        }
        if self.stage_ious.is_empty() || self.stage_coders.len() != self.stage_ious.len() {
            return Err(Error::Config(
                "each cascade stage needs an IoU threshold and a box coder".into(),
            ));
        }
        Ok(())
    }

    /// Anchors in `(cell_y, cell_x, size)` order.
    pub fn anchors(&self) -> Vec<BoxXYXY> {
        let f = self.feature_size();
        let s = self.stride() as f64;
        let mut out = Vec::with_capacity(self.num_anchors());
        for y in 0..f {
            for x in 0..f {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                for &a in &self.anchor_sizes {
                    out.push(
                        BoxXYXY::new(cx - 0.5 * a, cy - 0.5 * a, cx + 0.5 * a, cy + 0.5 * a)
                            .expect("anchor sizes are positive"),
                    );
                }
            }
        }
        out
    }
}
