//! RoI feature extraction: average of bilinear samples over a grid of bins.

use crate::geometry::BoxXYXY;

/// Feature map geometry: `size x size x channels`, `stride` pixels per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureGeometry {
    pub size: usize,
    pub channels: usize,
    pub stride: usize,
}

/// Precomputed bilinear taps of one box: `bins * samples^2 * 4` entries of
/// `(cell index, weight)`, grouped by bin.
#[derive(Debug, Clone)]
pub struct RoiTaps {
    taps: Vec<(usize, f64)>,
    per_bin: usize,
}

fn axis_taps(u: f64, size: usize) -> [(usize, f64); 2] {
    // sample coordinate in cell-center units
    let u = (u - 0.5).clamp(0.0, (size - 1) as f64);
    let i0 = (u.floor() as usize).min(size.saturating_sub(2));
    let t = u - i0 as f64;
    if size == 1 {
        return [(0, 1.0), (0, 0.0)];
    }
    [(i0, 1.0 - t), (i0 + 1, t)]
}

impl RoiTaps {
    pub fn new(geom: FeatureGeometry, bins: usize, samples: usize, b: &BoxXYXY) -> Self {
        let s = geom.stride as f64;
        let span = |lo: f64, hi: f64| {
            let (mut lo, mut hi) = (lo / s, hi / s);
            if hi - lo < 1.0 {
                let c = 0.5 * (lo + hi);
                lo = c - 0.5;
                hi = c + 0.5;
            }
            (lo, hi)
        };
        let (x0, x1) = span(b.x1(), b.x2());
        let (y0, y1) = span(b.y1(), b.y2());
        let (bw, bh) = ((x1 - x0) / bins as f64, (y1 - y0) / bins as f64);
        let weight = 1.0 / (samples * samples) as f64;
        let per_bin = samples * samples * 4;
        let mut taps = Vec::with_capacity(bins * bins * per_bin);
        for by in 0..bins {
            for bx in 0..bins {
                for sy in 0..samples {
                    let v = y0 + (by as f64 + (sy as f64 + 0.5) / samples as f64) * bh;
                    let ty = axis_taps(v, geom.size);
                    for sx in 0..samples {
                        let u = x0 + (bx as f64 + (sx as f64 + 0.5) / samples as f64) * bw;
                        let tx = axis_taps(u, geom.size);
                        for &(iy, wy) in &ty {
                            for &(ix, wx) in &tx {
                                taps.push((iy * geom.size + ix, weight * wy * wx));
                            }
                        }
                    }
                }
            }
        }
        Self { taps, per_bin }
    }

    /// Pool into `out` (`bins^2 * channels`, bin-major).
    pub fn forward(&self, features: &[f64], channels: usize, out: &mut [f64]) {
        for (bin, taps) in self.taps.chunks(self.per_bin).enumerate() {
            let o = &mut out[bin * channels..(bin + 1) * channels];
            o.fill(0.0);
            for &(cell, w) in taps {
                if w == 0.0 {
                    continue;
                }
                let f = &features[cell * channels..(cell + 1) * channels];
                for (a, &v) in o.iter_mut().zip(f) {
                    *a += w * v;
                }
            }
        }
    }

    /// Scatter pooled gradients back onto the feature map gradient.
    pub fn backward(&self, dout: &[f64], channels: usize, dfeatures: &mut [f64]) {
        for (bin, taps) in self.taps.chunks(self.per_bin).enumerate() {
            let g = &dout[bin * channels..(bin + 1) * channels];
            for &(cell, w) in taps {
                if w == 0.0 {
                    continue;
                }
                let d = &mut dfeatures[cell * channels..(cell + 1) * channels];
                for (a, &v) in d.iter_mut().zip(g) {
                    *a += w * v;
                }
            }
        }
    }
}

/// Pool a `bins x bins x channels` feature per box.
pub fn roi_extract(
    features: &[f64],
    geom: FeatureGeometry,
    bins: usize,
    samples: usize,
    boxes: &[BoxXYXY],
) -> Vec<Vec<f64>> {
    boxes
        .iter()
        .map(|b| {
            let taps = RoiTaps::new(geom, bins, samples, b);
            let mut out = vec![0.0; bins * bins * geom.channels];
            taps.forward(features, geom.channels, &mut out);
            out
        })
        .collect()
}
