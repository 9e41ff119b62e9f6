//! Procedural drawing of the synthetic taxonomy.

use crate::geometry::BoxXYXY;
use crate::image::Image;
use crate::rng::SplitMix64;

/// Top-level object kinds that can be placed directly in a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Kind {
    Agent,
    Cart,
    Crate,
    Disc,
    Bar,
    Blob,
    Tri,
}

pub(crate) const TOP_LEVEL: [Kind; 7] = [
    Kind::Agent,
    Kind::Cart,
    Kind::Crate,
    Kind::Disc,
    Kind::Bar,
    Kind::Blob,
    Kind::Tri,
];

// Class ids in the fixed taxonomy order.
pub(crate) const AGENT: usize = 0;
pub(crate) const AGENT_HEAD: usize = 1;
pub(crate) const AGENT_FACE: usize = 2;
pub(crate) const CART: usize = 3;
pub(crate) const CART_WHEEL: usize = 4;
pub(crate) const CRATE: usize = 5;
pub(crate) const CRATE_LID: usize = 6;
pub(crate) const DISC: usize = 7;
pub(crate) const RING: usize = 8;
pub(crate) const BAR: usize = 9;
pub(crate) const BLOB: usize = 10;
pub(crate) const TRI: usize = 11;

#[derive(Debug, Clone, Copy)]
pub(crate) enum Paint {
    Rect,
    Ellipse,
    Annulus { inner: f64 },
    Triangle,
    Hatch,
}

/// One drawable layer with its annotation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Part {
    pub class_id: usize,
    pub bbox: BoxXYXY,
    pub paint: Paint,
    pub color: [f64; 3],
}

/// A placed object: parent first, nested children after.
#[derive(Debug, Clone)]
pub(crate) struct Object {
    pub parts: Vec<Part>,
}

impl Object {
    pub fn outer(&self) -> BoxXYXY {
        self.parts[0].bbox
    }
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY {
    BoxXYXY::new(x1, y1, x2, y2).expect("shape boxes have positive size")
}

/// Object size `(w, h)` drawn for a top-level kind.
pub(crate) fn draw_size(kind: Kind, rng: &mut SplitMix64) -> (f64, f64) {
    let r = |rng: &mut SplitMix64, lo: f64, hi: f64| rng.uniform(lo, hi).round();
    match kind {
        Kind::Agent => (r(rng, 14.0, 20.0), r(rng, 26.0, 36.0)),
        Kind::Cart => (r(rng, 24.0, 32.0), r(rng, 14.0, 20.0)),
        Kind::Crate => {
            let s = r(rng, 16.0, 26.0);
            (s, s)
        }
        Kind::Disc => {
            let d = r(rng, 16.0, 28.0);
            (d, d)
        }
        Kind::Bar => {
            let long = r(rng, 18.0, 28.0);
            let thick = r(rng, 4.0, 7.0);
            if rng.chance(0.5) {
                (long, thick)
            } else {
                (thick, long)
            }
        }
        Kind::Blob => (r(rng, 10.0, 18.0), r(rng, 10.0, 18.0)),
        Kind::Tri => (r(rng, 12.0, 20.0), r(rng, 12.0, 20.0)),
    }
}

/// Number of nested children a kind would produce and the draws that decide it.
pub(crate) fn draw_children(kind: Kind, nesting: f64, rng: &mut SplitMix64) -> usize {
    match kind {
        Kind::Agent => {
            if rng.chance(nesting) {
                1 + usize::from(rng.chance(nesting))
            } else {
                0
            }
        }
        Kind::Cart | Kind::Crate | Kind::Disc => usize::from(rng.chance(nesting)),
        Kind::Bar | Kind::Blob | Kind::Tri => 0,
    }
}

/// Build the layered parts of an object whose outer box is `outer`.
pub(crate) fn build_object(kind: Kind, outer: BoxXYXY, children: usize) -> Object {
    let (x1, y1, x2, y2) = (outer.x1(), outer.y1(), outer.x2(), outer.y2());
    let (w, h) = (outer.width(), outer.height());
    let mut parts = Vec::with_capacity(1 + children);
    match kind {
        Kind::Agent => {
            parts.push(Part {
                class_id: AGENT,
                bbox: outer,
                paint: Paint::Rect,
                color: [0.15, 0.35, 0.85],
            });
            if children >= 1 {
                let d = (0.7 * w).round().max(6.0);
                let cx = 0.5 * (x1 + x2);
                let head = bx(cx - 0.5 * d, y1 + 1.0, cx + 0.5 * d, y1 + 1.0 + d);
                parts.push(Part {
                    class_id: AGENT_HEAD,
                    bbox: head,
                    paint: Paint::Ellipse,
                    color: [0.95, 0.78, 0.55],
                });
                if children >= 2 {
                    let fw = (0.5 * d).round().max(3.0);
                    let fh = (0.4 * d).round().max(2.0);
                    let (hx, hy) = head.center();
                    let face = bx(hx - 0.5 * fw, hy - 0.3 * fh, hx + 0.5 * fw, hy + 0.7 * fh);
                    parts.push(Part {
                        class_id: AGENT_FACE,
                        bbox: face,
                        paint: Paint::Rect,
                        color: [0.55, 0.12, 0.12],
                    });
                }
            }
        }
        Kind::Cart => {
            parts.push(Part {
                class_id: CART,
                bbox: outer,
                paint: Paint::Rect,
                color: [0.9, 0.55, 0.1],
            });
            if children >= 1 {
                let d = (0.5 * h).round().max(4.0);
                let wx = x1 + (0.12 * w).round();
                parts.push(Part {
                    class_id: CART_WHEEL,
                    bbox: bx(wx, y2 - d, wx + d, y2),
                    paint: Paint::Ellipse,
                    color: [0.12, 0.12, 0.12],
                });
            }
        }
        Kind::Crate => {
            parts.push(Part {
                class_id: CRATE,
                bbox: outer,
                paint: Paint::Hatch,
                color: [0.5, 0.32, 0.15],
            });
            if children >= 1 {
                let lid_h = (0.3 * h).round().max(3.0);
                parts.push(Part {
                    class_id: CRATE_LID,
                    bbox: bx(x1, y1, x2, y1 + lid_h),
                    paint: Paint::Rect,
                    color: [0.8, 0.65, 0.35],
                });
            }
        }
        Kind::Disc => {
            parts.push(Part {
                class_id: DISC,
                bbox: outer,
                paint: Paint::Ellipse,
                color: [0.2, 0.72, 0.3],
            });
            if children >= 1 {
                let d = (0.6 * w).round().max(6.0);
                let (cx, cy) = outer.center();
                parts.push(Part {
                    class_id: RING,
                    bbox: bx(cx - 0.5 * d, cy - 0.5 * d, cx + 0.5 * d, cy + 0.5 * d),
                    paint: Paint::Annulus { inner: 0.55 },
                    color: [0.95, 0.92, 0.2],
                });
            }
        }
        Kind::Bar => parts.push(Part {
            class_id: BAR,
            bbox: outer,
            paint: Paint::Rect,
            color: [0.82, 0.2, 0.62],
        }),
        Kind::Blob => parts.push(Part {
            class_id: BLOB,
            bbox: outer,
            paint: Paint::Ellipse,
            color: [0.4, 0.85, 0.88],
        }),
        Kind::Tri => parts.push(Part {
            class_id: TRI,
            bbox: outer,
            paint: Paint::Triangle,
            color: [0.92, 0.3, 0.25],
        }),
    }
    Object { parts }
}

fn covers(paint: Paint, b: &BoxXYXY, px: f64, py: f64) -> bool {
    if px < b.x1() || px >= b.x2() || py < b.y1() || py >= b.y2() {
        return false;
    }
    let (cx, cy) = b.center();
    let u = (px - cx) / (0.5 * b.width());
    let v = (py - cy) / (0.5 * b.height());
    match paint {
        Paint::Rect | Paint::Hatch => true,
        Paint::Ellipse => u * u + v * v <= 1.0,
        Paint::Annulus { inner } => {
            let r2 = u * u + v * v;
            r2 <= 1.0 && r2 >= inner * inner
        }
        Paint::Triangle => {
            // apex at top center, base at the bottom edge
            let t = (py - b.y1()) / b.height();
            u.abs() <= t
        }
    }
}

/// Paint one part into the image.
pub(crate) fn paint(image: &mut Image, part: &Part) {
    let b = &part.bbox;
    let y0 = b.y1().floor().max(0.0) as usize;
    let y1 = (b.y2().ceil() as usize).min(image.height);
    let x0 = b.x1().floor().max(0.0) as usize;
    let x1 = (b.x2().ceil() as usize).min(image.width);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if !covers(part.paint, b, px, py) {
                continue;
            }
            let mut color = part.color;
            if let Paint::Hatch = part.paint {
                let d = (x as i64 - b.x1() as i64) + (y as i64 - b.y1() as i64);
                if d.rem_euclid(6) < 2 {
                    color = [color[0] * 0.6, color[1] * 0.6, color[2] * 0.6];
                }
            }
            image.pixel_mut(y, x).copy_from_slice(&color);
        }
    }
}
