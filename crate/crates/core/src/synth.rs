//! Synthetic forward-looking-sonar-style images: a fan-shaped insonified
//! region with multiplicative speckle, object blobs with radial acoustic
//! shadows behind them, and shadowless clutter, with exact bounding boxes.
//!
//! Objects come in two reflectivity classes. Most return strongly and stand
//! far above the background; a minority return weakly and are barely above
//! the speckle, visible mainly through their shadow. Clutter pieces (streaks
//! and small debris blobs) are bright but cast no shadow and get no box, so
//! they are distractors: appearance alone cannot separate them from weak
//! objects, shadow structure can.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::tensor::Tensor;

/// A generated image with its ground truth. `placement_shortfall` flags that
/// object placement gave up before reaching the requested count.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image: Tensor,
    pub boxes: Vec<BoundingBox>,
    pub placement_shortfall: bool,
}

struct Fan {
    apex_x: f64,
    apex_y: f64,
    r_near: f64,
    r_far: f64,
    half_angle: f64,
}

impl Fan {
    fn new(width: usize, height: usize) -> Fan {
        let h = height as f64;
        let w = width as f64;
        Fan {
            apex_x: w / 2.0,
            apex_y: 1.18 * h,
            r_near: 0.26 * h,
            r_far: 1.13 * h,
            half_angle: (0.47 * w / (0.68 * h)).atan(),
        }
    }

    /// Range and bearing of a pixel relative to the apex.
    fn polar(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.apex_x;
        let dy = self.apex_y - y;
        (dx.hypot(dy), dx.atan2(dy))
    }

    fn contains(&self, x: f64, y: f64, margin: f64) -> bool {
        let (r, phi) = self.polar(x, y);
        r >= self.r_near + margin
            && r <= self.r_far - margin
            && phi.abs() <= self.half_angle - margin / self.r_far
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Ellipse,
    Rectangle,
    Triangle,
}

struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    shape: Shape,
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let px = x - self.cx;
        let py = y - self.cy;
        let u = self.cos * px + self.sin * py;
        let v = -self.sin * px + self.cos * py;
        match self.shape {
            Shape::Ellipse => (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0,
            Shape::Rectangle => u.abs() <= self.a && v.abs() <= self.b,
            Shape::Triangle => {
                // Isoceles triangle with apex at (0, -b) and base y = +b.
                v <= self.b && v >= -self.b && u.abs() <= self.a * (v + self.b) / (2.0 * self.b)
            }
        }
    }

    /// Normalized squared distance from the blob center, for the intensity
    /// falloff profile.
    fn profile(&self, x: f64, y: f64) -> f64 {
        let px = x - self.cx;
        let py = y - self.cy;
        let u = self.cos * px + self.sin * py;
        let v = -self.sin * px + self.cos * py;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).min(1.0)
    }

    /// Half-extents of the axis-aligned box around the rotated shape.
    fn bbox_half_extents(&self) -> (f64, f64) {
        match self.shape {
            Shape::Ellipse => {
                let hx = (self.a * self.cos).hypot(self.b * self.sin);
                let hy = (self.a * self.sin).hypot(self.b * self.cos);
                (hx, hy)
            }
            Shape::Rectangle => (
                self.a * self.cos.abs() + self.b * self.sin.abs(),
                self.a * self.sin.abs() + self.b * self.cos.abs(),
            ),
            Shape::Triangle => {
                let corners = [(-self.a, self.b), (self.a, self.b), (0.0, -self.b)];
                let mut hx = 0.0f64;
                let mut hy = 0.0f64;
                for (u, v) in corners {
                    hx = hx.max((self.cos * u - self.sin * v).abs());
                    hy = hy.max((self.sin * u + self.cos * v).abs());
                }
                (hx, hy)
            }
        }
    }
}

/// Unit-mean multiplicative speckle: `1 + 0.35 (E - 1)` with `E` standard
/// exponential, truncated at zero.
fn speckle(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen();
    let e = -(1.0 - u).ln();
    (1.0 + 0.35 * (e - 1.0)).max(0.0)
}

struct Placed {
    blob: Blob,
    bbox: BoundingBox,
    level: f64,
    phi_min: f64,
    phi_max: f64,
    r_max: f64,
    shadow_len: f64,
}

struct ClutterPiece {
    blob: Blob,
    level: f64,
}

const PLACEMENT_ATTEMPTS: usize = 200;
const CLUTTER_ATTEMPTS: usize = 80;

/// Fraction of placement attempts that draw a weak-return object.
const WEAK_RETURN_FRACTION: f64 = 0.25;

/// Renders one synthetic sonar image. Deterministic per seed; extents must
/// be at least 192 so a 96x96 window grid fits with room to spare.
pub fn synth_sonar_image(
    width: usize,
    height: usize,
    object_count: usize,
    seed: u64,
) -> Result<SynthImage> {
    if width < 192 || height < 192 {
        return Err(Error::invalid(
            "synth_sonar_image",
            format!("extents must be at least 192, got {width}x{height}"),
        ));
    }
    let fan = Fan::new(width, height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Object placement first so the pixel passes below stay branch-free.
    let mut placed: Vec<Placed> = Vec::with_capacity(object_count);
    let mut shortfall = false;
    for _ in 0..object_count {
        let mut accepted = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let weak = rng.gen_bool(WEAK_RETURN_FRACTION);
            let shape = match rng.gen_range(0u8..3) {
                0 => Shape::Ellipse,
                1 => Shape::Rectangle,
                _ => Shape::Triangle,
            };
            // Extents keep every bounding box between 76 and 130 pixels, so
            // a 96px window can always reach IoU above one half with it.
            // Weak objects stay at the small end (box capped at 96 below) so
            // their best window still sees part of the shadow.
            let (lo, hi) = match (shape, weak) {
                (Shape::Ellipse, false) => (38.0, 52.0),
                (Shape::Rectangle, false) => (38.0, 44.0),
                (Shape::Triangle, false) => (39.0, 45.0),
                (Shape::Ellipse, true) => (38.0, 45.0),
                (Shape::Rectangle, true) => (36.0, 40.0),
                (Shape::Triangle, true) => (38.0, 42.0),
            };
            let a = rng.gen_range(lo..hi);
            let b = rng.gen_range(lo..hi);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let cx = rng.gen_range(60.0..(width as f64 - 60.0));
            let cy = rng.gen_range(60.0..(height as f64 - 60.0));
            let blob = Blob {
                cx,
                cy,
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
                shape,
            };
            let (hx, hy) = blob.bbox_half_extents();
            let x0 = (cx - hx).floor();
            let y0 = (cy - hy).floor();
            let x1 = (cx + hx).ceil();
            let y1 = (cy + hy).ceil();
            if x0 < 2.0 || y0 < 2.0 || x1 > width as f64 - 2.0 || y1 > height as f64 - 2.0 {
                continue;
            }
            let corners_inside = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
                .iter()
                .all(|&(x, y)| fan.contains(x, y, 3.0));
            if !corners_inside {
                continue;
            }
            let bbox = BoundingBox::new(
                x0 as i64,
                y0 as i64,
                (x1 - x0) as i64,
                (y1 - y0) as i64,
            )?;
            if bbox.w.min(bbox.h) < 70 {
                continue;
            }
            if weak && bbox.w.max(bbox.h) > 96 {
                continue;
            }
            if placed.iter().any(|p| iou(&p.bbox, &bbox) > 0.05) {
                continue;
            }
            let level = if weak {
                rng.gen_range(0.20..0.28)
            } else {
                rng.gen_range(0.60..0.85)
            };
            let shadow_factor: f64 = rng.gen_range(1.6..2.6);
            // Angular span and far edge of the shape, for the shadow wedge.
            let mut phi_min = f64::INFINITY;
            let mut phi_max = f64::NEG_INFINITY;
            let mut r_max = 0.0f64;
            for &(x, y) in &[(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
                let (r, phi) = fan.polar(x, y);
                phi_min = phi_min.min(phi);
                phi_max = phi_max.max(phi);
                r_max = r_max.max(r);
            }
            placed.push(Placed {
                blob,
                bbox,
                level,
                phi_min,
                phi_max,
                r_max,
                shadow_len: shadow_factor * hx.max(hy) * 2.0,
            });
            accepted = true;
            break;
        }
        if !accepted {
            shortfall = true;
        }
    }

    // Clutter placement: anywhere in the fan that keeps clear of the object
    // boxes. Pieces may overlap each other loosely; a failed piece is simply
    // skipped since clutter density is not part of the ground truth.
    let clutter_count = rng.gen_range(4..=7usize);
    let mut clutter: Vec<ClutterPiece> = Vec::with_capacity(clutter_count);
    for _ in 0..clutter_count {
        for _ in 0..CLUTTER_ATTEMPTS {
            let streak = rng.gen_bool(0.6);
            let (a, b) = if streak {
                (rng.gen_range(18.0..42.0), rng.gen_range(4.0..9.0))
            } else {
                (rng.gen_range(7.0..15.0), rng.gen_range(7.0..15.0))
            };
            let shape = if streak { Shape::Rectangle } else { Shape::Ellipse };
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let cx = rng.gen_range(20.0..(width as f64 - 20.0));
            let cy = rng.gen_range(20.0..(height as f64 - 20.0));
            let blob = Blob {
                cx,
                cy,
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
                shape,
            };
            let (hx, hy) = blob.bbox_half_extents();
            let x0 = (cx - hx).floor();
            let y0 = (cy - hy).floor();
            let x1 = (cx + hx).ceil();
            let y1 = (cy + hy).ceil();
            if x0 < 2.0 || y0 < 2.0 || x1 > width as f64 - 2.0 || y1 > height as f64 - 2.0 {
                continue;
            }
            let corners_inside = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
                .iter()
                .all(|&(x, y)| fan.contains(x, y, 3.0));
            if !corners_inside {
                continue;
            }
            // Keep a 6px gap to every object box so clutter never reads as
            // part of an object.
            let clear_of_objects = placed.iter().all(|p| {
                x1 < (p.bbox.x - 6) as f64
                    || ((p.bbox.right() + 6) as f64) < x0
                    || y1 < (p.bbox.y - 6) as f64
                    || ((p.bbox.bottom() + 6) as f64) < y0
            });
            if !clear_of_objects {
                continue;
            }
            let level = rng.gen_range(0.35..0.70);
            clutter.push(ClutterPiece { blob, level });
            break;
        }
    }

    let mut data = vec![0.0f32; width * height];
    for y in 0..height {
        for x in 0..width {
            // One speckle draw per pixel regardless of region, so the noise
            // field does not depend on the geometry.
            let s = speckle(&mut rng);
            let fx = x as f64;
            let fy = y as f64;
            let (r, phi) = fan.polar(fx, fy);
            let inside = r >= fan.r_near && r <= fan.r_far && phi.abs() <= fan.half_angle;
            let mut value = if inside {
                // Gentle range attenuation toward the far arc.
                let t = (r - fan.r_near) / (fan.r_far - fan.r_near);
                0.13 * (1.0 - 0.25 * t)
            } else {
                0.015
            };
            if inside {
                for p in &placed {
                    if phi >= p.phi_min
                        && phi <= p.phi_max
                        && r > p.r_max
                        && r <= p.r_max + p.shadow_len
                    {
                        let t = (r - p.r_max) / p.shadow_len;
                        value *= 0.25 + 0.75 * t;
                    }
                }
            }
            let mut covered = false;
            for p in &placed {
                if p.blob.contains(fx, fy) {
                    value = p.level * (1.05 - 0.35 * p.blob.profile(fx, fy));
                    covered = true;
                    break;
                }
            }
            if !covered && inside {
                for c in &clutter {
                    if c.blob.contains(fx, fy) {
                        value = c.level * (1.05 - 0.35 * c.blob.profile(fx, fy));
                        break;
                    }
                }
            }
            data[y * width + x] = (value * s).clamp(0.0, 1.0) as f32;
        }
    }

    Ok(SynthImage {
        image: Tensor::from_vec(&[1, height, width], data)?,
        boxes: placed.iter().map(|p| p.bbox).collect(),
        placement_shortfall: shortfall,
    })
}
