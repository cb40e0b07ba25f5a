//! Procedural test scenes: smooth gradients overlaid with anti-aliased
//! discs, rectangles and stripe patches. Used where no image corpus is
//! available (tests, demos, desk-scale training).
//!
//! [`scene`] gives colourful natural-ish content; [`line_art`] gives dense
//! hard-edged strokes, the kind of structure where a learned upscaler pulls
//! ahead of bicubic interpolation fastest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Image;

enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Stripes { cx: f64, cy: f64, r: f64, dir: (f64, f64), period: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Stripes {
                cx,
                cy,
                r,
                dir,
                period,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                if dx.abs() > r || dy.abs() > r {
                    return false;
                }
                let t = (dx * dir.0 + dy * dir.1) / period;
                t.rem_euclid(1.0) < 0.5
            }
        }
    }
}

const SUPERSAMPLE: usize = 4;

pub fn scene(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let color = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let top = color(&mut rng);
    let bottom = color(&mut rng);
    let count = rng.gen_range(6..12);
    let shapes: Vec<(Shape, [f64; 3])> = (0..count)
        .map(|_| {
            let c = color(&mut rng);
            let cx = rng.gen_range(0.0..w);
            let cy = rng.gen_range(0.0..h);
            let size = rng.gen_range(0.08..0.3) * w.min(h);
            let shape = match rng.gen_range(0..3) {
                0 => Shape::Disc { cx, cy, r: size },
                1 => Shape::Rect {
                    x0: cx - size,
                    y0: cy - size * rng.gen_range(0.3..1.0),
                    x1: cx + size * rng.gen_range(0.3..1.0),
                    y1: cy + size,
                },
                _ => {
                    let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                    Shape::Stripes {
                        cx,
                        cy,
                        r: size,
                        dir: (a.cos(), a.sin()),
                        period: rng.gen_range(3.0..9.0),
                    }
                }
            };
            (shape, c)
        })
        .collect();

    let mut data = Vec::with_capacity(width * height * 3);
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for py in 0..height {
        for px in 0..width {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let t = y / h;
                    let mut c = [0.0; 3];
                    for i in 0..3 {
                        c[i] = top[i] * (1.0 - t) + bottom[i] * t;
                    }
                    for (shape, sc) in &shapes {
                        if shape.contains(x, y) {
                            c = *sc;
                        }
                    }
                    for i in 0..3 {
                        acc[i] += c[i];
                    }
                }
            }
            for v in acc {
                data.push((v / n * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image {
        width,
        height,
        data,
    }
}

const LINE_DARK: u8 = 20;
const LINE_LIGHT: u8 = 235;
const LINE_BACKGROUND: u8 = 128;

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Grey line drawing: 60–100 dark or light strokes, 1–3 px wide and
/// 10–40 px long, on a mid-grey background. Edges are not anti-aliased.
pub fn line_art(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let count = rng.gen_range(60..100);
    let strokes: Vec<_> = (0..count)
        .map(|_| {
            let a = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let len = rng.gen_range(10.0..40.0);
            let b = (a.0 + len * angle.cos(), a.1 + len * angle.sin());
            let half_width = f64::from(rng.gen_range(1u8..4)) / 2.0;
            let value = if rng.gen::<bool>() { LINE_DARK } else { LINE_LIGHT };
            (a, b, half_width, value)
        })
        .collect();
    let mut data = Vec::with_capacity(width * height * 3);
    for py in 0..height {
        for px in 0..width {
            let p = (px as f64 + 0.5, py as f64 + 0.5);
            let mut v = LINE_BACKGROUND;
            for &(a, b, half_width, value) in &strokes {
                if segment_distance(p, a, b) <= half_width {
                    v = value;
                }
            }
            data.extend([v; 3]);
        }
    }
    Image {
        width,
        height,
        data,
    }
}
