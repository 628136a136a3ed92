//! Procedural 10-class corpus: five shapes in two hue families over a
//! textured background with small distractor blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VatError};
use crate::image::ImageTensor;

pub const CLASS_COUNT: usize = 10;

pub const CLASS_NAMES: [&str; CLASS_COUNT] = [
    "warm_disk",
    "warm_square",
    "warm_triangle",
    "warm_ring",
    "warm_cross",
    "cool_disk",
    "cool_square",
    "cool_triangle",
    "cool_ring",
    "cool_cross",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

impl ShapeKind {
    fn for_class(label: usize) -> Self {
        match label % 5 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            3 => ShapeKind::Ring,
            _ => ShapeKind::Cross,
        }
    }

    /// Membership test in the shape's local frame, where the shape spans
    /// roughly `[-1, 1]²`.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeKind::Triangle => {
                // Upward triangle with apex at v = -1 and base at v = 0.8.
                v <= 0.8 && v >= -1.0 && u.abs() <= (v + 1.0) * 0.5
            }
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn sample_rng(seed: u64, source_id: u64) -> ChaCha8Rng {
    // Distinct streams per (seed, source) without correlating neighbouring ids.
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(17)
        ^ source_id.wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(mixed)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; rand_distr would work too but this keeps the stream layout explicit.
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

/// Renders source image `source_id` with class `label` at `size×size×3`.
///
/// Deterministic in `(seed, source_id, label, size)`.
pub fn render_source(seed: u64, source_id: u64, label: usize, size: usize) -> Result<ImageTensor> {
    if label >= CLASS_COUNT {
        return Err(VatError::InvalidParameter(format!("label {label} >= {CLASS_COUNT}")));
    }
    if size < 8 {
        return Err(VatError::InvalidParameter(format!("image size {size} too small")));
    }
    let mut rng = sample_rng(seed, source_id);
    let s = size as f32;

    // Background: low-saturation two-colour gradient.
    let bg_a = hsv_to_rgb(rng.gen(), rng.gen_range(0.0..0.3), rng.gen_range(0.3..0.75));
    let bg_b = hsv_to_rgb(rng.gen(), rng.gen_range(0.0..0.3), rng.gen_range(0.3..0.75));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());

    // Foreground object.
    let shape = ShapeKind::for_class(label);
    let hue = if label < 5 {
        rng.gen_range(-0.03..0.11)
    } else {
        rng.gen_range(0.52..0.66)
    };
    let fg = hsv_to_rgb(hue, rng.gen_range(0.65..1.0), rng.gen_range(0.7..1.0));
    let radius = rng.gen_range(0.24..0.36) * s;
    let cx = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.gen_range(-0.12..0.12) * s;
    let rot: f32 = match shape {
        ShapeKind::Disk | ShapeKind::Ring => 0.0,
        _ => rng.gen_range(-0.5..0.5),
    };
    let (rc, rs) = (rot.cos(), rot.sin());

    // Distractor blobs of arbitrary colour.
    let n_distractors = rng.gen_range(1..=3);
    let distractors: Vec<([f32; 3], f32, f32, f32)> = (0..n_distractors)
        .map(|_| {
            let col = hsv_to_rgb(rng.gen(), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9));
            (col, rng.gen_range(0.0..s), rng.gen_range(0.0..s), rng.gen_range(0.05..0.1) * s)
        })
        .collect();

    let mut data = Vec::with_capacity(size * size * 3);
    const SUB: usize = 2;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0f32; 3];
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let x = px as f32 + (sx as f32 + 0.5) / SUB as f32;
                    let y = py as f32 + (sy as f32 + 0.5) / SUB as f32;
                    let t = (((x / s - 0.5) * ga + (y / s - 0.5) * gb) + 0.5).clamp(0.0, 1.0);
                    let mut col = [
                        bg_a[0] * (1.0 - t) + bg_b[0] * t,
                        bg_a[1] * (1.0 - t) + bg_b[1] * t,
                        bg_a[2] * (1.0 - t) + bg_b[2] * t,
                    ];
                    for (dcol, dx, dy, dr) in &distractors {
                        if (x - dx).powi(2) + (y - dy).powi(2) <= dr * dr {
                            col = *dcol;
                        }
                    }
                    let (lx, ly) = ((x - cx) / radius, (y - cy) / radius);
                    let (u, v) = (lx * rc + ly * rs, -lx * rs + ly * rc);
                    if shape.contains(u, v) {
                        col = fg;
                    }
                    for c in 0..3 {
                        acc[c] += col[c];
                    }
                }
            }
            for a in acc {
                data.push(a / (SUB * SUB) as f32);
            }
        }
    }
    for v in &mut data {
        *v += 0.02 * gaussian(&mut rng);
    }
    ImageTensor::from_clamped(size, size, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_source() {
        let a = render_source(3, 17, 4, 32).unwrap();
        let b = render_source(3, 17, 4, 32).unwrap();
        assert_eq!(a, b);
        let c = render_source(3, 18, 4, 32).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_label() {
        assert!(render_source(0, 0, CLASS_COUNT, 32).is_err());
    }

    #[test]
    fn warm_and_cool_objects_differ_in_hue() {
        // The image center is always inside a disk.
        let warm = render_source(0, 1, 0, 32).unwrap();
        let cool = render_source(0, 1, 5, 32).unwrap();
        let (r, b) = (warm.get(16, 16, 0), warm.get(16, 16, 2));
        assert!(r > b, "warm center r={r} b={b}");
        let (r, b) = (cool.get(16, 16, 0), cool.get(16, 16, 2));
        assert!(b > r, "cool center r={r} b={b}");
    }
}
