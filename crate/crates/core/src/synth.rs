//! Procedural "natural-ish" images: smooth color gradients, soft-edged shapes,
//! oriented texture and sensor noise. Used where no photo corpus is at hand
//! (tests, demos, the `synth-images` command). Every image is a pure function
//! of `(seed, index)`.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::ImageBatch;

#[derive(Clone, Debug)]
pub struct SyntheticImages {
    pub seed: u64,
    pub size: usize,
    pub channels: usize,
}

impl SyntheticImages {
    pub fn new(seed: u64, size: usize, channels: usize) -> Self {
        Self {
            seed,
            size,
            channels,
        }
    }

    /// The `index`-th image of this family, as a batch of one.
    pub fn image(&self, index: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03)),
        );
        let rgb = render(&mut rng, self.size);
        let mut data = Array4::<f32>::ones((1, self.channels, self.size, self.size));
        for c in 0..3 {
            for y in 0..self.size {
                for x in 0..self.size {
                    data[[0, c, y, x]] = rgb[(c * self.size + y) * self.size + x];
                }
            }
        }
        ImageBatch::clamped(data).expect("synthetic image is valid")
    }

    /// Images `start..start + count` stacked into one batch.
    pub fn batch(&self, start: u64, count: usize) -> ImageBatch {
        let items: Vec<_> = (0..count as u64).map(|i| self.image(start + i)).collect();
        ImageBatch::stack(&items).expect("uniform shapes")
    }

    /// Images `start..start + count`, one batch each.
    pub fn images(&self, start: u64, count: usize) -> Vec<ImageBatch> {
        (0..count as u64).map(|i| self.image(start + i)).collect()
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // Correlated channels keep colors away from pure saturated primaries.
    let base: f32 = rng.random_range(0.1..0.9);
    std::array::from_fn(|_| (base + rng.random_range(-0.35f32..0.35)).clamp(0.0, 1.0))
}

fn smoothstep(edge: f32, x: f32) -> f32 {
    // coverage for signed distance `x` (negative inside), edge width `edge`
    let t = (0.5 - x / edge).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

enum Shape {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32, angle: f32 },
    Rect { cx: f32, cy: f32, hw: f32, hh: f32, angle: f32 },
    Band { offset: f32, angle: f32, width: f32 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let angle = rng.random_range(0.0..std::f32::consts::PI);
        match rng.random_range(0..5) {
            0 | 1 => Shape::Ellipse {
                cx: rng.random_range(0.1..0.9),
                cy: rng.random_range(0.1..0.9),
                rx: rng.random_range(0.08..0.35),
                ry: rng.random_range(0.08..0.35),
                angle,
            },
            2 | 3 => Shape::Rect {
                cx: rng.random_range(0.1..0.9),
                cy: rng.random_range(0.1..0.9),
                hw: rng.random_range(0.06..0.3),
                hh: rng.random_range(0.06..0.3),
                angle,
            },
            _ => Shape::Band {
                offset: rng.random_range(-0.4..0.4),
                angle,
                width: rng.random_range(0.05..0.2),
            },
        }
    }

    /// Approximate signed distance in unit-square coordinates.
    fn distance(&self, u: f32, v: f32) -> f32 {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (u - cx, v - cy);
                let (a, b) = (c * dx + s * dy, -s * dx + c * dy);
                let r = ((a / rx).powi(2) + (b / ry).powi(2)).sqrt();
                (r - 1.0) * rx.min(ry)
            }
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (u - cx, v - cy);
                let (a, b) = (c * dx + s * dy, -s * dx + c * dy);
                (a.abs() - hw).max(b.abs() - hh)
            }
            Shape::Band { offset, angle, width } => {
                let (s, c) = angle.sin_cos();
                ((u - 0.5) * c + (v - 0.5) * s - offset).abs() - width
            }
        }
    }
}

/// Renders `[3, size, size]` in row-major planes.
fn render(rng: &mut ChaCha8Rng, size: usize) -> Vec<f32> {
    let n = size * size;
    let mut out = vec![0f32; 3 * n];
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (gs, gc) = angle.sin_cos();
    let inv = 1.0 / size as f32;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f32 + 0.5) * inv, (y as f32 + 0.5) * inv);
            let t = (((u - 0.5) * gc + (v - 0.5) * gs) + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                out[c * n + y * size + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let edge = rng.random_range(0.5f32..2.0) * inv;
    for _ in 0..rng.random_range(2..6) {
        let shape = Shape::random(rng);
        let color = random_color(rng);
        let opacity: f32 = rng.random_range(0.6..1.0);
        // shading gradient across the shape
        let shade_dir: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let shade_amp: f32 = rng.random_range(0.0..0.25);
        let (ss, sc) = shade_dir.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f32 + 0.5) * inv, (y as f32 + 0.5) * inv);
                let cover = smoothstep(edge, shape.distance(u, v)) * opacity;
                if cover <= 0.0 {
                    continue;
                }
                let shade = 1.0 + shade_amp * ((u - 0.5) * sc + (v - 0.5) * ss);
                for c in 0..3 {
                    let p = &mut out[c * n + y * size + x];
                    *p = *p * (1.0 - cover) + (color[c] * shade).clamp(0.0, 1.0) * cover;
                }
            }
        }
    }

    if rng.random_bool(0.5) {
        let freq: f32 = rng.random_range(3.0..9.0);
        let amp: f32 = rng.random_range(0.02..0.08);
        let dir: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let (ds, dc) = dir.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f32 + 0.5) * inv, (y as f32 + 0.5) * inv);
                let t = amp * (std::f32::consts::TAU * freq * (u * dc + v * ds)).sin();
                for c in 0..3 {
                    out[c * n + y * size + x] += t;
                }
            }
        }
    }

    let noise = Normal::new(0.0f32, rng.random_range(0.003..0.02)).unwrap();
    for p in out.iter_mut() {
        *p = (*p + noise.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let gen = SyntheticImages::new(42, 32, 4);
        assert_eq!(gen.image(3), gen.image(3));
        assert_ne!(gen.image(3), gen.image(4));
        assert_ne!(gen.image(3), SyntheticImages::new(43, 32, 4).image(3));
    }

    #[test]
    fn alpha_is_opaque_and_content_varies() {
        let img = SyntheticImages::new(1, 32, 4).image(0);
        let d = img.data();
        assert!(d.slice(ndarray::s![0, 3, .., ..]).iter().all(|&v| v == 1.0));
        let rgb = d.slice(ndarray::s![0, 0..3, .., ..]);
        let mean = rgb.mean().unwrap();
        let var = rgb.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        assert!(var > 1e-4, "image should not be flat, var {var}");
    }
}
