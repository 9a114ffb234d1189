//! Procedural "faces" standing in for a real photo/sketch corpus.
//!
//! Each identity is a random composition of hair, face outline, eyes, brows,
//! nose and mouth. The photo fills every region with a color; the sketch
//! inks the region boundaries on white paper.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::raster::{PhotoImage, SketchImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Region {
    Background,
    Hair,
    Face,
    Eye,
    Brow,
    Nose,
    Mouth,
}

#[derive(Debug, Clone)]
pub struct ToyFace {
    face_c: (f64, f64),
    face_r: (f64, f64),
    hairline: f64,
    hair_scale: f64,
    eye_y: f64,
    eye_dx: f64,
    eye_r: (f64, f64),
    brow_gap: f64,
    brow_len: f64,
    brow_tilt: f64,
    nose_len: f64,
    nose_w: f64,
    mouth_y: f64,
    mouth_w: f64,
    mouth_h: f64,
    colors: [[f32; 3]; 7],
    ink: [f32; 7],
}

impl ToyFace {
    /// Sample one identity's geometry; all lengths are fractions of the image side.
    pub fn random(rng: &mut impl Rng) -> Self {
        let mut color = |lo: f32, hi: f32| -> [f32; 3] {
            [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
        };
        let colors = [
            color(0.55, 1.0),
            color(0.0, 0.45),
            color(0.5, 0.95),
            color(0.0, 0.3),
            color(0.05, 0.35),
            color(0.35, 0.7),
            color(0.3, 0.8),
        ];
        let ink = std::array::from_fn(|_| rng.random_range(0.0f32..0.35));
        let face_r = (rng.random_range(0.2..0.32), rng.random_range(0.26..0.38));
        Self {
            face_c: (rng.random_range(0.42..0.58), rng.random_range(0.5..0.6)),
            face_r,
            hairline: rng.random_range(-0.75..-0.2),
            hair_scale: rng.random_range(1.05..1.3),
            eye_y: rng.random_range(-0.3..-0.05),
            eye_dx: rng.random_range(0.3..0.55),
            eye_r: (rng.random_range(0.05..0.1), rng.random_range(0.02..0.06)),
            brow_gap: rng.random_range(0.04..0.1),
            brow_len: rng.random_range(0.06..0.12),
            brow_tilt: rng.random_range(-0.4..0.4),
            nose_len: rng.random_range(0.15..0.35),
            nose_w: rng.random_range(0.02..0.05),
            mouth_y: rng.random_range(0.3..0.6),
            mouth_w: rng.random_range(0.2..0.55),
            mouth_h: rng.random_range(0.02..0.07),
            colors,
            ink,
        }
    }

    fn region(&self, x: f64, y: f64) -> Region {
        let (cx, cy) = self.face_c;
        let (rx, ry) = self.face_r;
        // Face-relative coordinates: (u, v) in units of the face radii.
        let u = (x - cx) / rx;
        let v = (y - cy) / ry;
        let in_face = u * u + v * v <= 1.0;
        let hair_u = u / self.hair_scale;
        let hair_v = v / self.hair_scale;
        let in_hair = hair_u * hair_u + hair_v * hair_v <= 1.0 && v < self.hairline;

        if in_face {
            for side in [-1.0, 1.0] {
                let ex = side * self.eye_dx;
                let du = (u - ex) * rx / self.eye_r.0;
                let dv = (v - self.eye_y) * ry / self.eye_r.1;
                if du * du + dv * dv <= 1.0 {
                    return Region::Eye;
                }
                let by = self.eye_y - (self.eye_r.1 + self.brow_gap) / ry;
                let bu = (u - ex) * rx;
                let bv = (v - by) * ry - side * self.brow_tilt * bu;
                if bu.abs() <= self.brow_len && bv.abs() <= 0.012 {
                    return Region::Brow;
                }
            }
            let nv = (v - self.eye_y) * ry;
            if u.abs() * rx <= self.nose_w * (nv / self.nose_len).clamp(0.3, 1.0)
                && nv >= 0.0
                && nv <= self.nose_len
            {
                return Region::Nose;
            }
            if (u * rx).abs() <= self.mouth_w * rx && ((v - self.mouth_y) * ry).abs() <= self.mouth_h {
                return Region::Mouth;
            }
            if in_hair {
                return Region::Hair;
            }
            return Region::Face;
        }
        if in_hair {
            Region::Hair
        } else {
            Region::Background
        }
    }

    fn labels(&self, size: u32) -> Vec<Region> {
        let s = size as f64;
        (0..size * size)
            .map(|i| {
                let (row, col) = ((i / size) as f64, (i % size) as f64);
                self.region((col + 0.5) / s, (row + 0.5) / s)
            })
            .collect()
    }

    pub fn render_photo(&self, size: u32) -> PhotoImage {
        let labels = self.labels(size);
        let pixels = labels
            .iter()
            .flat_map(|&r| self.colors[r as usize])
            .collect();
        PhotoImage::new(size, size, pixels)
            .expect("colors in range")
            .quantized()
    }

    /// Ink every pixel whose label differs from its right or lower neighbour.
    pub fn render_sketch(&self, size: u32) -> SketchImage {
        let labels = self.labels(size);
        let n = size as usize;
        let mut pixels = vec![1.0f32; n * n];
        for row in 0..n {
            for col in 0..n {
                let here = labels[row * n + col];
                let right = (col + 1 < n).then(|| labels[row * n + col + 1]);
                let down = (row + 1 < n).then(|| labels[(row + 1) * n + col]);
                let boundary = [right, down].into_iter().flatten().find(|&o| o != here);
                if let Some(other) = boundary {
                    // Darker of the two regions' pen pressures.
                    pixels[row * n + col] = self.ink[here as usize].min(self.ink[other as usize]);
                }
            }
        }
        SketchImage::new(size, size, pixels)
            .expect("ink in range")
            .quantized()
    }
}

/// Deterministic identity generator: identity `index` only depends on `(seed, index)`.
pub fn toy_face(seed: u64, index: usize) -> ToyFace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    ToyFace::random(&mut rng)
}
