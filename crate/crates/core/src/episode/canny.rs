//! Canny edge detection: Sobel gradient, non-maximum suppression, hysteresis.

use std::collections::VecDeque;

use crate::error::{invalid, Result};
use crate::raster::SketchImage;

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl EdgeMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut map = Self::new(width, height);
        for row in 0..height {
            for col in 0..width {
                map.data[row * width + col] = f(row, col);
            }
        }
        map
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = on;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Detect edges with thresholds expressed as fractions of the maximum
/// gradient magnitude in the image.
pub fn detect_edges(image: &SketchImage, low_threshold: f64, high_threshold: f64) -> Result<EdgeMap> {
    if !(low_threshold >= 0.0 && low_threshold <= high_threshold) {
        return Err(invalid(format!(
            "canny thresholds must satisfy 0 <= low <= high, got ({low_threshold}, {high_threshold})"
        )));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let px = |r: i64, c: i64| -> f64 {
        let r = r.clamp(0, h as i64 - 1) as usize;
        let c = c.clamp(0, w as i64 - 1) as usize;
        image.get(r, c) as f64
    };

    let mut magnitude = vec![0.0f64; w * h];
    let mut direction = vec![0u8; w * h];
    let mut max_mag = 0.0f64;
    for row in 0..h {
        for col in 0..w {
            let (r, c) = (row as i64, col as i64);
            let gx = (px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1))
                - (px(r - 1, c - 1) + 2.0 * px(r, c - 1) + px(r + 1, c - 1));
            let gy = (px(r + 1, c - 1) + 2.0 * px(r + 1, c) + px(r + 1, c + 1))
                - (px(r - 1, c - 1) + 2.0 * px(r - 1, c) + px(r - 1, c + 1));
            let m = gx.hypot(gy);
            magnitude[row * w + col] = m;
            direction[row * w + col] = quantize_direction(gx, gy);
            max_mag = max_mag.max(m);
        }
    }
    if max_mag == 0.0 {
        return Ok(EdgeMap::new(w, h));
    }

    let mag_at = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            magnitude[r as usize * w + c as usize]
        }
    };
    // Neighbour offsets (before, after) along the gradient, in (row, col).
    const OFFSETS: [(i64, i64); 4] = [(0, 1), (1, 1), (1, 0), (1, -1)];
    let mut thin = vec![0.0f64; w * h];
    for row in 0..h {
        for col in 0..w {
            let m = magnitude[row * w + col];
            if m == 0.0 {
                continue;
            }
            let (dr, dc) = OFFSETS[direction[row * w + col] as usize];
            let (r, c) = (row as i64, col as i64);
            let before = mag_at(r - dr, c - dc);
            let after = mag_at(r + dr, c + dc);
            // Asymmetric comparison keeps exactly one pixel of a symmetric plateau.
            if m > before && m >= after {
                thin[row * w + col] = m;
            }
        }
    }

    let low = low_threshold * max_mag;
    let high = high_threshold * max_mag;
    let mut edges = EdgeMap::new(w, h);
    let mut queue = VecDeque::new();
    for (i, &m) in thin.iter().enumerate() {
        if m > 0.0 && m >= high {
            edges.data[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (row, col) = ((i / w) as i64, (i % w) as i64);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (r, c) = (row + dr, col + dc);
                if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                    continue;
                }
                let j = r as usize * w + c as usize;
                if !edges.data[j] && thin[j] > 0.0 && thin[j] >= low {
                    edges.data[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(edges)
}

/// Bin the gradient angle into 0, 45, 90 or 135 degrees (indices 0..4).
fn quantize_direction(gx: f64, gy: f64) -> u8 {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        0
    } else if angle < 67.5 {
        1
    } else if angle < 112.5 {
        2
    } else {
        3
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_image(size: u32, split: u32, flip: bool) -> SketchImage {
        let mut px = Vec::new();
        for _ in 0..size {
            for col in 0..size {
                let dark = (col < split) != flip;
                px.push(if dark { 0.0 } else { 1.0 });
            }
        }
        SketchImage::new(size, size, px).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let edges = detect_edges(&SketchImage::blank(12, 9), 0.1, 0.3).unwrap();
        assert_eq!(edges.count(), 0);
    }

    #[test]
    fn vertical_step_gives_one_pixel_line() {
        // Sobel responds equally on both sides of the step (columns 7 and 8);
        // suppression keeps the first of the two.
        for flip in [false, true] {
            let edges = detect_edges(&step_image(16, 8, flip), 0.1, 0.3).unwrap();
            for row in 0..16 {
                let cols: Vec<usize> = (0..16).filter(|&c| edges.get(row, c)).collect();
                assert_eq!(cols, vec![7], "row {row}, flip {flip}");
            }
        }
    }

    #[test]
    fn thresholds_out_of_order_rejected() {
        let img = SketchImage::blank(4, 4);
        assert!(detect_edges(&img, 0.5, 0.2).is_err());
        assert!(detect_edges(&img, -0.1, 0.2).is_err());
    }

    #[test]
    fn higher_thresholds_never_add_pixels() {
        // Faint pseudo-random texture.
        let mut px = Vec::new();
        let mut state = 12345u64;
        for _ in 0..32 * 32 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            px.push(0.8 + 0.2 * ((state >> 33) as f32 / (1u64 << 31) as f32));
        }
        let img = SketchImage::new(32, 32, px).unwrap();
        let loose = detect_edges(&img, 0.1, 0.2).unwrap();
        let strict = detect_edges(&img, 0.9, 0.95).unwrap();
        assert!(strict.count() <= loose.count());
        assert!(loose.count() > 0);
    }
}
