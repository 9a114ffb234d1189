use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error};
use crate::raster::SketchImage;

/// Pre-filter applied to a complete sketch before edge detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LineFilter {
    Passthrough,
    /// Separable Gaussian low-pass with the given kernel radius.
    Smooth { radius: usize },
}

impl Default for LineFilter {
    fn default() -> Self {
        LineFilter::Passthrough
    }
}

impl FromStr for LineFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "passthrough" => Ok(LineFilter::Passthrough),
            "smooth" => Ok(LineFilter::Smooth { radius: 1 }),
            other => {
                if let Some(r) = other.strip_prefix("smooth:") {
                    let radius = r
                        .parse()
                        .map_err(|_| invalid(format!("bad smoothing radius in {other:?}")))?;
                    Ok(LineFilter::Smooth { radius })
                } else {
                    Err(invalid(format!("unknown line filter mode {other:?}")))
                }
            }
        }
    }
}

/// Normalized 1-D Gaussian weights of length `2 * radius + 1`, sigma = radius / 2.
pub fn smoothing_kernel(radius: usize) -> Vec<f64> {
    if radius == 0 {
        return vec![1.0];
    }
    let sigma = radius as f64 / 2.0;
    let raw: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Produce the line image that edge detection runs on.
pub fn extract_structural_lines(sketch: &SketchImage, mode: LineFilter) -> SketchImage {
    match mode {
        LineFilter::Passthrough => sketch.clone(),
        LineFilter::Smooth { radius } => smooth(sketch, radius),
    }
}

fn smooth(sketch: &SketchImage, radius: usize) -> SketchImage {
    let kernel = smoothing_kernel(radius);
    let (w, h) = (sketch.width() as usize, sketch.height() as usize);
    let r = radius as i64;
    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;

    // Filter in ink space (1 - value) so the white background is the zero signal.
    let ink: Vec<f64> = sketch.pixels().iter().map(|&v| 1.0 - v as f64).collect();
    let mut horiz = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            horiz[row * w + col] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * ink[row * w + clamp(col as i64 + k as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; w * h];
    for row in 0..h {
        for col in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * horiz[clamp(row as i64 + k as i64 - r, h) * w + col])
                .sum();
            out[row * w + col] = (1.0 - v).clamp(0.0, 1.0) as f32;
        }
    }
    SketchImage::new(sketch.width(), sketch.height(), out)
        .expect("smoothing preserves shape and range")
}
