//! Stroke payloads and their rasterization onto a grayscale canvas.

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::raster::SketchImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrokePoint {
    pub x: f64,
    pub y: f64,
    /// Ink darkness in `(0, 1]`; 1 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pressure: Option<f64>,
}

/// One pen-down to pen-up stroke: a polyline, or the whole canvas as a
/// base64-encoded grayscale PNG.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrokePayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<StrokePoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raster_patch: Option<String>,
}

impl StrokePayload {
    pub fn polyline(points: Vec<StrokePoint>, width: f64) -> Self {
        Self {
            points: Some(points),
            width: Some(width),
            raster_patch: None,
        }
    }

    pub fn raster(canvas: &SketchImage) -> Result<Self> {
        Ok(Self {
            raster_patch: Some(base64::engine::general_purpose::STANDARD.encode(canvas.to_png_bytes()?)),
            ..Self::default()
        })
    }

    /// Add this stroke's ink to `canvas`. Pixels only ever get darker.
    pub fn apply(&self, canvas: &mut SketchImage, default_width: f64) -> Result<()> {
        match (&self.points, &self.raster_patch) {
            (Some(points), None) => draw_polyline(canvas, points, self.width.unwrap_or(default_width)),
            (None, Some(patch)) => {
                if self.width.is_some() {
                    return Err(invalid("width only applies to point strokes"));
                }
                merge_raster(canvas, patch)
            }
            (Some(_), Some(_)) => Err(invalid("send either points or raster_patch, not both")),
            (None, None) => Err(invalid("stroke needs points or raster_patch")),
        }
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (((px - cx).powi(2) + (py - cy).powi(2)).sqrt(), t)
}

/// Round-capped polyline: a pixel centre within `width / 2` of any segment is
/// inked with the pressure interpolated along that segment.
fn draw_polyline(canvas: &mut SketchImage, points: &[StrokePoint], width: f64) -> Result<()> {
    let (w, h) = (canvas.width() as f64, canvas.height() as f64);
    if points.is_empty() {
        return Err(invalid("stroke has no points"));
    }
    if !(width > 0.0 && width <= w.max(h)) {
        return Err(invalid(format!("stroke width {width} outside (0, {}]", w.max(h))));
    }
    for p in points {
        if !(p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h) {
            return Err(invalid(format!("point ({}, {}) outside the {w}x{h} canvas", p.x, p.y)));
        }
        if let Some(pr) = p.pressure {
            if !(pr > 0.0 && pr <= 1.0) {
                return Err(invalid(format!("pressure {pr} outside (0, 1]")));
            }
        }
    }
    let radius = width / 2.0;
    let pressure = |p: &StrokePoint| p.pressure.unwrap_or(1.0);
    let segments: Vec<(&StrokePoint, &StrokePoint)> = if points.len() == 1 {
        vec![(&points[0], &points[0])]
    } else {
        points.windows(2).map(|s| (&s[0], &s[1])).collect()
    };
    for (a, b) in segments {
        let x0 = (a.x.min(b.x) - radius).floor().max(0.0) as usize;
        let x1 = ((a.x.max(b.x) + radius).ceil() as usize).min(canvas.width() as usize - 1);
        let y0 = (a.y.min(b.y) - radius).floor().max(0.0) as usize;
        let y1 = ((a.y.max(b.y) + radius).ceil() as usize).min(canvas.height() as usize - 1);
        for row in y0..=y1 {
            for col in x0..=x1 {
                let (d, t) = segment_distance(col as f64 + 0.5, row as f64 + 0.5, (a.x, a.y), (b.x, b.y));
                if d <= radius {
                    let ink = pressure(a) + t * (pressure(b) - pressure(a));
                    let level = ((1.0 - ink) * 255.0).round() as f32 / 255.0;
                    if level < canvas.get(row, col) {
                        canvas.set(row, col, level);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Pixelwise minimum with a full-canvas raster.
fn merge_raster(canvas: &mut SketchImage, patch: &str) -> Result<()> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(patch.trim())
        .map_err(|e| invalid(format!("raster_patch is not base64: {e}")))?;
    let image = SketchImage::from_png_bytes(&bytes).map_err(|e| invalid(format!("raster_patch is not a PNG: {e}")))?;
    if (image.width(), image.height()) != (canvas.width(), canvas.height()) {
        return Err(invalid(format!(
            "raster_patch is {}x{}, canvas is {}x{}",
            image.width(),
            image.height(),
            canvas.width(),
            canvas.height()
        )));
    }
    for (dst, &src) in canvas.pixels_mut().iter_mut().zip(image.pixels()) {
        *dst = dst.min(src);
    }
    Ok(())
}
