use std::cmp::Ordering;
use std::collections::VecDeque;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::canny::EdgeMap;
use crate::error::{invalid, Error};

/// One 8-connected run of edge pixels, stored in raster-scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSegment {
    pixels: Vec<(u32, u32)>,
}

impl EdgeSegment {
    /// Build a segment from `(row, col)` coordinates. Connectivity is the
    /// caller's responsibility; coordinates are sorted and deduplicated.
    pub fn from_pixels(mut pixels: Vec<(u32, u32)>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Self { pixels }
    }

    pub fn pixels(&self) -> &[(u32, u32)] {
        &self.pixels
    }

    pub fn pixel_count(&self) -> usize {
        self.pixels.len()
    }

    /// Topmost, then leftmost pixel.
    pub fn first_pixel(&self) -> (u32, u32) {
        self.pixels[0]
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let (sr, sc) = self
            .pixels
            .iter()
            .fold((0.0, 0.0), |(r, c), &(pr, pc)| (r + pr as f64, c + pc as f64));
        (sr / n, sc / n)
    }
}

/// Label 8-connected components and keep those with at least `min_pixels` pixels.
pub fn segment_edges(edges: &EdgeMap, min_pixels: usize) -> Vec<EdgeSegment> {
    let (w, h) = (edges.width(), edges.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || !edges.get(start / w, start % w) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut component = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (row, col) = (i / w, i % w);
            component.push((row as u32, col as u32));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (r, c) = (row as i64 + dr, col as i64 + dc);
                    if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                        continue;
                    }
                    let j = r as usize * w + c as usize;
                    if !seen[j] && edges.get(r as usize, c as usize) {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if component.len() >= min_pixels.max(1) {
            out.push(EdgeSegment::from_pixels(component));
        }
    }
    out
}

/// Repaint order for segments within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepaintOrder {
    #[default]
    SizeDesc,
    TopToBottom,
    SeededShuffle,
}

impl RepaintOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            RepaintOrder::SizeDesc => "size_desc",
            RepaintOrder::TopToBottom => "top_to_bottom",
            RepaintOrder::SeededShuffle => "seeded_shuffle",
        }
    }
}

impl FromStr for RepaintOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "size_desc" => Ok(RepaintOrder::SizeDesc),
            "top_to_bottom" => Ok(RepaintOrder::TopToBottom),
            "seeded_shuffle" => Ok(RepaintOrder::SeededShuffle),
            other => Err(invalid(format!("unknown repaint strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for RepaintOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn order_segments(
    mut segments: Vec<EdgeSegment>,
    strategy: RepaintOrder,
    seed: u64,
) -> Vec<EdgeSegment> {
    match strategy {
        RepaintOrder::SizeDesc => segments.sort_by(|a, b| {
            b.pixel_count()
                .cmp(&a.pixel_count())
                .then_with(|| a.first_pixel().cmp(&b.first_pixel()))
        }),
        RepaintOrder::TopToBottom => segments.sort_by(|a, b| {
            let (ar, ac) = a.centroid();
            let (br, bc) = b.centroid();
            ar.partial_cmp(&br)
                .unwrap_or(Ordering::Equal)
                .then(ac.partial_cmp(&bc).unwrap_or(Ordering::Equal))
                .then_with(|| a.first_pixel().cmp(&b.first_pixel()))
        }),
        RepaintOrder::SeededShuffle => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            segments.shuffle(&mut rng);
        }
    }
    segments
}
