//! Drawing-episode synthesis: turn one complete sketch into `T` cumulative
//! partial sketches that mimic stroke-by-stroke drawing.
//!
//! The pipeline is: optional line pre-filter, Canny edges, connected
//! segments above a pixel-count threshold, a repaint order, then incremental
//! dilated repainting masked by the original sketch.

mod canny;
mod compose;
mod prefilter;
mod segments;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use canny::{detect_edges, EdgeMap};
pub use compose::{compose_episode, partition_counts};
pub use prefilter::{extract_structural_lines, smoothing_kernel, LineFilter};
pub use segments::{order_segments, segment_edges, EdgeSegment, RepaintOrder};

use crate::error::{Error, Result};
use crate::raster::SketchImage;

/// Ordered cumulative partial sketches for one identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchEpisode {
    pub frames: Vec<SketchImage>,
    /// Segments visible through each frame (`p_i`).
    pub stroke_counts: Vec<u32>,
    /// Segments in the complete sketch (`p_n`).
    pub total_strokes: u32,
    pub source_id: String,
    pub seed: u64,
    pub strategy: RepaintOrder,
    pub dilation_radius: usize,
}

impl SketchEpisode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn final_frame(&self) -> &SketchImage {
        self.frames.last().expect("validated episodes are non-empty")
    }

    /// Check every structural invariant, naming the first violation.
    pub fn validate(&self) -> Result<()> {
        let id = &self.source_id;
        if self.frames.is_empty() {
            return Err(Error::Integrity(format!("episode {id:?} has no frames")));
        }
        if self.stroke_counts.len() != self.frames.len() {
            return Err(Error::Integrity(format!(
                "episode {id:?}: {} stroke counts for {} frames",
                self.stroke_counts.len(),
                self.frames.len()
            )));
        }
        if self.stroke_counts.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Integrity(format!("episode {id:?}: stroke counts decrease")));
        }
        if *self.stroke_counts.last().unwrap() != self.total_strokes {
            return Err(Error::Integrity(format!(
                "episode {id:?}: last stroke count {} != total {}",
                self.stroke_counts.last().unwrap(),
                self.total_strokes
            )));
        }
        for (t, pair) in self.frames.windows(2).enumerate() {
            if !pair[0].ink_subset_of(&pair[1]) {
                return Err(Error::Integrity(format!(
                    "episode {id:?}: frame {t} has ink missing from frame {}",
                    t + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub frames: usize,
    pub line_filter: LineFilter,
    pub canny_low: f64,
    pub canny_high: f64,
    pub min_segment_pixels: usize,
    pub strategy: RepaintOrder,
    pub dilation_radius: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            frames: 70,
            line_filter: LineFilter::Passthrough,
            canny_low: 0.1,
            canny_high: 0.3,
            min_segment_pixels: 10,
            strategy: RepaintOrder::SizeDesc,
            dilation_radius: 1,
        }
    }
}

/// Run the whole episode pipeline on one complete sketch.
pub fn generate_episode(
    sketch: &SketchImage,
    config: &EpisodeConfig,
    source_id: &str,
    seed: u64,
) -> Result<SketchEpisode> {
    let lines = extract_structural_lines(sketch, config.line_filter);
    let edges = detect_edges(&lines, config.canny_low, config.canny_high)?;
    let segments = segment_edges(&edges, config.min_segment_pixels);
    let ordered = order_segments(segments, config.strategy, seed);
    let mut episode = compose_episode(sketch, &ordered, config.frames, config.dilation_radius)
        .map_err(|e| match e {
            Error::DegenerateEpisode(msg) => Error::DegenerateEpisode(format!("{source_id}: {msg}")),
            other => other,
        })?;
    episode.source_id = source_id.to_string();
    episode.seed = seed;
    episode.strategy = config.strategy;
    Ok(episode)
}

/// On-disk `episode.json` manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub source_id: String,
    #[serde(rename = "T")]
    pub frames: usize,
    pub stroke_counts: Vec<u32>,
    pub total_strokes: u32,
    pub seed: u64,
    pub strategy: RepaintOrder,
    pub dilation_radius: usize,
}

pub const MANIFEST_FILE: &str = "episode.json";

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:03}.png")
}

/// Write `<dir>/frame_XXX.png` for every frame plus `<dir>/episode.json`.
pub fn write_episode(dir: &Path, episode: &SketchEpisode) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in episode.frames.iter().enumerate() {
        frame.save_png(dir.join(frame_file_name(i)))?;
    }
    let manifest = EpisodeManifest {
        source_id: episode.source_id.clone(),
        frames: episode.frames.len(),
        stroke_counts: episode.stroke_counts.clone(),
        total_strokes: episode.total_strokes,
        seed: episode.seed,
        strategy: episode.strategy,
        dilation_radius: episode.dilation_radius,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Read and validate an episode directory.
pub fn read_episode(dir: &Path) -> Result<SketchEpisode> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EpisodeManifest = serde_json::from_slice(&bytes)?;
    let frames = (0..manifest.frames)
        .map(|i| SketchImage::load_png(dir.join(frame_file_name(i))))
        .collect::<Result<Vec<_>>>()?;
    let episode = SketchEpisode {
        frames,
        stroke_counts: manifest.stroke_counts,
        total_strokes: manifest.total_strokes,
        source_id: manifest.source_id,
        seed: manifest.seed,
        strategy: manifest.strategy,
        dilation_radius: manifest.dilation_radius,
    };
    episode.validate()?;
    Ok(episode)
}
