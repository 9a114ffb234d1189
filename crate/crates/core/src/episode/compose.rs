use super::segments::{EdgeSegment, RepaintOrder};
use super::SketchEpisode;
use crate::error::{invalid, Error, Result};
use crate::raster::SketchImage;

/// Number of segments visible through each of the `frames` frames.
///
/// With at least as many segments as frames, boundaries sit at
/// `ceil(k * n / frames)`. With fewer, each frame adds one segment and the
/// trailing frames repeat the full composite.
pub fn partition_counts(n_segments: usize, frames: usize) -> Vec<usize> {
    (1..=frames)
        .map(|k| {
            if n_segments >= frames {
                (k * n_segments).div_ceil(frames)
            } else {
                k.min(n_segments)
            }
        })
        .collect()
}

/// Stamp a Chebyshev ball of `radius` around every pixel of `segment` into `mask`.
pub(crate) fn stamp_dilated(mask: &mut [bool], width: usize, height: usize, segment: &EdgeSegment, radius: usize) {
    let r = radius as i64;
    for &(row, col) in segment.pixels() {
        let r0 = (row as i64 - r).max(0) as usize;
        let r1 = (row as i64 + r).min(height as i64 - 1) as usize;
        let c0 = (col as i64 - r).max(0) as usize;
        let c1 = (col as i64 + r).min(width as i64 - 1) as usize;
        for rr in r0..=r1 {
            mask[rr * width + c0..=rr * width + c1].fill(true);
        }
    }
}

/// Keep the sketch's own pixel values inside the mask; everything else is blank paper.
pub(crate) fn composite(sketch: &SketchImage, mask: &[bool]) -> SketchImage {
    let pixels = sketch
        .pixels()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { 1.0 })
        .collect();
    SketchImage::new(sketch.width(), sketch.height(), pixels).expect("same shape as sketch")
}

/// Incrementally repaint `ordered` segments into `frames` cumulative partial sketches.
pub fn compose_episode(
    sketch: &SketchImage,
    ordered: &[EdgeSegment],
    frames: usize,
    dilation_radius: usize,
) -> Result<SketchEpisode> {
    if frames == 0 {
        return Err(invalid("episode needs at least one frame"));
    }
    if ordered.is_empty() {
        return Err(Error::DegenerateEpisode(
            "no edge segments survived thresholding".into(),
        ));
    }
    let (w, h) = (sketch.width() as usize, sketch.height() as usize);
    if let Some(&(r, c)) = ordered
        .iter()
        .flat_map(|s| s.pixels())
        .find(|&&(r, c)| r as usize >= h || c as usize >= w)
    {
        return Err(invalid(format!("segment pixel ({r}, {c}) outside {w}x{h} sketch")));
    }

    let counts = partition_counts(ordered.len(), frames);
    let mut mask = vec![false; w * h];
    let mut painted = 0;
    let mut out = Vec::with_capacity(frames);
    for &count in &counts {
        for seg in &ordered[painted..count] {
            stamp_dilated(&mut mask, w, h, seg, dilation_radius);
        }
        painted = count;
        out.push(composite(sketch, &mask));
    }
    Ok(SketchEpisode {
        frames: out,
        stroke_counts: counts.iter().map(|&c| c as u32).collect(),
        total_strokes: ordered.len() as u32,
        source_id: String::new(),
        seed: 0,
        strategy: RepaintOrder::default(),
        dilation_radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(row: u32, cols: std::ops::Range<u32>) -> EdgeSegment {
        EdgeSegment::from_pixels(cols.map(|c| (row, c)).collect())
    }

    #[test]
    fn partition_matches_frame_count() {
        assert_eq!(partition_counts(70, 70), (1..=70).collect::<Vec<_>>());
        assert_eq!(partition_counts(1, 3), vec![1, 1, 1]);
        assert_eq!(partition_counts(3, 5), vec![1, 2, 3, 3, 3]);
        assert_eq!(partition_counts(10, 4), vec![3, 5, 8, 10]);
    }

    #[test]
    fn seventy_segments_one_per_frame() {
        let sketch = SketchImage::new(80, 80, vec![0.2; 6400]).unwrap();
        let segs: Vec<_> = (0..70).map(|i| seg(i, 0..3)).collect();
        let ep = compose_episode(&sketch, &segs, 70, 0).unwrap();
        assert_eq!(ep.stroke_counts, (1..=70).collect::<Vec<u32>>());
        assert_eq!(ep.total_strokes, 70);
    }

    #[test]
    fn single_segment_repeats() {
        let sketch = SketchImage::new(8, 8, vec![0.0; 64]).unwrap();
        let ep = compose_episode(&sketch, &[seg(3, 1..5)], 3, 1).unwrap();
        assert_eq!(ep.stroke_counts, vec![1, 1, 1]);
        assert_eq!(ep.frames[0], ep.frames[1]);
        assert_eq!(ep.frames[1], ep.frames[2]);
        // rows 2..=4, cols 0..=5 inked
        assert_eq!(ep.frames[0].inked_count(), 3 * 6);
    }

    #[test]
    fn empty_segments_is_degenerate() {
        let sketch = SketchImage::blank(4, 4);
        assert!(matches!(
            compose_episode(&sketch, &[], 3, 1),
            Err(Error::DegenerateEpisode(_))
        ));
        assert!(compose_episode(&sketch, &[seg(0, 0..2)], 0, 1).is_err());
    }

    #[test]
    fn white_sketch_regions_stay_blank() {
        let mut px = vec![1.0f32; 25];
        px[12] = 0.3;
        let sketch = SketchImage::new(5, 5, px).unwrap();
        let ep = compose_episode(&sketch, &[seg(2, 2..3)], 1, 2).unwrap();
        assert_eq!(ep.frames[0], sketch);
    }
}
