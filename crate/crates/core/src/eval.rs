//! Rank every frame of every evaluation episode against a photo gallery, once
//! with the single-image stage-1 embedding (B1 baseline) and once with the
//! stage-2 prefix encoder.

use rayon::prelude::*;

use crate::data::Corpus;
use crate::embed::{ImageRef, Stage1Model};
use crate::error::{invalid, Result};
use crate::metrics::RankRecord;
use crate::retrieval::{build_index, GalleryIndex};
use crate::seq::{episode_features, Stage2Model};

/// Stage-1 embeddings of the photos of `ids`.
pub fn photo_gallery(stage1: &Stage1Model, corpus: &Corpus, ids: &[String]) -> Result<GalleryIndex> {
    let photos = ids
        .iter()
        .map(|id| {
            let photo = corpus.photo(id).ok_or_else(|| invalid(format!("no photo for {id}")))?;
            Ok((id.clone(), stage1.fit_photo(photo)))
        })
        .collect::<Result<Vec<_>>>()?;
    let encoded = photos
        .into_par_iter()
        .map(|(id, p)| Ok((id, stage1.encode_image(ImageRef::Photo(&p))?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(build_index(encoded, |v| Ok(v.clone()))?.with_hashes(stage1.content_hash(), None))
}

fn record(
    corpus: &Corpus,
    ids: &[String],
    gallery: &GalleryIndex,
    ranks: Vec<Vec<u32>>,
) -> Result<RankRecord> {
    let episodes: Vec<_> = ids
        .iter()
        .map(|id| corpus.episode(id).ok_or_else(|| invalid(format!("no episode for {id}"))))
        .collect::<Result<_>>()?;
    RankRecord::per_episode(
        ids.to_vec(),
        ranks,
        gallery.len(),
        episodes.iter().map(|e| e.stroke_counts.clone()).collect(),
        episodes.iter().map(|e| e.total_strokes).collect(),
    )
}

/// B1: every partial frame encoded independently by stage 1.
pub fn baseline_ranks(stage1: &Stage1Model, corpus: &Corpus, ids: &[String], gallery: &GalleryIndex) -> Result<RankRecord> {
    let ranks = ids
        .par_iter()
        .map(|id| {
            let ep = corpus.episode(id).ok_or_else(|| invalid(format!("no episode for {id}")))?;
            ep.frames
                .iter()
                .map(|f| {
                    let q = stage1.encode_image(ImageRef::Sketch(&stage1.fit_sketch(f)))?;
                    Ok(gallery.rank_of_target(&q, id)? as u32)
                })
                .collect::<Result<Vec<u32>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    record(corpus, ids, gallery, ranks)
}

/// Stage 2: frame `i` is ranked with the encoding of frames `0..=i`.
pub fn sequence_ranks(
    stage1: &Stage1Model,
    stage2: &Stage2Model,
    corpus: &Corpus,
    ids: &[String],
    gallery: &GalleryIndex,
) -> Result<RankRecord> {
    let ranks = ids
        .par_iter()
        .map(|id| {
            let ep = corpus.episode(id).ok_or_else(|| invalid(format!("no episode for {id}")))?;
            let features = episode_features(stage1, ep)?;
            (1..=features.len())
                .map(|t| {
                    let q = stage2.encode_prefix(&features.prefix(t)?)?;
                    Ok(gallery.rank_of_target(&q, id)? as u32)
                })
                .collect::<Result<Vec<u32>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    record(corpus, ids, gallery, ranks)
}

/// Both rank records for `ids`, ranked against a gallery of the same photos.
pub struct Comparison {
    pub gallery: GalleryIndex,
    pub baseline: RankRecord,
    pub sequence: RankRecord,
}

pub fn compare(stage1: &Stage1Model, stage2: &Stage2Model, corpus: &Corpus, ids: &[String]) -> Result<Comparison> {
    let gallery = photo_gallery(stage1, corpus, ids)?;
    Ok(Comparison {
        baseline: baseline_ranks(stage1, corpus, ids, &gallery)?,
        sequence: sequence_ranks(stage1, stage2, corpus, ids, &gallery)?,
        gallery,
    })
}
