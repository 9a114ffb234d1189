use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, Stage2Model};
use crate::data::{Corpus, FrameSelector, Split, TripletSampler};
use crate::embed::{ImageRef, NegativeMining, Stage1Model};
use crate::episode::SketchEpisode;
use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, Gradients, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Encode every frame once up front instead of once per triple.
    pub cache_features: bool,
    #[serde(default)]
    pub negatives: NegativeMining,
}

impl Default for Stage2TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            lr: 5e-4,
            seed: 0,
            cache_features: true,
            negatives: NegativeMining::Random,
        }
    }
}

/// Pooled stage-1 features of every frame of an episode.
pub fn episode_features(stage1: &Stage1Model, episode: &SketchEpisode) -> Result<FeatureSequence> {
    FeatureSequence::from_frames(stage1, &episode.frames)
}

fn photo_embeddings(stage1: &Stage1Model, corpus: &Corpus, ids: &[String]) -> Result<BTreeMap<String, Vec<f64>>> {
    ids.par_iter()
        .map(|id| {
            let photo = stage1.fit_photo(corpus.photo(id).expect("train id has a photo"));
            let v = stage1.encode_image(ImageRef::Photo(&photo))?;
            Ok((id.clone(), v.into_values()))
        })
        .collect()
}

/// Train the sequence encoder on prefixes of training episodes against the
/// frozen stage-1 photo embeddings. Returns the mean per-triple loss of every
/// epoch.
pub fn train_stage2(
    model: &mut Stage2Model,
    corpus: &Corpus,
    stage1: &Stage1Model,
    config: &Stage2TrainConfig,
) -> Result<Vec<f64>> {
    if !stage1.is_frozen() {
        return Err(Error::Contract("stage-1 must be frozen before stage-2 training".into()));
    }
    if stage1.content_hash() != model.stage1_hash() {
        return Err(Error::CheckpointMismatch(
            "stage-2 model was built for a different stage-1 checkpoint".into(),
        ));
    }
    if corpus.identities_in(Split::Train).is_empty() {
        return Err(invalid("stage-2 training needs a non-empty train split"));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    let sampler = TripletSampler::new(corpus, config.seed)?;
    let ids = sampler.train_ids().to_vec();
    let photos = photo_embeddings(stage1, corpus, &ids)?;
    let mut features: BTreeMap<String, Array2<f64>> = ids
        .par_iter()
        .map(|id| {
            let ep = corpus.episode(id).expect("train id has an episode");
            Ok((id.clone(), episode_features(stage1, ep)?.rows().to_owned()))
        })
        .collect::<Result<_>>()?;
    if model.epoch == 0 {
        model.fit_input_normalization(features.values().map(|f| f.view()))?;
    }
    if !config.cache_features {
        features.clear();
    }
    let lengths = model.config().prefix_schedule.lengths(corpus.frames_per_episode().unwrap_or(1));

    let mut opt = Adam::new(config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let triples = sampler.epoch(FrameSelector::FinalOnly, model.epoch as u64);
        let mut epoch_loss = 0.0;
        for batch in triples.chunks(config.batch_size) {
            let view: &Stage2Model = model;
            let results: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|t| {
                    let positive = &photos[&t.identity];
                    let negatives: Vec<&[f64]> = match config.negatives {
                        NegativeMining::Random => vec![&photos[&t.negative]],
                        NegativeMining::Hardest => photos
                            .iter()
                            .filter(|(id, _)| **id != t.identity)
                            .map(|(_, v)| v.as_slice())
                            .collect(),
                    };
                    let computed;
                    let rows = match features.get(&t.identity) {
                        Some(rows) => rows.view(),
                        None => {
                            let ep = corpus.episode(&t.identity).expect("train id has an episode");
                            computed = episode_features(stage1, ep)?;
                            computed.rows()
                        }
                    };
                    Ok(view.mined_gradients_rows(rows, &lengths, positive, &negatives))
                })
                .collect();
            let mut grads = Gradients::new();
            for r in results {
                let (loss, g) = r?;
                epoch_loss += loss;
                grads.accumulate(&g);
            }
            let mut params: Vec<(String, &mut Tensor)> = model.named_parameters_mut();
            let gs: Vec<&Tensor> = params
                .iter()
                .map(|(name, _)| grads.get(name).expect("gradient for every stage-2 parameter"))
                .collect();
            let mut ps: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
            opt.step(&mut ps, &gs);
        }
        model.epoch += 1;
        history.push(epoch_loss / (triples.len() * lengths.len()) as f64);
        log::debug!("stage2 epoch {} loss {:.5}", model.epoch, history.last().unwrap());
    }
    Ok(history)
}
