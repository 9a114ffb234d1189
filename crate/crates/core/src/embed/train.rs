use std::collections::BTreeMap;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ImageRef, Stage1Model};
use crate::data::{Corpus, FrameSelector, Split, TripletIndex, TripletSampler};
use crate::embedding::squared_distance;
use crate::error::{invalid, Result};
use crate::nn::{Adam, Gradients, Tensor};

/// How the negative photo of each triple is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMining {
    /// Uniformly random other identity.
    #[default]
    Random,
    /// The other training photo currently closest to the anchor.
    Hardest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub seed: u64,
    #[serde(default)]
    pub negatives: NegativeMining,
}

impl Default for Stage1TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            lr_backbone: 5e-4,
            lr_head: 5e-3,
            seed: 0,
            negatives: NegativeMining::Random,
        }
    }
}

fn step_group(opt: &mut Adam, params: &mut BTreeMap<String, &mut Tensor>, names: &[String], grads: &Gradients) {
    if names.is_empty() {
        return;
    }
    let mut ps: Vec<&mut Tensor> = Vec::with_capacity(names.len());
    let mut gs: Vec<&Tensor> = Vec::with_capacity(names.len());
    for name in names {
        ps.push(params.remove(name).expect("trainable parameter exists"));
        gs.push(grads.get(name).expect("gradient for trainable parameter"));
    }
    opt.step(&mut ps, &gs);
}

/// Replace each negative by the closest other photo under the current weights.
fn mine_hardest(
    model: &Stage1Model,
    batch: &[TripletIndex],
    sketches: &BTreeMap<String, Array3<f64>>,
    photos: &BTreeMap<String, Array3<f64>>,
) -> Vec<TripletIndex> {
    let gallery: Vec<(&String, Vec<f64>)> = photos
        .par_iter()
        .map(|(id, x)| (id, model.forward_traced(x).v_low.to_vec()))
        .collect();
    batch
        .par_iter()
        .map(|t| {
            let a = model.forward_traced(&sketches[&t.identity]).v_low.to_vec();
            let negative = gallery
                .iter()
                .filter(|(id, _)| **id != t.identity)
                .min_by(|x, y| squared_distance(&a, &x.1).total_cmp(&squared_distance(&a, &y.1)))
                .map_or_else(|| t.negative.clone(), |(id, _)| (*id).clone());
            TripletIndex { negative, ..t.clone() }
        })
        .collect()
}

/// Triplet training on (complete sketch, own photo, other photo). Returns the
/// mean per-triple loss of every epoch.
pub fn train_stage1(model: &mut Stage1Model, corpus: &Corpus, config: &Stage1TrainConfig) -> Result<Vec<f64>> {
    model.ensure_trainable()?;
    if corpus.identities_in(Split::Train).is_empty() {
        return Err(invalid("stage-1 training needs a non-empty train split"));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    let sampler = TripletSampler::new(corpus, config.seed)?;

    let mut sketches = BTreeMap::new();
    let mut photos = BTreeMap::new();
    for id in sampler.train_ids() {
        let ep = corpus.episode(id).expect("train id has an episode");
        let sketch = model.fit_sketch(ep.final_frame());
        sketches.insert(id.clone(), model.prepare_input(ImageRef::Sketch(&sketch))?);
        let photo = model.fit_photo(corpus.photo(id).expect("train id has a photo"));
        photos.insert(id.clone(), model.prepare_input(ImageRef::Photo(&photo))?);
    }

    let (backbone_names, head_names) = model.trainable_groups();
    let mut opt_backbone = Adam::new(config.lr_backbone);
    let mut opt_head = Adam::new(config.lr_head);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let triples = sampler.epoch(FrameSelector::FinalOnly, model.epoch as u64);
        let mut epoch_loss = 0.0;
        for batch in triples.chunks(config.batch_size) {
            let frozen_view: &Stage1Model = model;
            let mined;
            let batch = match config.negatives {
                NegativeMining::Random => batch,
                NegativeMining::Hardest => {
                    mined = mine_hardest(frozen_view, batch, &sketches, &photos);
                    &mined[..]
                }
            };
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|t| {
                    let a: &Array3<f64> = &sketches[&t.identity];
                    frozen_view.triplet_gradients_prepared(a, &photos[&t.identity], &photos[&t.negative])
                })
                .collect();
            let mut grads = Gradients::new();
            for (loss, g) in &results {
                epoch_loss += loss;
                grads.accumulate(g);
            }
            let mut params = model.parameter_map_mut();
            step_group(&mut opt_backbone, &mut params, &backbone_names, &grads);
            step_group(&mut opt_head, &mut params, &head_names, &grads);
        }
        model.epoch += 1;
        history.push(epoch_loss / triples.len() as f64);
        log::debug!("stage1 epoch {} loss {:.5}", model.epoch, history.last().unwrap());
    }
    Ok(history)
}
