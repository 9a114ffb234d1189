//! Photo/episode corpora: validation, disk layout, splits, toy synthesis and
//! triplet sampling.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::{generate_episode, read_episode, write_episode, EpisodeConfig, SketchEpisode};
use crate::error::{invalid, Error, Result};
use crate::raster::{PhotoImage, SketchImage};
use crate::toy::toy_face;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Validated photo/episode collection. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    photos: BTreeMap<String, PhotoImage>,
    episodes: BTreeMap<String, SketchEpisode>,
    split: BTreeMap<String, Split>,
}

impl Corpus {
    pub fn new(
        photos: BTreeMap<String, PhotoImage>,
        episodes: BTreeMap<String, SketchEpisode>,
        split: BTreeMap<String, Split>,
    ) -> Result<Self> {
        for id in episodes.keys() {
            if !photos.contains_key(id) {
                return Err(Error::Integrity(format!("episode {id:?} has no photo")));
            }
            if !split.contains_key(id) {
                return Err(Error::Integrity(format!("identity {id:?} has no split assignment")));
            }
        }
        if let Some(id) = photos.keys().find(|id| !episodes.contains_key(*id)) {
            return Err(Error::Integrity(format!("photo {id:?} has no episode")));
        }
        if let Some(id) = split.keys().find(|id| !episodes.contains_key(*id)) {
            return Err(Error::Integrity(format!("split names unknown identity {id:?}")));
        }
        let mut frame_count = None;
        for (id, ep) in &episodes {
            ep.validate()?;
            match frame_count {
                None => frame_count = Some(ep.len()),
                Some(t) if t != ep.len() => {
                    return Err(Error::Integrity(format!(
                        "episode {id:?} has {} frames, others have {t}",
                        ep.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            photos,
            episodes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Frames per episode, `None` for an empty corpus.
    pub fn frames_per_episode(&self) -> Option<usize> {
        self.episodes.values().next().map(SketchEpisode::len)
    }

    pub fn total_frames(&self) -> usize {
        self.episodes.values().map(SketchEpisode::len).sum()
    }

    pub fn identities(&self) -> impl Iterator<Item = &str> {
        self.episodes.keys().map(String::as_str)
    }

    pub fn identities_in(&self, split: Split) -> Vec<&str> {
        self.split
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn photo(&self, id: &str) -> Option<&PhotoImage> {
        self.photos.get(id)
    }

    pub fn episode(&self, id: &str) -> Option<&SketchEpisode> {
        self.episodes.get(id)
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.split.get(id).copied()
    }

    pub fn photos(&self) -> &BTreeMap<String, PhotoImage> {
        &self.photos
    }

    pub fn episodes(&self) -> &BTreeMap<String, SketchEpisode> {
        &self.episodes
    }

    pub fn split(&self) -> &BTreeMap<String, Split> {
        &self.split
    }

    /// Resize every photo and frame to a square `size`.
    pub fn resized(&self, size: u32) -> Corpus {
        let photos = self
            .photos
            .iter()
            .map(|(id, p)| (id.clone(), p.resized(size, size)))
            .collect();
        let episodes = self
            .episodes
            .iter()
            .map(|(id, ep)| {
                let mut ep = ep.clone();
                ep.frames = ep.frames.iter().map(|f| f.resized(size, size)).collect();
                (id.clone(), ep)
            })
            .collect();
        Corpus {
            photos,
            episodes,
            split: self.split.clone(),
        }
    }
}

/// Seeded split with exactly `train_count` training identities.
pub fn split_corpus(corpus: &Corpus, train_count: usize, seed: u64) -> Result<Corpus> {
    if train_count > corpus.len() {
        return Err(invalid(format!(
            "train_count {train_count} exceeds {} identities",
            corpus.len()
        )));
    }
    let mut ids: Vec<&String> = corpus.episodes.keys().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let split = ids
        .iter()
        .enumerate()
        .map(|(i, id)| ((*id).clone(), if i < train_count { Split::Train } else { Split::Test }))
        .collect();
    Ok(Corpus {
        photos: corpus.photos.clone(),
        episodes: corpus.episodes.clone(),
        split,
    })
}

/// Episode settings used for toy corpora of side `image_size`.
pub fn toy_episode_config(image_size: u32, frames: usize) -> EpisodeConfig {
    EpisodeConfig {
        frames,
        min_segment_pixels: (image_size as usize / 16).max(3),
        dilation_radius: 1,
        ..EpisodeConfig::default()
    }
}

pub fn toy_identity(index: usize) -> String {
    format!("id{index:04}")
}

/// Paired photos and complete sketches, before episode generation.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    pub photos: BTreeMap<String, PhotoImage>,
    pub sketches: BTreeMap<String, SketchImage>,
    pub split: BTreeMap<String, Split>,
}

/// Procedural photo/sketch pairs; every identity is assigned to train.
pub fn make_toy_sources(n_identities: usize, image_size: u32, seed: u64) -> Result<SourceSet> {
    if n_identities < 2 {
        return Err(invalid("a toy corpus needs at least 2 identities to form triplets"));
    }
    if image_size < 16 {
        return Err(invalid(format!("toy image size {image_size} is below 16")));
    }
    let mut set = SourceSet {
        photos: BTreeMap::new(),
        sketches: BTreeMap::new(),
        split: BTreeMap::new(),
    };
    for i in 0..n_identities {
        let id = toy_identity(i);
        let face = toy_face(seed, i);
        set.sketches.insert(id.clone(), face.render_sketch(image_size));
        set.photos.insert(id.clone(), face.render_photo(image_size));
        set.split.insert(id, Split::Train);
    }
    Ok(set)
}

/// Turn every sketch into an episode. The `i`-th identity in id order uses
/// episode seed `seed + i`.
pub fn generate_corpus(sources: &SourceSet, config: &EpisodeConfig, seed: u64) -> Result<Corpus> {
    let ids: Vec<&String> = sources.sketches.keys().collect();
    let episodes = ids
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let ep = generate_episode(&sources.sketches[*id], config, id, seed.wrapping_add(i as u64))?;
            Ok(((*id).clone(), ep))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Corpus::new(sources.photos.clone(), episodes, sources.split.clone())
}

/// Procedurally generated corpus; every identity is assigned to train.
pub fn make_toy_corpus(n_identities: usize, image_size: u32, frames: usize, seed: u64) -> Result<Corpus> {
    let sources = make_toy_sources(n_identities, image_size, seed)?;
    generate_corpus(&sources, &toy_episode_config(image_size, frames), seed)
}

pub const PHOTOS_DIR: &str = "photos";
pub const EPISODES_DIR: &str = "episodes";
pub const SPLIT_FILE: &str = "split.json";
pub const SKETCHES_DIR: &str = "sketches";

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Every `photos/<id>.png` under `root`.
pub fn load_photos(root: &Path) -> Result<BTreeMap<String, PhotoImage>> {
    let dir = root.join(PHOTOS_DIR);
    png_ids(&dir)?
        .into_iter()
        .map(|id| {
            let photo = PhotoImage::load_png(dir.join(format!("{id}.png")))?;
            Ok((id, photo))
        })
        .collect()
}

/// Write `photos/`, `sketches/` and `split.json`.
pub fn write_sources(root: &Path, sources: &SourceSet) -> Result<()> {
    let photos = root.join(PHOTOS_DIR);
    let sketches = root.join(SKETCHES_DIR);
    std::fs::create_dir_all(&photos).map_err(|e| Error::io(&photos, e))?;
    std::fs::create_dir_all(&sketches).map_err(|e| Error::io(&sketches, e))?;
    for (id, photo) in &sources.photos {
        photo.save_png(photos.join(format!("{id}.png")))?;
    }
    for (id, sketch) in &sources.sketches {
        sketch.save_png(sketches.join(format!("{id}.png")))?;
    }
    let path = root.join(SPLIT_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&sources.split)?).map_err(|e| Error::io(&path, e))
}

/// Load paired photos and sketches; every sketch needs a photo of the same id.
pub fn load_sources(root: &Path) -> Result<SourceSet> {
    let photos = load_photos(root)?;
    let dir = root.join(SKETCHES_DIR);
    let mut sketches = BTreeMap::new();
    for id in png_ids(&dir)? {
        if !photos.contains_key(&id) {
            return Err(Error::Integrity(format!("sketch {id:?} has no matching photo")));
        }
        sketches.insert(id.clone(), SketchImage::load_png(dir.join(format!("{id}.png")))?);
    }
    if sketches.len() != photos.len() {
        return Err(Error::Integrity(format!(
            "{} photos but {} sketches under {}",
            photos.len(),
            sketches.len(),
            root.display()
        )));
    }
    let split_path = root.join(SPLIT_FILE);
    let split = if split_path.exists() {
        let bytes = std::fs::read(&split_path).map_err(|e| Error::io(&split_path, e))?;
        serde_json::from_slice(&bytes)?
    } else {
        sketches.keys().map(|id| (id.clone(), Split::Train)).collect()
    };
    Ok(SourceSet { photos, sketches, split })
}

/// Write `photos/<id>.png`, `episodes/<id>/...` and `split.json` under `root`.
pub fn write_corpus(root: &Path, corpus: &Corpus) -> Result<()> {
    let photos = root.join(PHOTOS_DIR);
    let episodes = root.join(EPISODES_DIR);
    std::fs::create_dir_all(&photos).map_err(|e| Error::io(&photos, e))?;
    std::fs::create_dir_all(&episodes).map_err(|e| Error::io(&episodes, e))?;
    for (id, photo) in &corpus.photos {
        photo.save_png(photos.join(format!("{id}.png")))?;
    }
    for (id, ep) in &corpus.episodes {
        write_episode(&episodes.join(id), ep)?;
    }
    let path = root.join(SPLIT_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&corpus.split)?).map_err(|e| Error::io(&path, e))
}

/// Load and validate a corpus. Without `split.json` every identity is train.
pub fn load_corpus(root: &Path, expected_frames: usize) -> Result<Corpus> {
    let episodes_dir = root.join(EPISODES_DIR);
    let photos_dir = root.join(PHOTOS_DIR);
    let mut ids = Vec::new();
    if episodes_dir.exists() {
        for entry in std::fs::read_dir(&episodes_dir).map_err(|e| Error::io(&episodes_dir, e))? {
            let entry = entry.map_err(|e| Error::io(&episodes_dir, e))?;
            if entry.path().is_dir() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
    } else {
        return Err(Error::Integrity(format!("{} is missing", episodes_dir.display())));
    }
    ids.sort();

    let mut photos = BTreeMap::new();
    let mut episodes = BTreeMap::new();
    for id in &ids {
        let episode = read_episode(&episodes_dir.join(id))?;
        if episode.source_id != *id {
            return Err(Error::Integrity(format!(
                "episode directory {id:?} holds source_id {:?}",
                episode.source_id
            )));
        }
        if episode.len() != expected_frames {
            return Err(Error::Integrity(format!(
                "episode {id:?} has {} frames, expected {expected_frames}",
                episode.len()
            )));
        }
        let photo_path = photos_dir.join(format!("{id}.png"));
        if !photo_path.exists() {
            return Err(Error::Integrity(format!("identity {id:?} has no photo at {}", photo_path.display())));
        }
        photos.insert(id.clone(), PhotoImage::load_png(&photo_path)?);
        episodes.insert(id.clone(), episode);
    }

    let split_path = root.join(SPLIT_FILE);
    let split: BTreeMap<String, Split> = if split_path.exists() {
        let bytes = std::fs::read(&split_path).map_err(|e| Error::io(&split_path, e))?;
        let mut all: BTreeMap<String, Split> = serde_json::from_slice(&bytes)?;
        all.retain(|id, _| episodes.contains_key(id));
        all
    } else {
        ids.iter().map(|id| (id.clone(), Split::Train)).collect()
    };
    Corpus::new(photos, episodes, split)
}

/// Which frame of an episode serves as the anchor sketch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSelector {
    /// The complete sketch only.
    FinalOnly,
    /// Any frame, uniformly.
    AllFrames,
}

/// Indices of one (anchor sketch, positive photo, negative photo) triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletIndex {
    pub identity: String,
    pub frame: usize,
    pub negative: String,
}

#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchors: Vec<SketchImage>,
    pub positives: Vec<PhotoImage>,
    pub negatives: Vec<PhotoImage>,
    pub indices: Vec<TripletIndex>,
}

impl TripletBatch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// Deterministic triplet source: every draw depends only on `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    seed: u64,
    train_ids: Vec<String>,
    frames: usize,
}

impl TripletSampler {
    pub fn new(corpus: &Corpus, seed: u64) -> Result<Self> {
        let train_ids: Vec<String> = corpus
            .identities_in(Split::Train)
            .into_iter()
            .map(str::to_string)
            .collect();
        if train_ids.len() < 2 {
            return Err(invalid(format!(
                "triplet sampling needs at least 2 train identities, found {}",
                train_ids.len()
            )));
        }
        Ok(Self {
            seed,
            train_ids,
            frames: corpus.frames_per_episode().unwrap_or(1),
        })
    }

    pub fn train_ids(&self) -> &[String] {
        &self.train_ids
    }

    fn rng(&self, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        rng
    }

    fn triple(&self, rng: &mut ChaCha8Rng, identity: &str, selector: FrameSelector) -> TripletIndex {
        let frame = match selector {
            FrameSelector::FinalOnly => self.frames - 1,
            FrameSelector::AllFrames => rng.random_range(0..self.frames),
        };
        let negative = loop {
            let cand = self.train_ids.choose(rng).expect("non-empty");
            if cand != identity {
                break cand.clone();
            }
        };
        TripletIndex {
            identity: identity.to_string(),
            frame,
            negative,
        }
    }

    /// `batch_size` triples with anchors drawn uniformly with replacement.
    pub fn sample(&self, selector: FrameSelector, batch_size: usize, epoch: u64) -> Vec<TripletIndex> {
        let mut rng = self.rng(epoch);
        (0..batch_size)
            .map(|_| {
                let id = self.train_ids.choose(&mut rng).expect("non-empty").clone();
                self.triple(&mut rng, &id, selector)
            })
            .collect()
    }

    /// One pass: every train identity once, in a seeded order, each with a random negative.
    pub fn epoch(&self, selector: FrameSelector, epoch: u64) -> Vec<TripletIndex> {
        let mut rng = self.rng(epoch);
        let mut order = self.train_ids.clone();
        order.shuffle(&mut rng);
        order.iter().map(|id| self.triple(&mut rng, id, selector)).collect()
    }
}

pub fn materialize(corpus: &Corpus, indices: Vec<TripletIndex>) -> TripletBatch {
    let anchors = indices
        .iter()
        .map(|t| corpus.episodes[&t.identity].frames[t.frame].clone())
        .collect();
    let positives = indices.iter().map(|t| corpus.photos[&t.identity].clone()).collect();
    let negatives = indices.iter().map(|t| corpus.photos[&t.negative].clone()).collect();
    TripletBatch {
        anchors,
        positives,
        negatives,
        indices,
    }
}

/// Draw one batch of `batch_size` triples from the train split.
pub fn sample_triplets(
    corpus: &Corpus,
    selector: FrameSelector,
    batch_size: usize,
    seed: u64,
) -> Result<TripletBatch> {
    let sampler = TripletSampler::new(corpus, seed)?;
    Ok(materialize(corpus, sampler.sample(selector, batch_size, 0)))
}
