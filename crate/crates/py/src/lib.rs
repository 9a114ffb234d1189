//! Python bindings: corpora, both training stages, gallery search and metrics.
//!
//! Images cross the boundary as flat row-major `float` lists in `[0, 1]`
//! (RGB interleaved for photos), so the module needs nothing beyond the
//! standard library on the Python side.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyKeyError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use sketchless::data::Split;
use sketchless::embedding::{EmbeddingKind, EmbeddingVector};
use sketchless::embed::ImageRef;
use sketchless::metrics::{weighted_metrics, MetricReport, RankRecord};
use sketchless::raster::{PhotoImage, SketchImage};
use sketchless::seq::FeatureSequence;
use sketchless::Error;

create_exception!(sketchless_py, SketchlessError, PyException, "Integrity, contract or checkpoint failure.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        Error::NotFound(_) => PyKeyError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => SketchlessError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for sketchless::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Grayscale sketch raster; 1.0 is white paper, 0.0 is full ink.
#[pyclass(frozen, from_py_object, module = "sketchless_py")]
#[derive(Clone)]
struct Sketch(SketchImage);

#[pymethods]
impl Sketch {
    #[new]
    fn new(width: u32, height: u32, pixels: Vec<f32>) -> PyResult<Self> {
        SketchImage::new(width, height, pixels).map(Self).py_err()
    }

    #[staticmethod]
    fn blank(width: u32, height: u32) -> Self {
        Self(SketchImage::blank(width, height))
    }

    #[staticmethod]
    fn load_png(path: PathBuf) -> PyResult<Self> {
        SketchImage::load_png(path).map(Self).py_err()
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        self.0.save_png(path).py_err()
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height()
    }

    fn pixels(&self) -> Vec<f32> {
        self.0.pixels().to_vec()
    }

    fn inked_count(&self) -> usize {
        self.0.inked_count()
    }

    fn __repr__(&self) -> String {
        format!("Sketch({}x{}, {} inked)", self.0.width(), self.0.height(), self.0.inked_count())
    }
}

/// RGB photo raster, channels interleaved.
#[pyclass(frozen, skip_from_py_object, module = "sketchless_py")]
#[derive(Clone)]
struct Photo(PhotoImage);

#[pymethods]
impl Photo {
    #[new]
    fn new(width: u32, height: u32, pixels: Vec<f32>) -> PyResult<Self> {
        PhotoImage::new(width, height, pixels).map(Self).py_err()
    }

    #[staticmethod]
    fn load_png(path: PathBuf) -> PyResult<Self> {
        PhotoImage::load_png(path).map(Self).py_err()
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height()
    }

    fn pixels(&self) -> Vec<f32> {
        self.0.pixels().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Photo({}x{})", self.0.width(), self.0.height())
    }
}

/// Cumulative partial sketches of one identity.
#[pyclass(frozen, module = "sketchless_py")]
struct Episode(sketchless::episode::SketchEpisode);

#[pymethods]
impl Episode {
    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn frame(&self, index: usize) -> PyResult<Sketch> {
        self.0
            .frames
            .get(index)
            .cloned()
            .map(Sketch)
            .ok_or_else(|| PyValueError::new_err(format!("frame {index} out of range for {} frames", self.0.len())))
    }

    #[getter]
    fn source_id(&self) -> String {
        self.0.source_id.clone()
    }

    #[getter]
    fn stroke_counts(&self) -> Vec<u32> {
        self.0.stroke_counts.clone()
    }

    #[getter]
    fn total_strokes(&self) -> u32 {
        self.0.total_strokes
    }
}

/// Photos, episodes and the train/test split.
#[pyclass(frozen, module = "sketchless_py")]
struct Corpus(sketchless::data::Corpus);

#[pymethods]
impl Corpus {
    /// Procedural toy corpus; every identity is in the train split.
    #[staticmethod]
    #[pyo3(signature = (n, size=64, frames=10, seed=0))]
    fn toy(py: Python<'_>, n: usize, size: u32, frames: usize, seed: u64) -> PyResult<Self> {
        py.detach(|| sketchless::data::make_toy_corpus(n, size, frames, seed)).map(Self).py_err()
    }

    #[staticmethod]
    fn load(path: PathBuf, frames: usize) -> PyResult<Self> {
        sketchless::data::load_corpus(&path, frames).map(Self).py_err()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        sketchless::data::write_corpus(&path, &self.0).py_err()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Identity ids, optionally restricted to `"train"` or `"test"`.
    #[pyo3(signature = (split=None))]
    fn ids(&self, split: Option<&str>) -> PyResult<Vec<String>> {
        Ok(match split {
            None => self.0.identities().map(String::from).collect(),
            Some(s) => self.0.identities_in(s.parse::<Split>().py_err()?).into_iter().map(String::from).collect(),
        })
    }

    fn photo(&self, id: &str) -> PyResult<Photo> {
        self.0.photo(id).cloned().map(Photo).ok_or_else(|| PyKeyError::new_err(id.to_string()))
    }

    fn episode(&self, id: &str) -> PyResult<Episode> {
        self.0.episode(id).cloned().map(Episode).ok_or_else(|| PyKeyError::new_err(id.to_string()))
    }
}

/// Every tunable of a training run.
#[pyclass(skip_from_py_object, module = "sketchless_py")]
struct RunConfig(sketchless::config::RunConfig);

#[pymethods]
impl RunConfig {
    /// Full-size defaults.
    #[new]
    fn new() -> Self {
        Self(sketchless::config::RunConfig::default())
    }

    /// Small preset that trains in seconds on the toy corpus.
    #[staticmethod]
    fn toy() -> Self {
        Self(sketchless::config::RunConfig::toy())
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        sketchless::config::RunConfig::load(&path).map(Self).py_err()
    }

    /// Set a field by dotted name; the value is parsed as JSON when possible.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).py_err()
    }

    fn to_toml(&self) -> String {
        self.0.to_toml()
    }

    fn content_hash(&self) -> String {
        self.0.content_hash()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(hash={})", &self.0.content_hash()[..12])
    }
}

/// Single-image embedding network shared by sketches and photos.
#[pyclass(module = "sketchless_py")]
struct Stage1Model(sketchless::embed::Stage1Model);

#[pymethods]
impl Stage1Model {
    #[new]
    fn new(config: &RunConfig) -> PyResult<Self> {
        sketchless::embed::Stage1Model::new(config.0.stage1_config(), config.0.seed).map(Self).py_err()
    }

    /// Triplet training; returns the mean loss of each epoch.
    fn train(&mut self, py: Python<'_>, corpus: &Corpus, config: &RunConfig) -> PyResult<Vec<f64>> {
        let cfg = config.0.stage1_train();
        py.detach(|| sketchless::embed::train_stage1(&mut self.0, &corpus.0, &cfg)).py_err()
    }

    fn freeze(&mut self) {
        self.0.freeze();
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.0.is_frozen()
    }

    #[getter]
    fn d_low(&self) -> usize {
        self.0.d_low()
    }

    fn content_hash(&self) -> String {
        self.0.content_hash()
    }

    fn save(&self, path: PathBuf) -> PyResult<String> {
        sketchless::checkpoint::save_stage1(&path, &self.0).py_err()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        sketchless::checkpoint::load_stage1(&path, None).map(Self).py_err()
    }

    fn encode_sketch(&self, sketch: &Sketch) -> PyResult<Vec<f64>> {
        let fitted = self.0.fit_sketch(&sketch.0);
        self.0.encode_image(ImageRef::Sketch(&fitted)).map(EmbeddingVector::into_values).py_err()
    }

    fn encode_photo(&self, photo: &Photo) -> PyResult<Vec<f64>> {
        let fitted = self.0.fit_photo(&photo.0);
        self.0.encode_image(ImageRef::Photo(&fitted)).map(EmbeddingVector::into_values).py_err()
    }

    /// Spatial attention over the backbone grid for a sketch, summing to one.
    fn attention(&self, sketch: &Sketch) -> PyResult<Vec<f64>> {
        let fitted = self.0.fit_sketch(&sketch.0);
        let features = self.0.backbone_forward(ImageRef::Sketch(&fitted)).py_err()?;
        self.0.attention_map(&features).py_err()
    }
}

/// Sequence encoder over prefixes of an episode.
#[pyclass(module = "sketchless_py")]
struct Stage2Model(sketchless::seq::Stage2Model);

#[pymethods]
impl Stage2Model {
    #[new]
    fn new(stage1: &Stage1Model, config: &RunConfig) -> PyResult<Self> {
        sketchless::seq::Stage2Model::new(&stage1.0, config.0.stage2_config(), config.0.seed).map(Self).py_err()
    }

    /// Train against a frozen stage-1 model; returns the mean loss of each epoch.
    fn train(&mut self, py: Python<'_>, corpus: &Corpus, stage1: &Stage1Model, config: &RunConfig) -> PyResult<Vec<f64>> {
        let cfg = config.0.stage2_train();
        py.detach(|| sketchless::seq::train_stage2(&mut self.0, &corpus.0, &stage1.0, &cfg)).py_err()
    }

    #[getter]
    fn d_low(&self) -> usize {
        self.0.d_low()
    }

    fn content_hash(&self) -> String {
        self.0.content_hash()
    }

    fn save(&self, path: PathBuf) -> PyResult<String> {
        sketchless::checkpoint::save_stage2(&path, &self.0).py_err()
    }

    #[staticmethod]
    fn load(path: PathBuf, stage1: &Stage1Model) -> PyResult<Self> {
        sketchless::checkpoint::load_stage2(&path, &stage1.0).map(Self).py_err()
    }

    /// Embed the ordered partial sketches drawn so far.
    fn encode_frames(&self, py: Python<'_>, stage1: &Stage1Model, frames: Vec<Sketch>) -> PyResult<Vec<f64>> {
        let frames: Vec<SketchImage> = frames.into_iter().map(|s| s.0).collect();
        py.detach(|| {
            let seq = FeatureSequence::from_frames(&stage1.0, &frames)?;
            self.0.encode_prefix(&seq).map(EmbeddingVector::into_values)
        })
        .py_err()
    }
}

/// Exact nearest-neighbour search over photo embeddings.
#[pyclass(frozen, module = "sketchless_py")]
struct Gallery(sketchless::retrieval::GalleryIndex);

#[pymethods]
impl Gallery {
    /// Embed the photos of `ids` (every identity by default) with `stage1`.
    #[staticmethod]
    #[pyo3(signature = (stage1, corpus, ids=None))]
    fn build(py: Python<'_>, stage1: &Stage1Model, corpus: &Corpus, ids: Option<Vec<String>>) -> PyResult<Self> {
        let ids = ids.unwrap_or_else(|| corpus.0.identities().map(String::from).collect());
        py.detach(|| sketchless::eval::photo_gallery(&stage1.0, &corpus.0, &ids)).map(Self).py_err()
    }

    /// Build from raw `(id, vector)` pairs.
    #[staticmethod]
    fn from_vectors(entries: Vec<(String, Vec<f64>)>) -> PyResult<Self> {
        let entries = entries
            .into_iter()
            .map(|(id, v)| Ok((id, EmbeddingVector::new(v, EmbeddingKind::Low)?)))
            .collect::<sketchless::Result<Vec<_>>>()
            .py_err()?;
        sketchless::retrieval::GalleryIndex::new(entries).map(Self).py_err()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        sketchless::retrieval::GalleryIndex::load(&path).map(Self).py_err()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py_err()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// `[(photo_id, distance, rank), ...]` for the `k` closest photos.
    fn query(&self, vector: Vec<f64>, k: usize) -> PyResult<Vec<(String, f64, usize)>> {
        let q = EmbeddingVector::new(vector, EmbeddingKind::Low).py_err()?;
        let result = self.0.query_topk(&q, k).py_err()?;
        Ok(result.ranked.into_iter().map(|r| (r.photo_id, r.distance, r.rank)).collect())
    }

    /// 1-based rank of `target_id` for `vector`.
    fn rank_of(&self, vector: Vec<f64>, target_id: &str) -> PyResult<usize> {
        let q = EmbeddingVector::new(vector, EmbeddingKind::Low).py_err()?;
        self.0.rank_of_target(&q, target_id).py_err()
    }
}

fn report_dict<'py>(py: Python<'py>, report: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("m_at_A", report.m_at_a)?;
    d.set_item("m_at_B", report.m_at_b)?;
    d.set_item("w_at_mA", report.w_at_ma)?;
    d.set_item("w_at_mB", report.w_at_mb)?;
    d.set_item("photos", report.photos)?;
    d.set_item("frames", report.frames)?;
    d.set_item("gallery_size", report.gallery_size)?;
    let curve: Vec<(usize, f64, f64, f64)> = report
        .curve
        .iter()
        .map(|c| (c.frame_index, c.sketch_fraction, c.mean_percentile, c.mean_reciprocal_rank))
        .collect();
    d.set_item("curve", curve)?;
    Ok(d)
}

/// Rank every frame of `ids` with the sequence model and with the
/// single-image baseline. Returns `{"ours": {...}, "b1": {...}}`.
#[pyfunction]
#[pyo3(signature = (stage1, stage2, corpus, ids=None))]
fn evaluate<'py>(
    py: Python<'py>,
    stage1: &Stage1Model,
    stage2: &Stage2Model,
    corpus: &Corpus,
    ids: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyDict>> {
    let ids = ids.unwrap_or_else(|| corpus.0.identities().map(String::from).collect());
    let (ours, b1) = py
        .detach(|| {
            let c = sketchless::eval::compare(&stage1.0, &stage2.0, &corpus.0, &ids)?;
            Ok::<_, Error>((MetricReport::from_record(&c.sequence)?, MetricReport::from_record(&c.baseline)?))
        })
        .py_err()?;
    let out = PyDict::new(py);
    out.set_item("ours", report_dict(py, &ours)?)?;
    out.set_item("b1", report_dict(py, &b1)?)?;
    Ok(out)
}

/// Stroke-weighted `(w@mA, w@mB)` in percent for a rank matrix
/// (`ranks[photo][frame]`, 1-based) with shared stroke counts.
#[pyfunction]
fn weighted_scores(ranks: Vec<Vec<u32>>, gallery_size: usize, stroke_counts: Vec<u32>, total_strokes: u32) -> PyResult<(f64, f64)> {
    let ids = (0..ranks.len()).map(|i| i.to_string()).collect();
    let record = RankRecord::new(ids, ranks, gallery_size, stroke_counts, total_strokes).py_err()?;
    weighted_metrics(&record).py_err()
}

/// Generate a stroke episode from one complete sketch.
#[pyfunction]
#[pyo3(signature = (sketch, frames, seed=0, source_id="sketch"))]
fn make_episode(py: Python<'_>, sketch: &Sketch, frames: usize, seed: u64, source_id: &str) -> PyResult<Episode> {
    let cfg = sketchless::data::toy_episode_config(sketch.0.width(), frames);
    py.detach(|| sketchless::episode::generate_episode(&sketch.0, &cfg, source_id, seed)).map(Episode).py_err()
}

#[pymodule]
fn sketchless_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SketchlessError", m.py().get_type::<SketchlessError>())?;
    m.add_class::<Sketch>()?;
    m.add_class::<Photo>()?;
    m.add_class::<Episode>()?;
    m.add_class::<Corpus>()?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Stage1Model>()?;
    m.add_class::<Stage2Model>()?;
    m.add_class::<Gallery>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_scores, m)?)?;
    m.add_function(wrap_pyfunction!(make_episode, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
