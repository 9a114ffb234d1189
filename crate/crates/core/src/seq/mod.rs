//! Stage-2 sequence encoder: a bidirectional LSTM over the pooled stage-1
//! features of a drawing prefix, projected into the stage-1 retrieval space.

mod train;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use train::{episode_features, train_stage2, Stage2TrainConfig};

use crate::embed::{DistanceKind, ImageRef, Stage1Model};
use crate::embedding::{squared_distance, EmbeddingKind, EmbeddingVector};
use crate::error::{invalid, Error, Result};
use crate::nn::{Gradients, LstmCache, LstmDirection, Tensor};
use crate::raster::SketchImage;

/// Which prefix lengths contribute to the stage-2 loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PrefixSchedule {
    /// Every frame for short episodes, every 5th frame plus the last otherwise.
    #[default]
    Auto,
    All,
    Strided(usize),
}

impl std::str::FromStr for PrefixSchedule {
    type Err = Error;

    /// `auto`, `all` or `every:N`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "all" => Ok(Self::All),
            _ => s
                .strip_prefix("every:")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .map(Self::Strided)
                .ok_or_else(|| invalid(format!("unknown prefix schedule {s:?}; expected auto, all or every:N"))),
        }
    }
}

impl TryFrom<String> for PrefixSchedule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PrefixSchedule> for String {
    fn from(p: PrefixSchedule) -> String {
        match p {
            PrefixSchedule::Auto => "auto".into(),
            PrefixSchedule::All => "all".into(),
            PrefixSchedule::Strided(n) => format!("every:{n}"),
        }
    }
}

impl PrefixSchedule {
    /// Prefix lengths in `1..=frames`, ascending, always ending in `frames`.
    pub fn lengths(self, frames: usize) -> Vec<usize> {
        let step = match self {
            PrefixSchedule::All => 1,
            PrefixSchedule::Strided(s) => s.max(1),
            PrefixSchedule::Auto if frames <= 16 => 1,
            PrefixSchedule::Auto => 5,
        };
        let mut out: Vec<usize> = (step..=frames).step_by(step).collect();
        if out.last() != Some(&frames) {
            out.push(frames);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub hidden_size: usize,
    pub layers: usize,
    pub margin: f64,
    pub prefix_schedule: PrefixSchedule,
}

impl Stage2Config {
    pub fn toy() -> Self {
        Self {
            hidden_size: 32,
            layers: 1,
            margin: 0.3,
            prefix_schedule: PrefixSchedule::Auto,
        }
    }

    pub fn paper() -> Self {
        Self {
            hidden_size: 1024,
            ..Self::toy()
        }
    }
}

/// Pooled stage-1 features of consecutive frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    rows: Array2<f64>,
}

impl FeatureSequence {
    pub fn new(vectors: &[EmbeddingVector]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| invalid("feature sequence must contain at least one frame"))?;
        let dim = first.dim();
        let mut rows = Array2::zeros((vectors.len(), dim));
        for (i, v) in vectors.iter().enumerate() {
            if v.kind() != EmbeddingKind::High {
                return Err(invalid("feature sequences hold pooled high-dimensional features"));
            }
            if v.dim() != dim {
                return Err(invalid(format!("frame {i} has dim {}, expected {dim}", v.dim())));
            }
            rows.row_mut(i).assign(&ndarray::ArrayView1::from(v.values()));
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(invalid("feature sequence must contain at least one frame"));
        }
        Ok(Self { rows })
    }

    /// Encode every frame with a stage-1 model.
    pub fn from_frames(stage1: &Stage1Model, frames: &[SketchImage]) -> Result<Self> {
        let vectors = frames
            .iter()
            .map(|f| stage1.encode_high(ImageRef::Sketch(&stage1.fit_sketch(f))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(&vectors)
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// The first `len` frames.
    pub fn prefix(&self, len: usize) -> Result<FeatureSequence> {
        if len == 0 || len > self.len() {
            return Err(invalid(format!("prefix length {len} outside 1..={}", self.len())));
        }
        Ok(Self {
            rows: self.rows.slice(s![..len, ..]).to_owned(),
        })
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BiLayer {
    forward: LstmDirection,
    backward: LstmDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Model {
    config: Stage2Config,
    input_size: usize,
    /// Per-feature standardization applied before the recurrent layers.
    input_mean: Tensor,
    input_scale: Tensor,
    d_low: usize,
    distance: DistanceKind,
    normalize: bool,
    layers: Vec<BiLayer>,
    /// `(d_low, 2 * hidden)`
    head_weight: Tensor,
    head_bias: Tensor,
    stage1_hash: String,
    pub epoch: usize,
    pub seed: u64,
}

pub(crate) struct Stage2Trace {
    caches: Vec<(LstmCache, LstmCache)>,
    len: usize,
    final_state: Array1<f64>,
    projected: Array1<f64>,
    pub output: Array1<f64>,
}

impl Stage2Model {
    /// Fresh encoder bound to `stage1`: input width is its pooled feature size,
    /// output width its embedding size.
    pub fn new(stage1: &Stage1Model, config: Stage2Config, seed: u64) -> Result<Self> {
        if config.hidden_size == 0 || config.layers == 0 {
            return Err(invalid("stage-2 needs a positive hidden size and depth"));
        }
        if !(config.margin > 0.0) {
            return Err(invalid(format!("margin must be positive, got {}", config.margin)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size;
        let mut layers = Vec::with_capacity(config.layers);
        let mut width = stage1.d_high();
        for _ in 0..config.layers {
            layers.push(BiLayer {
                forward: LstmDirection::new(width, h, false, &mut rng),
                backward: LstmDirection::new(width, h, true, &mut rng),
            });
            width = 2 * h;
        }
        let d_low = stage1.d_low();
        Ok(Self {
            head_weight: Tensor::kaiming_normal(&[d_low, 2 * h], 2 * h, &mut rng),
            head_bias: Tensor::zeros(&[d_low]),
            input_size: stage1.d_high(),
            input_mean: Tensor::zeros(&[stage1.d_high()]),
            input_scale: Tensor::from_vec(&[stage1.d_high()], vec![1.0; stage1.d_high()]),
            d_low,
            distance: stage1.config().distance,
            normalize: stage1.config().normalize,
            layers,
            config,
            stage1_hash: stage1.content_hash(),
            epoch: 0,
            seed,
        })
    }

    pub fn config(&self) -> &Stage2Config {
        &self.config
    }

    pub fn d_low(&self) -> usize {
        self.d_low
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    /// Set the input standardization to the per-feature mean and inverse
    /// standard deviation of `rows`. Constant features are only centred.
    pub fn fit_input_normalization<'a>(&mut self, rows: impl IntoIterator<Item = ArrayView2<'a, f64>>) -> Result<()> {
        let d = self.input_size;
        let mut sum = Array1::<f64>::zeros(d);
        let mut sq = Array1::<f64>::zeros(d);
        let mut count = 0usize;
        for block in rows {
            if block.ncols() != d {
                return Err(invalid(format!("feature dim {} does not match {d}", block.ncols())));
            }
            for row in block.rows() {
                sum += &row;
                sq += &row.mapv(|v| v * v);
                count += 1;
            }
        }
        if count == 0 {
            return Err(invalid("no features to fit the input normalization"));
        }
        let mean = sum / count as f64;
        let var = sq / count as f64 - &mean * &mean;
        let scale = var.mapv(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 });
        self.input_mean = Tensor::from_vec(&[d], mean.to_vec());
        self.input_scale = Tensor::from_vec(&[d], scale.to_vec());
        Ok(())
    }

    pub fn stage1_hash(&self) -> &str {
        &self.stage1_hash
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        crate::checkpoint::encode(crate::checkpoint::Kind::Stage2, self)
    }

    pub fn content_hash(&self) -> String {
        crate::checkpoint::hash_bytes(&self.to_bytes().expect("stage-2 model serializes"))
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (dir, d) in [("fwd", &layer.forward), ("bwd", &layer.backward)] {
                out.push((format!("lstm.{i}.{dir}.w_ih"), &d.w_ih));
                out.push((format!("lstm.{i}.{dir}.w_hh"), &d.w_hh));
                out.push((format!("lstm.{i}.{dir}.bias"), &d.bias));
            }
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (dir, d) in [("fwd", &mut layer.forward), ("bwd", &mut layer.backward)] {
                out.push((format!("lstm.{i}.{dir}.w_ih"), &mut d.w_ih));
                out.push((format!("lstm.{i}.{dir}.w_hh"), &mut d.w_hh));
                out.push((format!("lstm.{i}.{dir}.bias"), &mut d.bias));
            }
        }
        out.push(("head.weight".into(), &mut self.head_weight));
        out.push(("head.bias".into(), &mut self.head_bias));
        out
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        let h = self.config.hidden_size;
        if self.input_mean.len() != self.input_size || self.input_scale.len() != self.input_size {
            return Err(Error::CheckpointMismatch("stage-2 input normalization shape mismatch".into()));
        }
        if self.layers.len() != self.config.layers {
            return Err(Error::CheckpointMismatch("stage-2 depth differs from config".into()));
        }
        let mut width = self.input_size;
        for (i, layer) in self.layers.iter().enumerate() {
            for d in [&layer.forward, &layer.backward] {
                if d.input_size != width
                    || d.hidden_size != h
                    || d.w_ih.shape != [4 * h, width]
                    || d.w_ih.len() != 4 * h * width
                    || d.w_hh.shape != [4 * h, h]
                    || d.w_hh.len() != 4 * h * h
                    || d.bias.len() != 4 * h
                {
                    return Err(Error::CheckpointMismatch(format!("lstm layer {i} shape mismatch")));
                }
            }
            width = 2 * h;
        }
        if self.head_weight.shape != [self.d_low, 2 * h]
            || self.head_weight.len() != self.d_low * 2 * h
            || self.head_bias.len() != self.d_low
        {
            return Err(Error::CheckpointMismatch("stage-2 head shape mismatch".into()));
        }
        Ok(())
    }

    /// Embed a drawing prefix: final forward state and final backward state,
    /// concatenated and projected to `d_low`.
    pub fn encode_prefix(&self, seq: &FeatureSequence) -> Result<EmbeddingVector> {
        if seq.is_empty() {
            return Err(invalid("cannot encode an empty prefix"));
        }
        if seq.dim() != self.input_size {
            return Err(invalid(format!(
                "feature dim {} does not match stage-1 feature dim {}",
                seq.dim(),
                self.input_size
            )));
        }
        let trace = self.forward_traced(seq.rows());
        EmbeddingVector::new(trace.output.to_vec(), EmbeddingKind::Sequence)
    }

    pub(crate) fn forward_traced(&self, inputs: ArrayView2<f64>) -> Stage2Trace {
        let len = inputs.nrows();
        let mut x = (&inputs - &self.input_mean.view1()) * &self.input_scale.view1();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut last = (Array2::zeros((0, 0)), Array2::zeros((0, 0)));
        for layer in &self.layers {
            let (hf, cf) = layer.forward.forward(x.view());
            let (hb, cb) = layer.backward.forward(x.view());
            x = concatenate![Axis(1), hf, hb];
            caches.push((cf, cb));
            last = (hf, hb);
        }
        let final_state = concatenate![Axis(0), last.0.row(len - 1), last.1.row(0)];
        let projected = self.head_weight.view2().dot(&final_state) + self.head_bias.view1();
        let output = if self.normalize {
            let n = projected.dot(&projected).sqrt();
            if n > 0.0 {
                &projected / n
            } else {
                projected.clone()
            }
        } else {
            projected.clone()
        };
        Stage2Trace {
            caches,
            len,
            final_state,
            projected,
            output,
        }
    }

    pub(crate) fn backward_traced(&self, trace: &Stage2Trace, d_out: &Array1<f64>) -> Gradients {
        let h = self.config.hidden_size;
        let d_proj = if self.normalize {
            let n = trace.projected.dot(&trace.projected).sqrt();
            if n > 0.0 {
                (d_out - &(&trace.output * trace.output.dot(d_out))) / n
            } else {
                d_out.clone()
            }
        } else {
            d_out.clone()
        };
        let d_head_w = d_proj
            .view()
            .insert_axis(Axis(1))
            .dot(&trace.final_state.view().insert_axis(Axis(0)));
        let d_final = self.head_weight.view2().t().dot(&d_proj);

        let len = trace.len;
        let mut d_hf = Array2::<f64>::zeros((len, h));
        let mut d_hb = Array2::<f64>::zeros((len, h));
        d_hf.row_mut(len - 1).assign(&d_final.slice(s![..h]));
        d_hb.row_mut(0).assign(&d_final.slice(s![h..]));

        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, (cf, cb)) in self.layers.iter().zip(&trace.caches).rev() {
            let gf = layer.forward.backward(cf, d_hf.view());
            let gb = layer.backward.backward(cb, d_hb.view());
            let d_x = &gf.inputs + &gb.inputs;
            per_layer.push((gf, gb));
            if d_x.ncols() == 2 * h {
                d_hf = d_x.slice(s![.., ..h]).to_owned();
                d_hb = d_x.slice(s![.., h..]).to_owned();
            }
        }
        per_layer.reverse();

        let mut grads = Gradients::new();
        for (i, (gf, gb)) in per_layer.into_iter().enumerate() {
            for (dir, g) in [("fwd", gf), ("bwd", gb)] {
                grads.push(format!("lstm.{i}.{dir}.w_ih"), g.w_ih);
                grads.push(format!("lstm.{i}.{dir}.w_hh"), g.w_hh);
                grads.push(format!("lstm.{i}.{dir}.bias"), g.bias);
            }
        }
        grads.push(
            "head.weight",
            Tensor::from_matrix(&self.head_weight.shape, &d_head_w),
        );
        grads.push("head.bias", Tensor::from_vec(&[self.d_low], d_proj.to_vec()));
        grads
    }

    /// Summed triplet hinge over the given prefix lengths of one episode,
    /// with gradients for every stage-2 parameter.
    pub fn triplet_gradients(
        &self,
        sequence: &FeatureSequence,
        prefix_lengths: &[usize],
        positive: &EmbeddingVector,
        negative: &EmbeddingVector,
    ) -> Result<(f64, Gradients)> {
        if positive.dim() != self.d_low || negative.dim() != self.d_low {
            return Err(invalid("photo embeddings must match the stage-2 output dim"));
        }
        if sequence.dim() != self.input_size {
            return Err(invalid("feature dim does not match the stage-2 input"));
        }
        if let Some(&bad) = prefix_lengths.iter().find(|&&t| t == 0 || t > sequence.len()) {
            return Err(invalid(format!("prefix length {bad} outside 1..={}", sequence.len())));
        }
        Ok(self.triplet_gradients_rows(sequence.rows(), prefix_lengths, positive.values(), negative.values()))
    }

    pub(crate) fn triplet_gradients_rows(
        &self,
        rows: ArrayView2<f64>,
        prefix_lengths: &[usize],
        positive: &[f64],
        negative: &[f64],
    ) -> (f64, Gradients) {
        self.mined_gradients_rows(rows, prefix_lengths, positive, &[negative])
    }

    /// Like `triplet_gradients_rows`, but each prefix is paired with whichever
    /// candidate negative is currently closest to its embedding.
    pub(crate) fn mined_gradients_rows(
        &self,
        rows: ArrayView2<f64>,
        prefix_lengths: &[usize],
        positive: &[f64],
        negatives: &[&[f64]],
    ) -> (f64, Gradients) {
        let mut total = 0.0;
        let mut grads = Gradients::new();
        for &t in prefix_lengths {
            let trace = self.forward_traced(rows.slice(s![..t, ..]));
            let out = trace.output.as_slice().unwrap();
            let negative = negatives
                .iter()
                .min_by(|a, b| squared_distance(out, a).total_cmp(&squared_distance(out, b)))
                .expect("at least one negative");
            let hinge = crate::embed::triplet_hinge_grad(out, positive, negative, self.config.margin, self.distance);
            total += hinge.loss;
            grads.accumulate(&self.backward_traced(&trace, &Array1::from(hinge.anchor)));
        }
        (total, grads)
    }
}
