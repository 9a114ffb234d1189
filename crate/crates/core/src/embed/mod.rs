//! Stage-1 embedding network: convolutional backbone, soft spatial attention
//! pooling, linear projection, and triplet training on complete sketches.

mod loss;
mod train;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use loss::{batch_triplet_loss, triplet_loss, triplet_loss_with, DistanceKind};
pub(crate) use loss::triplet_hinge_grad;
pub use train::{train_stage1, NegativeMining, Stage1TrainConfig};

use crate::embedding::{EmbeddingKind, EmbeddingVector};
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv2d, ConvCache, Gradients, Tensor};
use crate::raster::{PhotoImage, SketchImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Frozen layers keep their initial weights during stage-1 training.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_size: u32,
    pub input_channels: usize,
    pub layers: Vec<ConvSpec>,
    pub bias: bool,
}

impl BackboneConfig {
    /// Small stack for desk-scale runs: 3 stride-2 convolutions up to 32 channels.
    pub fn toy(input_size: u32) -> Self {
        let conv = |out_channels, trainable| ConvSpec {
            out_channels,
            kernel: 3,
            stride: 2,
            trainable,
        };
        Self {
            input_size,
            input_channels: 3,
            layers: vec![conv(8, false), conv(16, true), conv(32, true)],
            bias: true,
        }
    }

    /// Full-size stack: 299x299 input, 2048 output channels, early blocks frozen.
    pub fn paper() -> Self {
        let conv = |out_channels, kernel, stride, trainable| ConvSpec {
            out_channels,
            kernel,
            stride,
            trainable,
        };
        Self {
            input_size: 299,
            input_channels: 3,
            layers: vec![
                conv(32, 3, 2, false),
                conv(64, 3, 2, false),
                conv(128, 3, 2, false),
                conv(256, 3, 2, true),
                conv(512, 3, 2, true),
                conv(2048, 1, 1, true),
            ],
            bias: true,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(self.input_channels, |l| l.out_channels)
    }

    /// Side length of the final feature map.
    pub fn output_size(&self) -> usize {
        self.layers.iter().fold(self.input_size as usize, |s, l| {
            (s + 2 * (l.kernel / 2) - l.kernel) / l.stride + 1
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub backbone: BackboneConfig,
    pub d_low: usize,
    pub margin: f64,
    pub distance: DistanceKind,
    /// L2-normalize projected embeddings.
    pub normalize: bool,
}

impl Stage1Config {
    pub fn toy(input_size: u32, d_low: usize) -> Self {
        Self {
            backbone: BackboneConfig::toy(input_size),
            d_low,
            margin: 0.3,
            distance: DistanceKind::Euclidean,
            normalize: false,
        }
    }

    pub fn paper(d_low: usize) -> Self {
        Self {
            backbone: BackboneConfig::paper(),
            ..Self::toy(299, d_low)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_low == 0 {
            return Err(invalid("d_low must be positive"));
        }
        if !(self.margin > 0.0) {
            return Err(invalid(format!("margin must be positive, got {}", self.margin)));
        }
        if self.backbone.input_size == 0 || self.backbone.input_channels == 0 {
            return Err(invalid("backbone input must be non-empty"));
        }
        for (i, l) in self.backbone.layers.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(invalid(format!("backbone layer {i} has a zero dimension")));
            }
        }
        Ok(())
    }
}

/// Backbone output `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(invalid("feature map has an empty axis"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature map has non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    /// `(channels, positions)` view of the map.
    fn flat(&self) -> Array2<f64> {
        let (c, h, w) = self.values.dim();
        self.values.to_shape((c, h * w)).expect("contiguous").to_owned()
    }
}

/// Image domain; both go through the same shared-weight network.
#[derive(Debug, Clone, Copy)]
pub enum ImageRef<'a> {
    Sketch(&'a SketchImage),
    Photo(&'a PhotoImage),
}

impl ImageRef<'_> {
    fn size(&self) -> (u32, u32) {
        match self {
            ImageRef::Sketch(s) => (s.width(), s.height()),
            ImageRef::Photo(p) => (p.width(), p.height()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Model {
    config: Stage1Config,
    backbone: Vec<Conv2d>,
    /// 1x1 channel reduction producing attention logits.
    attention_weight: Tensor,
    attention_bias: Tensor,
    /// `(d_low, channels)`
    projection: Tensor,
    pub epoch: usize,
    pub seed: u64,
    #[serde(skip)]
    frozen: bool,
}

/// Intermediate values of one forward pass, kept for backpropagation.
pub(crate) struct Stage1Trace {
    convs: Vec<ConvCache>,
    activations: Vec<Array3<f64>>,
    features: Array2<f64>,
    attention: Array1<f64>,
    v_high: Array1<f64>,
    projected: Array1<f64>,
    pub v_low: Array1<f64>,
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    exp / total
}

impl Stage1Model {
    /// Fresh model: Kaiming-normal convolutions, attention and projection.
    pub fn new(config: Stage1Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = &config.backbone;
        let mut in_ch = bb.input_channels;
        let mut backbone = Vec::with_capacity(bb.layers.len());
        for spec in &bb.layers {
            backbone.push(Conv2d::new(
                in_ch,
                spec.out_channels,
                spec.kernel,
                spec.stride,
                bb.bias,
                spec.trainable,
                &mut rng,
            ));
            in_ch = spec.out_channels;
        }
        let c = bb.output_channels();
        Ok(Self {
            attention_weight: Tensor::kaiming_normal(&[c], c, &mut rng),
            attention_bias: Tensor::zeros(&[1]),
            projection: Tensor::kaiming_normal(&[config.d_low, c], c, &mut rng),
            config,
            backbone,
            epoch: 0,
            seed,
            frozen: false,
        })
    }

    pub fn config(&self) -> &Stage1Config {
        &self.config
    }

    pub fn d_low(&self) -> usize {
        self.config.d_low
    }

    pub fn d_high(&self) -> usize {
        self.config.backbone.output_channels()
    }

    pub fn input_size(&self) -> u32 {
        self.config.backbone.input_size
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Lock all parameters; training a frozen model is refused.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn projection_matrix(&self) -> &Tensor {
        &self.projection
    }

    /// Every parameter tensor, frozen or not, in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &conv.weight));
            if let Some(b) = &conv.bias {
                out.push((format!("backbone.{i}.bias"), b));
            }
        }
        out.push(("attention.weight".into(), &self.attention_weight));
        out.push(("attention.bias".into(), &self.attention_bias));
        out.push(("projection.weight".into(), &self.projection));
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.backbone.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.weight"), &mut conv.weight));
            if let Some(b) = &mut conv.bias {
                out.push((format!("backbone.{i}.bias"), b));
            }
        }
        out.push(("attention.weight".into(), &mut self.attention_weight));
        out.push(("attention.bias".into(), &mut self.attention_bias));
        out.push(("projection.weight".into(), &mut self.projection));
        out
    }

    /// Names of the parameters that stage-1 training updates, split into
    /// (backbone, head) groups.
    pub fn trainable_groups(&self) -> (Vec<String>, Vec<String>) {
        let mut backbone = Vec::new();
        for (i, conv) in self.backbone.iter().enumerate() {
            if conv.trainable {
                backbone.push(format!("backbone.{i}.weight"));
                if conv.bias.is_some() {
                    backbone.push(format!("backbone.{i}.bias"));
                }
            }
        }
        let head = vec![
            "attention.weight".to_string(),
            "attention.bias".to_string(),
            "projection.weight".to_string(),
        ];
        (backbone, head)
    }

    /// Replace projection and attention parameters (used by tests and tools).
    pub fn set_head(&mut self, attention_weight: Tensor, attention_bias: f64, projection: Tensor) -> Result<()> {
        let c = self.d_high();
        if attention_weight.shape != [c] || projection.shape != [self.config.d_low, c] {
            return Err(invalid("head parameter shapes do not match the model"));
        }
        self.attention_weight = attention_weight;
        self.attention_bias = Tensor::from_vec(&[1], vec![attention_bias]);
        self.projection = projection;
        Ok(())
    }

    /// Canonical serialized form; the checkpoint file holds exactly these bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        crate::checkpoint::encode(crate::checkpoint::Kind::Stage1, self)
    }

    /// SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes().expect("stage-1 model serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Convert an image into the backbone's `(channels, size, size)` input.
    pub fn prepare_input(&self, image: ImageRef<'_>) -> Result<Array3<f64>> {
        let size = self.input_size();
        let (w, h) = image.size();
        if (w, h) != (size, size) {
            return Err(invalid(format!(
                "input is {w}x{h}, model expects {size}x{size}"
            )));
        }
        let channels = self.config.backbone.input_channels;
        let n = size as usize;
        let input = match image {
            ImageRef::Sketch(s) => {
                Array3::from_shape_fn((channels, n, n), |(_, r, c)| s.get(r, c) as f64)
            }
            ImageRef::Photo(p) => {
                if channels != 3 {
                    // Luminance when the backbone is single-channel.
                    Array3::from_shape_fn((channels, n, n), |(_, r, c)| {
                        (0..3).map(|k| p.get(r, c, k) as f64).sum::<f64>() / 3.0
                    })
                } else {
                    Array3::from_shape_fn((3, n, n), |(k, r, c)| p.get(r, c, k) as f64)
                }
            }
        };
        Ok(input)
    }

    /// Resize an arbitrary sketch to the model input size.
    pub fn fit_sketch(&self, sketch: &SketchImage) -> SketchImage {
        let s = self.input_size();
        sketch.resized(s, s)
    }

    pub fn fit_photo(&self, photo: &PhotoImage) -> PhotoImage {
        let s = self.input_size();
        photo.resized(s, s)
    }

    fn run_backbone(&self, input: &Array3<f64>) -> (Array3<f64>, Vec<ConvCache>, Vec<Array3<f64>>) {
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.backbone.len());
        let mut acts = Vec::with_capacity(self.backbone.len());
        for conv in &self.backbone {
            let (mut out, cache) = conv.forward(x.view());
            out.mapv_inplace(|v| v.max(0.0));
            caches.push(cache);
            acts.push(out.clone());
            x = out;
        }
        (x, caches, acts)
    }

    pub fn backbone_forward(&self, image: ImageRef<'_>) -> Result<FeatureMap> {
        let input = self.prepare_input(image)?;
        FeatureMap::new(self.run_backbone(&input).0)
    }

    /// Spatial softmax over the 1x1-reduced logits, one weight per position.
    pub fn attention_map(&self, features: &FeatureMap) -> Result<Vec<f64>> {
        self.check_features(features)?;
        Ok(self.attention_of(&features.flat()).to_vec())
    }

    fn attention_of(&self, flat: &Array2<f64>) -> Array1<f64> {
        let logits = self.attention_weight.view1().dot(flat) + self.attention_bias.data[0];
        softmax(&logits)
    }

    fn check_features(&self, features: &FeatureMap) -> Result<()> {
        if features.channels() != self.d_high() {
            return Err(invalid(format!(
                "feature map has {} channels, model expects {}",
                features.channels(),
                self.d_high()
            )));
        }
        Ok(())
    }

    /// Spatial mean of `B + B * attention` (attention broadcast over channels).
    pub fn attention_pool(&self, features: &FeatureMap) -> Result<EmbeddingVector> {
        self.check_features(features)?;
        let flat = features.flat();
        let att = self.attention_of(&flat);
        EmbeddingVector::new(pool(&flat, &att).to_vec(), EmbeddingKind::High)
    }

    pub fn project(&self, v_high: &EmbeddingVector) -> Result<EmbeddingVector> {
        if v_high.kind() != EmbeddingKind::High {
            return Err(invalid("projection expects a high-dimensional pooled feature"));
        }
        if v_high.dim() != self.d_high() {
            return Err(invalid(format!(
                "feature has dim {}, projection expects {}",
                v_high.dim(),
                self.d_high()
            )));
        }
        let projected = self.projection.view2().dot(&ArrayView1::from(v_high.values()));
        EmbeddingVector::new(self.finish_low(projected).to_vec(), EmbeddingKind::Low)
    }

    fn finish_low(&self, projected: Array1<f64>) -> Array1<f64> {
        if self.config.normalize {
            let norm = projected.dot(&projected).sqrt();
            if norm > 0.0 {
                return projected / norm;
            }
        }
        projected
    }

    /// Pooled high-dimensional feature of an image.
    pub fn encode_high(&self, image: ImageRef<'_>) -> Result<EmbeddingVector> {
        self.attention_pool(&self.backbone_forward(image)?)
    }

    /// Low-dimensional retrieval embedding; identical weights for both domains.
    pub fn encode_image(&self, image: ImageRef<'_>) -> Result<EmbeddingVector> {
        self.project(&self.encode_high(image)?)
    }

    pub(crate) fn forward_traced(&self, input: &Array3<f64>) -> Stage1Trace {
        let (out, convs, activations) = self.run_backbone(input);
        let (c, h, w) = out.dim();
        let features = out.into_shape_with_order((c, h * w)).expect("contiguous");
        let attention = self.attention_of(&features);
        let v_high = pool(&features, &attention);
        let projected = self.projection.view2().dot(&v_high);
        let v_low = self.finish_low(projected.clone());
        Stage1Trace {
            convs,
            activations,
            features,
            attention,
            v_high,
            projected,
            v_low,
        }
    }

    /// Gradients of all trainable parameters given `d_low = dL/dV_L`.
    pub(crate) fn backward_traced(&self, trace: &Stage1Trace, d_low: &Array1<f64>) -> Gradients {
        let d_proj = if self.config.normalize {
            let norm = trace.projected.dot(&trace.projected).sqrt();
            if norm > 0.0 {
                let v = &trace.v_low;
                (d_low - &(v * v.dot(d_low))) / norm
            } else {
                d_low.clone()
            }
        } else {
            d_low.clone()
        };
        let d_projection = d_proj
            .view()
            .insert_axis(Axis(1))
            .dot(&trace.v_high.view().insert_axis(Axis(0)));
        let d_vh = self.projection.view2().t().dot(&d_proj);

        let (c, p) = trace.features.dim();
        let inv_p = 1.0 / p as f64;
        let feats = &trace.features;
        let att = &trace.attention;
        // dL/d attention_p = (1/P) sum_c g_c B[c, p]
        let d_att = d_vh.dot(feats) * inv_p;
        let weighted = att.dot(&d_att);
        let d_logits = att * &(d_att - weighted);
        let d_att_w = feats.dot(&d_logits);
        let d_att_b = d_logits.sum();

        let mut grads_rev: Vec<(String, Tensor)> = Vec::new();
        let first_trainable = self.backbone.iter().position(|l| l.trainable);
        if let Some(first) = first_trainable {
            let mut d_feat = Array2::<f64>::zeros((c, p));
            for pos in 0..p {
                let scale = (1.0 + att[pos]) * inv_p;
                let mut col = d_feat.column_mut(pos);
                col.assign(&(&d_vh * scale));
                col.scaled_add(d_logits[pos], &self.attention_weight.view1());
            }
            let last = trace.activations.last().expect("non-empty backbone");
            let mut d_out = d_feat.into_shape_with_order(last.dim()).expect("shape");
            for i in (first..self.backbone.len()).rev() {
                // ReLU gate
                d_out.zip_mut_with(&trace.activations[i], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                let conv = &self.backbone[i];
                let (dw, db, din) = conv.backward(&trace.convs[i], d_out.view(), i > first);
                if conv.trainable {
                    if let Some(db) = db {
                        grads_rev.push((format!("backbone.{i}.bias"), db));
                    }
                    grads_rev.push((format!("backbone.{i}.weight"), dw));
                }
                match din {
                    Some(d) => d_out = d,
                    None => break,
                }
            }
        }
        let mut grads = Gradients::new();
        for (name, t) in grads_rev.into_iter().rev() {
            grads.push(name, t);
        }
        grads.push("attention.weight", Tensor::from_vec(&[c], d_att_w.to_vec()));
        grads.push("attention.bias", Tensor::from_vec(&[1], vec![d_att_b]));
        grads.push(
            "projection.weight",
            Tensor::from_matrix(&self.projection.shape, &d_projection),
        );
        grads
    }

    /// Triplet hinge for `(anchor sketch, positive, negative)` with analytic
    /// gradients for every trainable parameter.
    pub fn triplet_gradients(
        &self,
        anchor: ImageRef<'_>,
        positive: ImageRef<'_>,
        negative: ImageRef<'_>,
    ) -> Result<(f64, Gradients)> {
        Ok(self.triplet_gradients_prepared(
            &self.prepare_input(anchor)?,
            &self.prepare_input(positive)?,
            &self.prepare_input(negative)?,
        ))
    }

    pub(crate) fn triplet_gradients_prepared(
        &self,
        anchor: &Array3<f64>,
        positive: &Array3<f64>,
        negative: &Array3<f64>,
    ) -> (f64, Gradients) {
        let ta = self.forward_traced(anchor);
        let tp = self.forward_traced(positive);
        let tn = self.forward_traced(negative);
        let hinge = triplet_hinge_grad(
            ta.v_low.as_slice().unwrap(),
            tp.v_low.as_slice().unwrap(),
            tn.v_low.as_slice().unwrap(),
            self.config.margin,
            self.config.distance,
        );
        let mut grads = self.backward_traced(&ta, &Array1::from(hinge.anchor));
        grads.accumulate(&self.backward_traced(&tp, &Array1::from(hinge.positive)));
        grads.accumulate(&self.backward_traced(&tn, &Array1::from(hinge.negative)));
        (hinge.loss, grads)
    }

    pub(crate) fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let bb = &self.config.backbone;
        if self.backbone.len() != bb.layers.len() {
            return Err(Error::CheckpointMismatch("backbone depth differs from config".into()));
        }
        let mut in_ch = bb.input_channels;
        for (i, (conv, spec)) in self.backbone.iter().zip(&bb.layers).enumerate() {
            let fan_in = in_ch * spec.kernel * spec.kernel;
            if conv.in_channels != in_ch
                || conv.out_channels != spec.out_channels
                || conv.kernel != spec.kernel
                || conv.stride != spec.stride
                || conv.weight.shape != [spec.out_channels, fan_in]
                || conv.weight.len() != spec.out_channels * fan_in
                || conv.bias.as_ref().map_or(bb.bias, |b| b.shape != [spec.out_channels])
            {
                return Err(Error::CheckpointMismatch(format!("backbone layer {i} shape mismatch")));
            }
            in_ch = spec.out_channels;
        }
        let c = bb.output_channels();
        if self.attention_weight.shape != [c]
            || self.attention_weight.len() != c
            || self.attention_bias.len() != 1
            || self.projection.shape != [self.config.d_low, c]
            || self.projection.len() != self.config.d_low * c
        {
            return Err(Error::CheckpointMismatch("attention/projection shape mismatch".into()));
        }
        Ok(())
    }

    /// Sum of squares of every parameter; a cheap change detector.
    pub fn parameter_checksum(&self) -> f64 {
        self.named_parameters()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|v| v * v)
            .sum()
    }

    pub(crate) fn parameter_map_mut(&mut self) -> BTreeMap<String, &mut Tensor> {
        self.named_parameters_mut().into_iter().collect()
    }

    pub(crate) fn ensure_trainable(&self) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract("stage-1 model is frozen".into()));
        }
        Ok(())
    }
}

fn pool(flat: &Array2<f64>, attention: &Array1<f64>) -> Array1<f64> {
    let p = flat.ncols() as f64;
    let mean = flat.sum_axis(Axis(1)) / p;
    mean + flat.dot(attention) / p
}
