//! Minimal f64 building blocks with hand-written backward passes:
//! convolution, LSTM directions and the Adam optimizer.

mod adam;
mod conv;
mod lstm;

pub use adam::Adam;
pub use conv::{Conv2d, ConvCache};
pub use lstm::{LstmCache, LstmDirection, LstmGrads};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

/// Dense parameter buffer with a shape, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// He/Kaiming normal init: N(0, 2 / fan_in).
    /// Copy of a matrix in logical row-major order, whatever its memory layout.
    pub fn from_matrix(shape: &[usize], m: &ndarray::Array2<f64>) -> Self {
        Self::from_vec(shape, m.iter().copied().collect())
    }

    pub fn kaiming_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Self::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let n = shape.iter().product();
        Self::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn view1(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "expected a matrix");
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("shape checked")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        assert_eq!(self.shape.len(), 2, "expected a matrix");
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data).expect("shape checked")
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named gradient tensors, in the owning model's parameter order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, grad: Tensor) {
        self.entries.push((name.into(), grad));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Elementwise accumulate; both sides must come from the same model.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.entries.is_empty() {
            self.entries = other.entries.clone();
            return;
        }
        for ((na, a), (nb, b)) in self.entries.iter_mut().zip(&other.entries) {
            debug_assert_eq!(na, nb);
            a.add_assign(b);
        }
    }
}
