use serde::{Deserialize, Serialize};

use crate::embedding::{squared_distance, EmbeddingVector};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl DistanceKind {
    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let sq = squared_distance(a, b);
        match self {
            DistanceKind::Euclidean => sq.sqrt(),
            DistanceKind::SquaredEuclidean => sq,
        }
    }

    /// d(a, b) and its gradient with respect to `a` (the gradient for `b` is the negation).
    fn eval_with_grad(self, a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let sq: f64 = diff.iter().map(|d| d * d).sum();
        match self {
            DistanceKind::Euclidean => {
                let d = sq.sqrt();
                // Subgradient zero at coincident points.
                let scale = if d > 0.0 { 1.0 / d } else { 0.0 };
                (d, diff.into_iter().map(|v| v * scale).collect())
            }
            DistanceKind::SquaredEuclidean => (sq, diff.into_iter().map(|v| 2.0 * v).collect()),
        }
    }
}

/// Hinge `max(d(a, p) - d(a, n) + margin, 0)` for one triple.
pub fn triplet_loss(
    anchor: &EmbeddingVector,
    positive: &EmbeddingVector,
    negative: &EmbeddingVector,
    margin: f64,
) -> Result<f64> {
    triplet_loss_with(anchor, positive, negative, margin, DistanceKind::Euclidean)
}

pub fn triplet_loss_with(
    anchor: &EmbeddingVector,
    positive: &EmbeddingVector,
    negative: &EmbeddingVector,
    margin: f64,
    distance: DistanceKind,
) -> Result<f64> {
    check_triple(anchor.values(), positive.values(), negative.values(), margin)?;
    let (a, p, n) = (anchor.values(), positive.values(), negative.values());
    Ok(((distance.eval(a, p) + margin) - distance.eval(a, n)).max(0.0))
}

/// Batch loss: sum of per-triple hinges.
pub fn batch_triplet_loss(
    triples: &[(EmbeddingVector, EmbeddingVector, EmbeddingVector)],
    margin: f64,
) -> Result<f64> {
    triples
        .iter()
        .map(|(a, p, n)| triplet_loss(a, p, n, margin))
        .sum()
}

fn check_triple(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<()> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(invalid(format!(
            "triplet dimension mismatch: {}, {}, {}",
            a.len(),
            p.len(),
            n.len()
        )));
    }
    if !(margin > 0.0) {
        return Err(invalid(format!("margin must be positive, got {margin}")));
    }
    Ok(())
}

pub(crate) struct HingeGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

pub(crate) fn triplet_hinge_grad(a: &[f64], p: &[f64], n: &[f64], margin: f64, distance: DistanceKind) -> HingeGrad {
    let (d_ap, g_ap) = distance.eval_with_grad(a, p);
    let (d_an, g_an) = distance.eval_with_grad(a, n);
    let raw = (d_ap + margin) - d_an;
    if raw <= 0.0 {
        let zeros = vec![0.0; a.len()];
        return HingeGrad {
            loss: 0.0,
            anchor: zeros.clone(),
            positive: zeros.clone(),
            negative: zeros,
        };
    }
    HingeGrad {
        loss: raw,
        anchor: g_ap.iter().zip(&g_an).map(|(x, y)| x - y).collect(),
        positive: g_ap.iter().map(|x| -x).collect(),
        negative: g_an,
    }
}
