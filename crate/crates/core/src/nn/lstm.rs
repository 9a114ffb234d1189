use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Tensor;

/// One direction of an LSTM layer. Gate order in the stacked weights is
/// input, forget, cell, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmDirection {
    pub input_size: usize,
    pub hidden_size: usize,
    pub reverse: bool,
    /// `(4 * hidden, input)`
    pub w_ih: Tensor,
    /// `(4 * hidden, hidden)`
    pub w_hh: Tensor,
    /// `(4 * hidden)`
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
struct Step {
    t: usize,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    gates: Array1<f64>,
    tanh_c: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    inputs: Array2<f64>,
    steps: Vec<Step>,
}

#[derive(Debug, Clone)]
pub struct LstmGrads {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
    /// Gradient with respect to the input sequence, `(len, input)`.
    pub inputs: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmDirection {
    pub fn new(input_size: usize, hidden_size: usize, reverse: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        Self {
            input_size,
            hidden_size,
            reverse,
            w_ih: Tensor::uniform(&[4 * hidden_size, input_size], bound, rng),
            w_hh: Tensor::uniform(&[4 * hidden_size, hidden_size], bound, rng),
            bias: Tensor::uniform(&[4 * hidden_size], bound, rng),
        }
    }

    fn order(&self, len: usize) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..len).rev())
        } else {
            Box::new(0..len)
        }
    }

    /// Hidden states in time order, `(len, hidden)`.
    pub fn forward(&self, inputs: ArrayView2<f64>) -> (Array2<f64>, LstmCache) {
        let (len, d) = inputs.dim();
        assert_eq!(d, self.input_size, "lstm input width mismatch");
        let hs = self.hidden_size;
        let (w_ih, w_hh, b) = (self.w_ih.view2(), self.w_hh.view2(), self.bias.view1());
        let mut h = Array1::<f64>::zeros(hs);
        let mut c = Array1::<f64>::zeros(hs);
        let mut out = Array2::zeros((len, hs));
        let mut steps = Vec::with_capacity(len);
        for t in self.order(len) {
            let mut gates = w_ih.dot(&inputs.row(t)) + w_hh.dot(&h) + b;
            for j in 0..hs {
                gates[j] = sigmoid(gates[j]);
                gates[hs + j] = sigmoid(gates[hs + j]);
                gates[2 * hs + j] = gates[2 * hs + j].tanh();
                gates[3 * hs + j] = sigmoid(gates[3 * hs + j]);
            }
            let mut c_new = Array1::zeros(hs);
            let mut tanh_c = Array1::zeros(hs);
            let mut h_new = Array1::zeros(hs);
            for j in 0..hs {
                c_new[j] = gates[hs + j] * c[j] + gates[j] * gates[2 * hs + j];
                tanh_c[j] = f64::tanh(c_new[j]);
                h_new[j] = gates[3 * hs + j] * tanh_c[j];
            }
            out.row_mut(t).assign(&h_new);
            steps.push(Step {
                t,
                h_prev: std::mem::replace(&mut h, h_new),
                c_prev: std::mem::replace(&mut c, c_new),
                gates,
                tanh_c,
            });
        }
        (
            out,
            LstmCache {
                inputs: inputs.to_owned(),
                steps,
            },
        )
    }

    /// Backpropagation through time given `d_hidden` in time order.
    pub fn backward(&self, cache: &LstmCache, d_hidden: ArrayView2<f64>) -> LstmGrads {
        let hs = self.hidden_size;
        let (len, _) = cache.inputs.dim();
        let (w_ih, w_hh) = (self.w_ih.view2(), self.w_hh.view2());
        let mut d_w_ih = Array2::<f64>::zeros((4 * hs, self.input_size));
        let mut d_w_hh = Array2::<f64>::zeros((4 * hs, hs));
        let mut d_b = Array1::<f64>::zeros(4 * hs);
        let mut d_inputs = Array2::<f64>::zeros((len, self.input_size));
        let mut dh_next = Array1::<f64>::zeros(hs);
        let mut dc_next = Array1::<f64>::zeros(hs);
        for step in cache.steps.iter().rev() {
            let dh = &d_hidden.row(step.t) + &dh_next;
            let g = &step.gates;
            let mut da = Array1::<f64>::zeros(4 * hs);
            for j in 0..hs {
                let (i, f, gg, o) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
                let tc = step.tanh_c[j];
                let d_o = dh[j] * tc;
                let dc = dh[j] * o * (1.0 - tc * tc) + dc_next[j];
                da[j] = dc * gg * i * (1.0 - i);
                da[hs + j] = dc * step.c_prev[j] * f * (1.0 - f);
                da[2 * hs + j] = dc * i * (1.0 - gg * gg);
                da[3 * hs + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            let x = cache.inputs.row(step.t);
            let da_col = da.view().insert_axis(ndarray::Axis(1));
            d_w_ih += &da_col.dot(&x.insert_axis(ndarray::Axis(0)));
            d_w_hh += &da_col.dot(&step.h_prev.view().insert_axis(ndarray::Axis(0)));
            d_b += &da;
            d_inputs.slice_mut(s![step.t, ..]).assign(&w_ih.t().dot(&da));
            dh_next = w_hh.t().dot(&da);
        }
        LstmGrads {
            w_ih: Tensor::from_matrix(&self.w_ih.shape, &d_w_ih),
            w_hh: Tensor::from_matrix(&self.w_hh.shape, &d_w_hh),
            bias: Tensor::from_vec(&self.bias.shape, d_b.to_vec()),
            inputs: d_inputs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(dir: &LstmDirection, x: &Array2<f64>, probe: &Array2<f64>) -> f64 {
        (dir.forward(x.view()).0 * probe).sum()
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for reverse in [false, true] {
            let mut dir = LstmDirection::new(3, 4, reverse, &mut rng);
            let x = Tensor::uniform(&[5, 3], 1.0, &mut rng);
            let x = Array2::from_shape_vec((5, 3), x.data).unwrap();
            let probe = Array2::from_shape_vec((5, 4), Tensor::uniform(&[5, 4], 1.0, &mut rng).data).unwrap();
            let (_, cache) = dir.forward(x.view());
            let grads = dir.backward(&cache, probe.view());
            let h = 1e-6;
            for i in 0..dir.w_hh.len() {
                let orig = dir.w_hh.data[i];
                dir.w_hh.data[i] = orig + h;
                let up = loss(&dir, &x, &probe);
                dir.w_hh.data[i] = orig - h;
                let down = loss(&dir, &x, &probe);
                dir.w_hh.data[i] = orig;
                assert!(((up - down) / (2.0 * h) - grads.w_hh.data[i]).abs() < 1e-7);
            }
            for i in 0..dir.bias.len() {
                let orig = dir.bias.data[i];
                dir.bias.data[i] = orig + h;
                let up = loss(&dir, &x, &probe);
                dir.bias.data[i] = orig - h;
                let down = loss(&dir, &x, &probe);
                dir.bias.data[i] = orig;
                assert!(((up - down) / (2.0 * h) - grads.bias.data[i]).abs() < 1e-7);
            }
            let mut xp = x.clone();
            for idx in [(0, 0), (2, 1), (4, 2)] {
                let orig = xp[idx];
                xp[idx] = orig + h;
                let up = loss(&dir, &xp, &probe);
                xp[idx] = orig - h;
                let down = loss(&dir, &xp, &probe);
                xp[idx] = orig;
                assert!(((up - down) / (2.0 * h) - grads.inputs[idx]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn reverse_direction_reads_sequence_backwards() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fwd = LstmDirection::new(2, 3, false, &mut rng);
        let mut bwd = fwd.clone();
        bwd.reverse = true;
        let x = Array2::from_shape_fn((4, 2), |(t, j)| (t * 2 + j) as f64 * 0.1);
        let mut flipped = x.clone();
        flipped.invert_axis(ndarray::Axis(0));
        let (hb, _) = bwd.forward(x.view());
        let (hf, _) = fwd.forward(flipped.view());
        assert!((hb.row(0).to_owned() - hf.row(3)).iter().all(|d| d.abs() < 1e-15));
    }
}
