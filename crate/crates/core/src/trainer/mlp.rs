use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    Funnel,
    Brick,
}

impl MlpKind {
    pub fn from_class(class: &str) -> Option<Self> {
        match class {
            "mlp_funnel" => Some(MlpKind::Funnel),
            "mlp_brick" => Some(MlpKind::Brick),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub kind: MlpKind,
    pub length: usize,
    pub width: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl MlpShape {
    pub fn new(kind: MlpKind, length: usize, width: usize, d_in: usize, d_out: usize) -> Result<Self, TrainError> {
        if length == 0 || width == 0 || d_in == 0 || d_out == 0 {
            return Err(TrainError::InvalidShape(format!(
                "length={length} width={width} d_in={d_in} d_out={d_out}; all must be >= 1"
            )));
        }
        Ok(MlpShape {
            kind,
            length,
            width,
            d_in,
            d_out,
        })
    }

    /// Hidden-layer widths. Bricks repeat `width * d_in`; funnels taper linearly
    /// from `width * d_in` toward `d_out`, layer `i` (1-based) sitting at
    /// fraction `(i-1)/length` of the way.
    pub fn hidden_widths(&self) -> Vec<usize> {
        let top = (self.width * self.d_in) as f64;
        match self.kind {
            MlpKind::Brick => vec![self.width * self.d_in; self.length],
            MlpKind::Funnel => (1..=self.length)
                .map(|i| {
                    let frac = (i - 1) as f64 / self.length as f64;
                    ((top + (self.d_out as f64 - top) * frac).round() as usize).max(1)
                })
                .collect(),
        }
    }
}

/// Fully connected network: ReLU on every hidden layer, identity output.
/// Parameters live in one flat vector; layer `k` stores its
/// `fan_out x fan_in` weights (row-major) followed by `fan_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub dims: Vec<usize>,
    pub params: Vec<f64>,
}

fn layer_sizes(dims: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    dims.windows(2).map(|w| (w[0], w[1]))
}

impl MlpModel {
    pub fn build(shape: &MlpShape, seed: u64) -> MlpModel {
        let mut dims = vec![shape.d_in];
        dims.extend(shape.hidden_widths());
        dims.push(shape.d_out);
        MlpModel::he_uniform(dims, seed)
    }

    /// He-uniform weights in `+-sqrt(6 / fan_in)`, zero biases.
    pub fn he_uniform(dims: Vec<usize>, seed: u64) -> MlpModel {
        assert!(dims.len() >= 2 && dims.iter().all(|&d| d >= 1), "bad layer dims {dims:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::param_count_for(&dims));
        for (fan_in, fan_out) in layer_sizes(&dims) {
            let bound = (6.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..=bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        MlpModel { dims, params }
    }

    pub fn zeros(dims: Vec<usize>) -> MlpModel {
        let n = Self::param_count_for(&dims);
        MlpModel {
            dims,
            params: vec![0.0; n],
        }
    }

    pub fn param_count_for(dims: &[usize]) -> usize {
        layer_sizes(dims).map(|(i, o)| i * o + o).sum()
    }

    pub fn count_params(&self) -> usize {
        self.params.len()
    }

    pub fn d_in(&self) -> usize {
        self.dims[0]
    }

    pub fn d_out(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Offsets of (weights, biases) for layer `k`.
    pub fn layer_offsets(&self, k: usize) -> (usize, usize) {
        let mut off = 0;
        for (fan_in, fan_out) in layer_sizes(&self.dims).take(k) {
            off += fan_in * fan_out + fan_out;
        }
        let (fan_in, fan_out) = (self.dims[k], self.dims[k + 1]);
        (off, off + fan_in * fan_out)
    }

    fn check_input(&self, x: &Matrix) -> Result<(), TrainError> {
        if x.cols != self.d_in() {
            return Err(TrainError::ShapeMismatch {
                expected: self.d_in(),
                actual: x.cols,
            });
        }
        Ok(())
    }

    /// Runs one sample through the network, writing each layer's post-activation
    /// output into `acts[k + 1]` (`acts[0]` must hold the input).
    fn forward_sample(&self, acts: &mut [Vec<f64>]) {
        let last = self.n_layers() - 1;
        let mut off = 0;
        for (k, (fan_in, fan_out)) in layer_sizes(&self.dims).enumerate() {
            let (w, rest) = self.params[off..].split_at(fan_in * fan_out);
            let b = &rest[..fan_out];
            let (prev, next) = acts.split_at_mut(k + 1);
            let input = &prev[k];
            let out = &mut next[0];
            for j in 0..fan_out {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                let mut z = b[j];
                for (wi, xi) in row.iter().zip(input) {
                    z += wi * xi;
                }
                out[j] = if k < last && z < 0.0 { 0.0 } else { z };
            }
            off += fan_in * fan_out + fan_out;
        }
    }

    fn activation_buffers(&self) -> Vec<Vec<f64>> {
        self.dims.iter().map(|&d| vec![0.0; d]).collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, TrainError> {
        self.check_input(x)?;
        let mut acts = self.activation_buffers();
        let mut out = Matrix::zeros(x.rows, self.d_out());
        for i in 0..x.rows {
            acts[0].copy_from_slice(x.row(i));
            self.forward_sample(&mut acts);
            out.row_mut(i).copy_from_slice(acts.last().unwrap());
        }
        Ok(out)
    }

    /// Mean squared error over every element of the batch.
    pub fn mse(&self, x: &Matrix, y: &Matrix) -> Result<f64, TrainError> {
        let pred = self.forward(x)?;
        Ok(per_sample_sq_errors(&pred, y).iter().sum::<f64>() / (y.rows * y.cols) as f64)
    }

    /// Loss and exact gradient of the batch MSE with respect to every
    /// parameter, in the flat parameter layout. Also returns each sample's
    /// summed squared error.
    pub fn loss_and_grad(&self, x: &Matrix, y: &Matrix) -> Result<(f64, Vec<f64>, Vec<f64>), TrainError> {
        self.check_input(x)?;
        if y.cols != self.d_out() || y.rows != x.rows {
            return Err(TrainError::ShapeMismatch {
                expected: self.d_out(),
                actual: y.cols,
            });
        }
        let n_layers = self.n_layers();
        let scale = 2.0 / (y.rows * y.cols) as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut acts = self.activation_buffers();
        let mut deltas = self.activation_buffers();
        let offsets: Vec<(usize, usize)> = (0..n_layers).map(|k| self.layer_offsets(k)).collect();
        let mut sample_sq = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            acts[0].copy_from_slice(x.row(i));
            self.forward_sample(&mut acts);
            let mut sq = 0.0;
            for (d, (p, t)) in deltas[n_layers].iter_mut().zip(acts[n_layers].iter().zip(y.row(i))) {
                let r = p - t;
                sq += r * r;
                *d = scale * r;
            }
            sample_sq.push(sq);
            for k in (0..n_layers).rev() {
                let (fan_in, fan_out) = (self.dims[k], self.dims[k + 1]);
                let (w_off, b_off) = offsets[k];
                let (lower, upper) = deltas.split_at_mut(k + 1);
                let delta = &upper[0];
                let input = &acts[k];
                for j in 0..fan_out {
                    let dj = delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    grad[b_off + j] += dj;
                    let g = &mut grad[w_off + j * fan_in..w_off + (j + 1) * fan_in];
                    for (gi, xi) in g.iter_mut().zip(input) {
                        *gi += dj * xi;
                    }
                }
                if k > 0 {
                    let prev = &mut lower[k];
                    prev.iter_mut().for_each(|v| *v = 0.0);
                    for j in 0..fan_out {
                        let dj = delta[j];
                        if dj == 0.0 {
                            continue;
                        }
                        let row = &self.params[w_off + j * fan_in..w_off + (j + 1) * fan_in];
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += w * dj;
                        }
                    }
                    // ReLU derivative: the stored activation is zero exactly
                    // where the pre-activation was non-positive.
                    for (p, a) in prev.iter_mut().zip(input) {
                        if *a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                }
            }
        }
        let loss = sample_sq.iter().sum::<f64>() / (y.rows * y.cols) as f64;
        Ok((loss, grad, sample_sq))
    }
}

pub(crate) fn per_sample_sq_errors(pred: &Matrix, y: &Matrix) -> Vec<f64> {
    (0..y.rows)
        .map(|i| {
            pred.row(i)
                .iter()
                .zip(y.row(i))
                .map(|(p, t)| (p - t) * (p - t))
                .sum()
        })
        .collect()
}
