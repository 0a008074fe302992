use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Matrix, TrainError};
use crate::digest;
use crate::value::{OrderedMap, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub batch_size: usize,
    pub data_size: usize,
    pub train_prop: f64,
    pub d_in: usize,
    pub noise_sigma: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            batch_size: 64,
            data_size: 1000,
            train_prop: 0.9,
            d_in: 4,
            noise_sigma: 0.05,
        }
    }
}

fn invalid(name: &str, message: impl Into<String>) -> TrainError {
    TrainError::InvalidParam {
        name: name.to_string(),
        message: message.into(),
    }
}

pub(crate) fn positive_int(name: &str, v: &Scalar) -> Result<usize, TrainError> {
    match v.as_i64() {
        Some(n) if n >= 1 => Ok(n as usize),
        _ => Err(invalid(name, format!("expected a positive integer, got `{v}`"))),
    }
}

pub(crate) fn real(name: &str, v: &Scalar) -> Result<f64, TrainError> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| invalid(name, format!("expected a real number, got `{v}`")))
}

impl DatasetParams {
    /// Reads the stage parameters of a `dataset_generator` section; missing
    /// ones keep their defaults, unknown ones are rejected.
    pub fn from_params(params: &OrderedMap<Scalar>) -> Result<Self, TrainError> {
        let mut p = DatasetParams::default();
        for (name, v) in params.iter() {
            match name {
                "batch_size" => p.batch_size = positive_int(name, v)?,
                "data_size" => p.data_size = positive_int(name, v)?,
                "train_prop" => p.train_prop = real(name, v)?,
                "d_in" => p.d_in = positive_int(name, v)?,
                "noise_sigma" => p.noise_sigma = real(name, v)?,
                other => return Err(invalid(other, "unknown parameter for dataset_generator")),
            }
        }
        Ok(p)
    }

    pub fn train_size(&self) -> usize {
        (self.train_prop * self.data_size as f64).floor() as usize
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.data_size < 2 {
            return Err(invalid("data_size", "must be at least 2"));
        }
        if !(self.train_prop > 0.0 && self.train_prop < 1.0) {
            return Err(invalid("train_prop", "must lie strictly between 0 and 1"));
        }
        let n_train = self.train_size();
        if n_train == 0 || n_train == self.data_size {
            return Err(invalid("train_prop", "leaves an empty train or test split"));
        }
        if self.noise_sigma < 0.0 {
            return Err(invalid("noise_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

/// Inputs and targets with a train split (rows `0..n_train`) and a test split
/// (the remaining rows).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
    pub n_train: usize,
    /// Per-feature statistics over the train split.
    pub stats: Vec<FeatureStats>,
}

fn train_stats(x: &Matrix, n_train: usize) -> Vec<FeatureStats> {
    (0..x.cols)
        .map(|j| {
            let col = (0..n_train).map(|i| x.get(i, j));
            let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
            for v in col.clone() {
                min = min.min(v);
                max = max.max(v);
                sum += v;
            }
            let mean = sum / n_train as f64;
            let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n_train as f64;
            FeatureStats {
                min,
                max,
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix, n_train: usize) -> Self {
        assert_eq!(x.rows, y.rows, "inputs and targets differ in row count");
        assert!(n_train >= 1 && n_train <= x.rows);
        let stats = train_stats(&x, n_train);
        Dataset { x, y, n_train, stats }
    }

    pub fn d_in(&self) -> usize {
        self.x.cols
    }

    pub fn d_out(&self) -> usize {
        self.y.cols
    }

    pub fn n_test(&self) -> usize {
        self.x.rows - self.n_train
    }

    pub fn train_x(&self) -> Matrix {
        self.x.slice_rows(0, self.n_train)
    }

    pub fn train_y(&self) -> Matrix {
        self.y.slice_rows(0, self.n_train)
    }

    pub fn test_x(&self) -> Matrix {
        self.x.slice_rows(self.n_train, self.x.rows)
    }

    pub fn test_y(&self) -> Matrix {
        self.y.slice_rows(self.n_train, self.y.rows)
    }

    /// Hex digest of the raw input and target values.
    pub fn content_hash(&self) -> String {
        digest::hex_id(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(40 + 8 * (self.x.data.len() + self.y.data.len()));
        out.extend_from_slice(b"GRDS");
        out.extend_from_slice(&1u32.to_le_bytes());
        for n in [self.x.rows, self.x.cols, self.y.cols, self.n_train] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for v in self.x.data.iter().chain(&self.y.data) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Dataset> {
        if bytes.len() < 40 || &bytes[..4] != b"GRDS" || bytes[4..8] != 1u32.to_le_bytes() {
            return None;
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize;
        let (rows, cx, cy, n_train) = (word(0), word(1), word(2), word(3));
        let n_vals = rows.checked_mul(cx.checked_add(cy)?)?;
        if bytes.len() != 40 + 8 * n_vals || n_train == 0 || n_train > rows {
            return None;
        }
        let vals: Vec<f64> = bytes[40..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (xs, ys) = vals.split_at(rows * cx);
        Some(Dataset::new(
            Matrix {
                rows,
                cols: cx,
                data: xs.to_vec(),
            },
            Matrix {
                rows,
                cols: cy,
                data: ys.to_vec(),
            },
            n_train,
        ))
    }
}

/// Target of the synthetic regression task: mean of `sin(pi x_i)`.
pub(crate) fn target(x: &[f64]) -> f64 {
    x.iter().map(|v| (std::f64::consts::PI * v).sin()).sum::<f64>() / x.len() as f64
}

/// Draws `X ~ U[-1,1]^d_in` and `y = mean_i sin(pi x_i) + N(0, noise_sigma^2)`.
pub fn gen_dataset(params: &DatasetParams, seed: u64) -> Result<Dataset, TrainError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = if params.noise_sigma > 0.0 {
        Some(Normal::new(0.0, params.noise_sigma).map_err(|e| invalid("noise_sigma", e.to_string()))?)
    } else {
        None
    };
    let n = params.data_size;
    let mut x = Matrix::zeros(n, params.d_in);
    let mut y = Matrix::zeros(n, 1);
    for i in 0..n {
        let row = x.row_mut(i);
        for v in row.iter_mut() {
            *v = rng.random_range(-1.0..=1.0);
        }
        let mut t = target(x.row(i));
        if let Some(dist) = &noise {
            t += dist.sample(&mut rng);
        }
        y.data[i] = t;
    }
    Ok(Dataset::new(x, y, params.train_size()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformStyle {
    Normalisation,
    Standardisation,
}

impl TransformStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformStyle::Normalisation => "normalisation",
            TransformStyle::Standardisation => "standardisation",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TrainError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normalisation" | "normalization" => Ok(TransformStyle::Normalisation),
            "standardisation" | "standardization" => Ok(TransformStyle::Standardisation),
            other => Err(TrainError::UnknownStyle(other.to_string())),
        }
    }
}

/// Rescales every input feature with train-split statistics; constant
/// features map to zero.
pub fn transform(d: &Dataset, style: TransformStyle) -> Dataset {
    let mut x = d.x.clone();
    for (j, s) in d.stats.iter().enumerate() {
        let (offset, scale) = match style {
            TransformStyle::Normalisation => (s.min, s.max - s.min),
            TransformStyle::Standardisation => (s.mean, s.std),
        };
        for i in 0..x.rows {
            let v = &mut x.data[i * x.cols + j];
            *v = if scale > 0.0 { (*v - offset) / scale } else { 0.0 };
        }
    }
    Dataset::new(x, d.y.clone(), d.n_train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize) -> DatasetParams {
        DatasetParams {
            data_size: n,
            ..DatasetParams::default()
        }
    }

    #[test]
    fn split_sizes() {
        let p = DatasetParams {
            data_size: 10000,
            train_prop: 0.9,
            ..DatasetParams::default()
        };
        let d = gen_dataset(&p, 1).unwrap();
        assert_eq!(d.n_train, 9000);
        assert_eq!(d.n_test(), 1000);
        assert_eq!(d.train_x().rows + d.test_x().rows, 10000);
    }

    #[test]
    fn target_at_origin_is_zero() {
        assert_eq!(target(&[0.0; 5]), 0.0);
        let p = DatasetParams {
            noise_sigma: 0.0,
            ..params(50)
        };
        let d = gen_dataset(&p, 3).unwrap();
        for i in 0..d.x.rows {
            assert_eq!(d.y.data[i], target(d.x.row(i)));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = gen_dataset(&params(200), 42).unwrap();
        let b = gen_dataset(&params(200), 42).unwrap();
        let c = gen_dataset(&params(200), 43).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
        assert!(a.x.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_params() {
        assert!(gen_dataset(&params(1), 0).is_err());
        let p = DatasetParams {
            train_prop: 1.0,
            ..params(10)
        };
        assert!(gen_dataset(&p, 0).is_err());
        let p = DatasetParams {
            train_prop: 0.01,
            ..params(10)
        };
        assert!(gen_dataset(&p, 0).is_err());
        let mut bad = OrderedMap::new();
        bad.insert("colour", Scalar::from("red"));
        assert!(DatasetParams::from_params(&bad).is_err());
        let mut bad = OrderedMap::new();
        bad.insert("data_size", Scalar::Real(0.5));
        assert!(DatasetParams::from_params(&bad).is_err());
    }

    #[test]
    fn bytes_round_trip() {
        let d = gen_dataset(&params(64), 9).unwrap();
        assert_eq!(Dataset::from_bytes(&d.to_bytes()).unwrap(), d);
        assert!(Dataset::from_bytes(&d.to_bytes()[..50]).is_none());
    }

    #[test]
    fn normalisation_spans_unit_interval() {
        let d = transform(&gen_dataset(&params(500), 5).unwrap(), TransformStyle::Normalisation);
        for s in &d.stats {
            assert_eq!(s.min, 0.0);
            assert!((s.max - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn standardisation_moments() {
        let d = transform(&gen_dataset(&params(500), 5).unwrap(), TransformStyle::Standardisation);
        // Recompute directly from the train rows rather than trusting `stats`.
        for j in 0..d.d_in() {
            let col: Vec<f64> = (0..d.n_train).map(|i| d.x.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(mean.abs() < 1e-9);
            assert!((std - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let x = Matrix::from_rows(&[vec![3.0, 1.0], vec![3.0, 2.0], vec![3.0, 5.0]]);
        let y = Matrix::from_rows(&[vec![0.0], vec![0.0], vec![0.0]]);
        let d = Dataset::new(x, y, 2);
        for style in [TransformStyle::Normalisation, TransformStyle::Standardisation] {
            let t = transform(&d, style);
            assert!((0..3).all(|i| t.x.get(i, 0) == 0.0));
            assert!(t.x.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn style_names() {
        assert_eq!(TransformStyle::parse("normalisation").unwrap(), TransformStyle::Normalisation);
        assert_eq!(TransformStyle::parse("Standardization").unwrap(), TransformStyle::Standardisation);
        assert!(matches!(TransformStyle::parse("whiten"), Err(TrainError::UnknownStyle(_))));
    }
}
