//! Fixtures shared by the benchmarks.

use gridrun_core::config::{parse_config, ConfigSpec};
use gridrun_core::indicators::LossCurve;
use gridrun_core::trainer::{gen_dataset, transform, Dataset, DatasetParams, TransformStyle};

pub const REFERENCE_SWEEP: &str = include_str!("../../core/tests/data/reference_sweep.ini");

pub fn reference_sweep() -> ConfigSpec {
    parse_config(REFERENCE_SWEEP).expect("bundled config parses")
}

/// A noisy decaying curve of `n` epochs with a widening train/test gap.
pub fn decaying_curve(n: usize) -> LossCurve {
    let train = (0..n)
        .map(|e| 1.0 / (1.0 + e as f64) + 1e-3 * ((e * 7919) % 13) as f64)
        .collect();
    let test = (0..n).map(|e| 1.1 / (1.0 + e as f64) + 2e-4 * e as f64).collect();
    LossCurve { train, test }
}

pub fn standardised_data(data_size: usize, d_in: usize) -> Dataset {
    let p = DatasetParams {
        data_size,
        d_in,
        batch_size: 32,
        ..DatasetParams::default()
    };
    transform(&gen_dataset(&p, 7).expect("valid params"), TransformStyle::Standardisation)
}
