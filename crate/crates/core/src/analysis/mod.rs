//! Per-run loss plots and grouped meta-plots over stored runs.

mod group;
mod kde;
mod output;
mod plotconfig;
mod svg;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

pub use group::{resolve_field, select_and_group, FieldValue, Point, Resolution, Series};
pub use kde::{gaussian_kde, silverman_bandwidth, Kde, KDE_POINTS};
pub use output::{
    load_views, series_csv, write_lossplots, write_metaplots, LossplotEntry, LossplotManifest, Manifest, PlotEntry,
    LOSSPLOT_MANIFEST_FILE, MANIFEST_FILE,
};
pub use plotconfig::{parse_match_sets, parse_plot_config, ErrorbarStyle, MatchSet, PlotConfig, PlotSpec, PlotType};
pub use svg::{legend_text, render_lossplot, render_metaplot, MetaPlot, ViolinDensity};

use crate::store::{InfoValue, RunRecord, StoreError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("plot config: {0}")]
    Config(String),
    #[error("[{section}] unknown field `{field}`")]
    UnknownField { section: String, field: String },
    #[error("[{section}] include_keys has {keys} entries but include_values has {values}")]
    ArityMismatch { section: String, keys: usize, values: usize },
    #[error("[{section}] {axis} is not set")]
    MissingAxis { section: String, axis: &'static str },
    #[error("abscissa field `{0}` is not resolvable for any selected run")]
    UnknownAbscissa(String),
    #[error("ordinate field `{0}` is not resolvable for any selected run")]
    UnknownOrdinate(String),
    #[error("field `{field}` of run {run_id} is not numeric: {value}")]
    MixedTypes { field: String, run_id: String, value: String },
    #[error("field `{field}` of run {run_id} has several distinct values")]
    AmbiguousField { field: String, run_id: String },
    #[error("kernel density estimate needs at least one sample")]
    EmptySample,
    #[error("run {run_id} is not done")]
    NotDone { run_id: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Curve(String),
}

/// A run joined with its keys and info fields.
#[derive(Debug, Clone)]
pub struct RunView {
    pub record: RunRecord,
    pub keys: BTreeSet<String>,
    pub info: BTreeMap<String, InfoValue>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
