use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{render_lossplot, render_metaplot, select_and_group, AnalysisError, PlotConfig, PlotSpec, RunView, Series};
use crate::protocol::{read_curve, rows_to_curve};
use crate::store::{RunStatus, Store};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSSPLOT_MANIFEST_FILE: &str = "lossplots.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotEntry {
    pub section: String,
    pub svg: String,
    pub csv: String,
    pub spec: PlotSpec,
    pub series: Vec<String>,
    pub runs: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub file_title: String,
    pub plots: Vec<PlotEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossplotEntry {
    pub run_id: String,
    pub label: String,
    pub svg: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LossplotManifest {
    pub plots: Vec<LossplotEntry>,
    /// Selected runs without a plot, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), AnalysisError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// Joins each run matched by `selection` with its keys and info fields.
pub fn load_views(store: &Store, selection: &str) -> Result<Vec<RunView>, AnalysisError> {
    store
        .query_runs(selection)?
        .into_iter()
        .map(|record| {
            Ok(RunView {
                keys: store.run_keys(&record.run_id)?,
                info: store.run_info(&record.run_id)?,
                record,
            })
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `series,abscissa,mean,std,n`, floats in shortest round-trip form.
pub fn series_csv(series: &[Series]) -> String {
    let mut out = String::from("series,abscissa,mean,std,n\n");
    for s in series {
        for p in &s.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_field(&s.label),
                p.abscissa,
                p.mean,
                p.std,
                p.samples.len()
            );
        }
    }
    out
}

fn stem(file_title: &str) -> String {
    Path::new(file_title)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "plots".into())
}

/// Renders every plot of `cfg` over the done runs into `out_dir`, with a
/// CSV of the grouped points per plot and a manifest.
pub fn write_metaplots(store: &Store, cfg: &PlotConfig, out_dir: &Path) -> Result<Manifest, AnalysisError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let views = load_views(store, "status = 'done'")?;
    let base = stem(&cfg.file_title);
    let mut manifest = Manifest {
        file_title: cfg.file_title.clone(),
        plots: Vec::new(),
    };
    for spec in &cfg.plots {
        let series = select_and_group(&views, spec)?;
        let plot = render_metaplot(&series, spec)?;
        let svg = format!("{base}_{}.svg", spec.name);
        let csv = format!("{base}_{}.csv", spec.name);
        write_file(&out_dir.join(&svg), &plot.svg)?;
        write_file(&out_dir.join(&csv), &series_csv(&series))?;
        let runs = series.iter().flat_map(|s| &s.points).map(|p| p.samples.len()).sum();
        manifest.plots.push(PlotEntry {
            section: spec.name.clone(),
            svg,
            csv,
            spec: spec.clone(),
            series: series.iter().map(|s| s.label.clone()).collect(),
            runs,
            warning: (runs == 0).then(|| "no runs matched this selection".to_string()),
        });
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest is serializable");
    write_file(&out_dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

fn lossplot_name(run_id: &str) -> String {
    format!("{}.svg", run_id.replace(['#', '/', '\\'], "_"))
}

/// One loss plot per done run matched by `selection`.
pub fn write_lossplots(store: &Store, selection: &str, out_dir: &Path) -> Result<LossplotManifest, AnalysisError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut manifest = LossplotManifest::default();
    for r in store.query_runs(selection)? {
        if r.status != RunStatus::Done {
            manifest.skipped.push((r.run_id, format!("status {}", r.status)));
            continue;
        }
        let Some(curve_path): Option<PathBuf> = r.curve_path.clone() else {
            manifest.skipped.push((r.run_id, "no curve recorded".into()));
            continue;
        };
        let rows = match read_curve(&curve_path) {
            Ok(rows) => rows,
            Err(e) => {
                log::warn!("{}: {e}", r.run_id);
                manifest.skipped.push((r.run_id, e.to_string()));
                continue;
            }
        };
        let svg = render_lossplot(&r, &rows_to_curve(&rows))?;
        let name = lossplot_name(&r.run_id);
        write_file(&out_dir.join(&name), &svg)?;
        manifest.plots.push(LossplotEntry {
            run_id: r.run_id,
            label: r.label,
            svg: name,
        });
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest is serializable");
    write_file(&out_dir.join(LOSSPLOT_MANIFEST_FILE), &json)?;
    Ok(manifest)
}
