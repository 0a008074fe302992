use std::fmt::Write as _;

use serde::Serialize;

use super::{gaussian_kde, AnalysisError, ErrorbarStyle, Kde, PlotSpec, PlotType, Series};
use crate::indicators::{IndicatorSet, LossCurve};
use crate::store::{RunRecord, RunStatus};

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const LINE_GAP: f64 = 18.0;
const TRAIN_COLOUR: &str = "#1f77b4";
const TEST_COLOUR: &str = "#d62728";
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolinDensity {
    pub series: String,
    pub abscissa: f64,
    pub kde: Kde,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaPlot {
    pub svg: String,
    /// Densities drawn in violin mode, one per point with two or more samples.
    pub violins: Vec<ViolinDensity>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Four significant digits.
fn sig4(x: f64) -> String {
    format!("{x:.3e}")
}

fn tick_label(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-3..1e5).contains(&a) {
        let s = format!("{x:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" {
            "0".into()
        } else {
            s.to_string()
        }
    } else {
        format!("{x:.2e}")
    }
}

/// `overfit=… trainability=… slope=m (+s+/-s-)`, each to four significant
/// digits.
pub fn legend_text(ind: &IndicatorSet) -> String {
    format!(
        "overfit={} trainability={} slope={} (+{}/-{})",
        sig4(ind.overfitting),
        sig4(ind.trainability),
        sig4(ind.slope_mean),
        sig4(ind.slope_sigma_plus),
        sig4(ind.slope_sigma_minus)
    )
}

#[derive(Debug, Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn new(values: impl IntoIterator<Item = f64>, px_lo: f64, px_hi: f64) -> Axis {
        let (mut lo, mut hi) = values
            .into_iter()
            .filter(|x| x.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if lo == hi {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
            (lo, hi) = (lo - pad, hi + pad);
        } else {
            let pad = (hi - lo) * 0.05;
            (lo, hi) = (lo - pad, hi + pad);
        }
        Axis { lo, hi, px_lo, px_hi }
    }

    fn px(&self, x: f64) -> f64 {
        self.px_lo + (x - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    fn ticks(&self) -> Vec<f64> {
        (0..=4).map(|i| self.lo + (self.hi - self.lo) * i as f64 / 4.0).collect()
    }
}

struct Canvas {
    out: String,
    x: Axis,
    y: Axis,
}

impl Canvas {
    fn new(title: &str, header_lines: &[(String, &str)], x: Axis, y: Axis, x_name: &str, y_name: &str) -> Canvas {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text class="title" x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        for (i, (text, class)) in header_lines.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<text class="{class}" x="{LEFT:.2}" y="{:.2}">{}</text>"#,
                40.0 + LINE_GAP * i as f64,
                escape(text)
            );
        }
        let mut c = Canvas { out, x, y };
        c.axes(x_name, y_name);
        c
    }

    fn axes(&mut self, x_name: &str, y_name: &str) {
        let (x0, x1, y0, y1) = (self.x.px_lo, self.x.px_hi, self.y.px_lo, self.y.px_hi);
        let o = &mut self.out;
        let _ = writeln!(
            o,
            r#"<line class="axis" x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}" stroke="black"/>"#
        );
        let _ = writeln!(
            o,
            r#"<line class="axis" x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="black"/>"#
        );
        for t in self.x.ticks() {
            let px = self.x.px(t);
            let _ = writeln!(
                o,
                r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                y0 + 5.0,
                y0 + 18.0,
                tick_label(t)
            );
        }
        for t in self.y.ticks() {
            let py = self.y.px(t);
            let _ = writeln!(
                o,
                r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 5.0,
                x0 - 8.0,
                py + 4.0,
                tick_label(t)
            );
        }
        let _ = writeln!(
            o,
            r#"<text class="xlabel" x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            y0 + 40.0,
            escape(x_name)
        );
        let _ = writeln!(
            o,
            r#"<text class="ylabel" transform="translate(22 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (y0 + y1) / 2.0,
            escape(y_name)
        );
    }

    fn finish(mut self) -> String {
        self.out.push_str("</svg>\n");
        self.out
    }
}

fn top_margin(header_lines: usize) -> f64 {
    40.0 + LINE_GAP * header_lines as f64
}

fn path_d(points: &[(f64, f64)]) -> String {
    let mut d = String::new();
    for (i, (x, y)) in points.iter().enumerate() {
        let _ = write!(d, "{}{x:.2} {y:.2}", if i == 0 { "M" } else { " L" });
    }
    d
}

/// Train loss solid blue, test loss dashed red, epochs from 1.
pub fn render_lossplot(record: &RunRecord, curve: &LossCurve) -> Result<String, AnalysisError> {
    if record.status != RunStatus::Done {
        return Err(AnalysisError::NotDone {
            run_id: record.run_id.clone(),
        });
    }
    let mut header = vec![(record.label.clone(), "label")];
    if let Some(ind) = &record.indicators {
        header.push((legend_text(ind), "indicators"));
    }
    let top = top_margin(header.len() + 1);
    let n = curve.len();
    let x = Axis::new([1.0, n.max(1) as f64], LEFT, WIDTH - RIGHT);
    let y = Axis::new(curve.train.iter().chain(&curve.test).copied(), HEIGHT - BOTTOM, top);
    let mut c = Canvas::new(&record.run_id, &header, x, y, "epoch", "loss");

    let legend_y = 40.0 + LINE_GAP * header.len() as f64 - 4.0;
    for (i, (name, colour, dash)) in [("train", TRAIN_COLOUR, ""), ("test", TEST_COLOUR, r#" stroke-dasharray="6 4""#)]
        .into_iter()
        .enumerate()
    {
        let lx = LEFT + 120.0 * i as f64;
        let _ = writeln!(
            c.out,
            r#"<line class="legend-{name}" x1="{lx:.2}" y1="{legend_y:.2}" x2="{:.2}" y2="{legend_y:.2}" stroke="{colour}" stroke-width="2"{dash}/><text class="legend" x="{:.2}" y="{:.2}">{name}</text>"#,
            lx + 30.0,
            lx + 36.0,
            legend_y + 4.0
        );
    }
    for (name, values, colour, dash) in [
        ("train", &curve.train, TRAIN_COLOUR, ""),
        ("test", &curve.test, TEST_COLOUR, r#" stroke-dasharray="6 4""#),
    ] {
        let pts: Vec<(f64, f64)> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| (c.x.px((i + 1) as f64), c.y.px(*v)))
            .collect();
        let _ = writeln!(
            c.out,
            r#"<path class="{name}" d="{}" fill="none" stroke="{colour}" stroke-width="2"{dash}/>"#,
            path_d(&pts)
        );
        if pts.len() == 1 {
            let (px, py) = pts[0];
            let _ = writeln!(c.out, r#"<circle class="marker" cx="{px:.2}" cy="{py:.2}" r="4" fill="{colour}"/>"#);
        }
    }
    Ok(c.finish())
}

fn no_data(spec: &PlotSpec) -> String {
    log::warn!("[{}] no runs matched; writing an empty plot", spec.name);
    let top = top_margin(1);
    let x = Axis::new([0.0, 1.0], LEFT, WIDTH - RIGHT);
    let y = Axis::new([0.0, 1.0], HEIGHT - BOTTOM, top);
    let mut c = Canvas::new(&spec.name, &[], x, y, &spec.abscissae, &spec.ordinates);
    let _ = writeln!(
        c.out,
        r#"<text class="warning" x="{:.2}" y="{:.2}" text-anchor="middle">no runs matched this selection</text>"#,
        WIDTH / 2.0,
        HEIGHT / 2.0
    );
    c.finish()
}

/// Line mode draws mean polylines with ±1 std bars or bands; violin mode
/// draws a KDE silhouette per point, or a dot for a single sample.
pub fn render_metaplot(series: &[Series], spec: &PlotSpec) -> Result<MetaPlot, AnalysisError> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Ok(MetaPlot {
            svg: no_data(spec),
            violins: Vec::new(),
        });
    }
    let mut violins = Vec::new();
    if spec.plot_type == PlotType::Violin {
        for s in series {
            for p in &s.points {
                if p.samples.len() >= 2 {
                    violins.push(ViolinDensity {
                        series: s.label.clone(),
                        abscissa: p.abscissa,
                        kde: gaussian_kde(&p.samples)?,
                    });
                }
            }
        }
    }

    let header: Vec<(String, &str)> = series.iter().map(|s| (s.label.clone(), "legend")).collect();
    let top = top_margin(header.len());
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.abscissa));
    let x = Axis::new(xs, LEFT, WIDTH - RIGHT);
    let ys: Vec<f64> = match spec.plot_type {
        PlotType::Line => series
            .iter()
            .flat_map(|s| &s.points)
            .flat_map(|p| [p.mean - p.std, p.mean + p.std])
            .collect(),
        PlotType::Violin => series
            .iter()
            .flat_map(|s| &s.points)
            .flat_map(|p| p.samples.iter().copied())
            .chain(violins.iter().flat_map(|v| [v.kde.xs[0], v.kde.xs[v.kde.xs.len() - 1]]))
            .collect(),
    };
    let y = Axis::new(ys, HEIGHT - BOTTOM, top);
    let title = format!("{}: {} vs {}", spec.name, spec.ordinates, spec.abscissae);
    let mut c = Canvas::new(&title, &[], x, y, &spec.abscissae, &spec.ordinates);
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let ly = 40.0 + LINE_GAP * i as f64;
        let _ = writeln!(
            c.out,
            r#"<rect class="swatch" x="{:.2}" y="{:.2}" width="12" height="12" fill="{colour}"/><text class="legend" x="{:.2}" y="{ly:.2}">{}</text>"#,
            LEFT,
            ly - 10.0,
            LEFT + 18.0,
            escape(&s.label)
        );
    }

    match spec.plot_type {
        PlotType::Line => {
            for (i, s) in series.iter().enumerate() {
                let colour = PALETTE[i % PALETTE.len()];
                let centre: Vec<(f64, f64)> = s.points.iter().map(|p| (c.x.px(p.abscissa), c.y.px(p.mean))).collect();
                if spec.errorbars_style == ErrorbarStyle::Filled {
                    let upper = s.points.iter().map(|p| (c.x.px(p.abscissa), c.y.px(p.mean + p.std)));
                    let lower = s.points.iter().rev().map(|p| (c.x.px(p.abscissa), c.y.px(p.mean - p.std)));
                    let pts: Vec<String> = upper.chain(lower).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                    let _ = writeln!(
                        c.out,
                        r#"<polygon class="band" points="{}" fill="{colour}" fill-opacity="0.2" stroke="none"/>"#,
                        pts.join(" ")
                    );
                }
                let pts: Vec<String> = centre.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                let _ = writeln!(
                    c.out,
                    r#"<polyline class="series" points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
                    pts.join(" ")
                );
                for (p, (px, py)) in s.points.iter().zip(&centre) {
                    if spec.errorbars_style == ErrorbarStyle::Bars {
                        let (hi, lo) = (c.y.px(p.mean + p.std), c.y.px(p.mean - p.std));
                        let _ = writeln!(
                            c.out,
                            r#"<g class="errorbar" stroke="{colour}"><line x1="{px:.2}" y1="{lo:.2}" x2="{px:.2}" y2="{hi:.2}"/><line x1="{:.2}" y1="{hi:.2}" x2="{:.2}" y2="{hi:.2}"/><line x1="{:.2}" y1="{lo:.2}" x2="{:.2}" y2="{lo:.2}"/></g>"#,
                            px - 4.0,
                            px + 4.0,
                            px - 4.0,
                            px + 4.0
                        );
                    }
                    let _ = writeln!(c.out, r#"<circle class="mean" cx="{px:.2}" cy="{py:.2}" r="3" fill="{colour}"/>"#);
                }
            }
        }
        PlotType::Violin => {
            let mut distinct: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| c.x.px(p.abscissa))).collect();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let gap = distinct
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(WIDTH - LEFT - RIGHT, f64::min);
            let slot = gap * 0.9 / series.len() as f64;
            let half = (slot / 2.0).min(40.0);
            let mut kdes = violins.iter();
            for (i, s) in series.iter().enumerate() {
                let colour = PALETTE[i % PALETTE.len()];
                let shift = (i as f64 - (series.len() as f64 - 1.0) / 2.0) * slot;
                for p in &s.points {
                    let cx = c.x.px(p.abscissa) + shift;
                    if p.samples.len() < 2 {
                        let cy = c.y.px(p.samples[0]);
                        let _ = writeln!(c.out, r#"<circle class="violin-dot" cx="{cx:.2}" cy="{cy:.2}" r="4" fill="{colour}"/>"#);
                        continue;
                    }
                    let v = kdes.next().expect("one density per multi-sample point");
                    let peak = v.kde.density.iter().cloned().fold(0.0, f64::max);
                    let w = |d: f64| if peak > 0.0 { d / peak * half } else { 0.0 };
                    let right = v.kde.xs.iter().zip(&v.kde.density).map(|(y, d)| (cx + w(*d), c.y.px(*y)));
                    let left = v.kde.xs.iter().zip(&v.kde.density).rev().map(|(y, d)| (cx - w(*d), c.y.px(*y)));
                    let pts: Vec<(f64, f64)> = right.chain(left).collect();
                    let _ = writeln!(
                        c.out,
                        r#"<path class="violin" d="{} Z" fill="{colour}" fill-opacity="0.5" stroke="{colour}"/>"#,
                        path_d(&pts)
                    );
                    let my = c.y.px(p.mean);
                    let _ = writeln!(
                        c.out,
                        r#"<line class="violin-mean" x1="{:.2}" y1="{my:.2}" x2="{:.2}" y2="{my:.2}" stroke="black"/>"#,
                        cx - half / 2.0,
                        cx + half / 2.0
                    );
                }
            }
        }
    }
    Ok(MetaPlot { svg: c.finish(), violins })
}
