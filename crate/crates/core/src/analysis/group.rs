use std::collections::BTreeMap;
use std::fmt;

use regex::Regex;
use serde::Serialize;

use super::{mean_std, AnalysisError, PlotSpec, RunView};
use crate::pipeline::PipelineSpec;
use crate::value::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Num(f64),
    Text(String),
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Num(x) => write!(f, "{x}"),
            FieldValue::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    /// The field exists nowhere for this run.
    Missing,
    /// Possibly empty when the field exists but is null.
    Values(Vec<FieldValue>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Point {
    pub abscissa: f64,
    pub samples: Vec<f64>,
    pub run_ids: Vec<String>,
    pub mean: f64,
    /// Population standard deviation of `samples`.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub label: String,
    /// Sorted by abscissa.
    pub points: Vec<Point>,
}

fn num(x: Option<f64>) -> Resolution {
    Resolution::Values(x.map(FieldValue::Num).into_iter().collect())
}

fn text(s: Option<&str>) -> Resolution {
    Resolution::Values(s.map(|s| FieldValue::Text(s.to_string())).into_iter().collect())
}

fn column(view: &RunView, field: &str) -> Option<Resolution> {
    let r = &view.record;
    let ind = r.indicators.as_ref();
    let path = |p: &Option<std::path::PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
    Some(match field {
        "run_id" => text(Some(&r.run_id)),
        "pipeline_hash" => text(Some(&r.pipeline_hash)),
        "label" => text(Some(&r.label)),
        "mult_index" => num(Some(r.mult_index as f64)),
        "status" => text(Some(r.status.as_str())),
        "epochs" => num(Some(r.epochs as f64)),
        "nb_params" => num(r.nb_params.map(|n| n as f64)),
        "runtime_s" => num(ind.map(|i| i.runtime_s)),
        "final_train_loss" | "train_loss" => num(ind.map(|i| i.final_train_loss)),
        "final_test_loss" | "test_loss" => num(ind.map(|i| i.final_test_loss)),
        "overfitting" => num(ind.map(|i| i.overfitting)),
        "slope_mean" => num(ind.map(|i| i.slope_mean)),
        "slope_sigma_plus" => num(ind.map(|i| i.slope_sigma_plus)),
        "slope_sigma_minus" => num(ind.map(|i| i.slope_sigma_minus)),
        "trainability" => num(ind.map(|i| i.trainability)),
        "pipeline_json" => text(Some(&r.pipeline_json)),
        "curve_path" => text(path(&r.curve_path).as_deref()),
        "checkpoint_path" => text(path(&r.checkpoint_path).as_deref()),
        "log_path" => text(path(&r.log_path).as_deref()),
        "started_at" => num(r.started_at),
        "finished_at" => num(r.finished_at),
        "failure_reason" => text(r.failure_reason.as_deref()),
        "seed" => num(Some(r.seed as f64)),
        "data_seed" => num(Some(r.data_seed as f64)),
        "resource_token" => text(r.resource_token.as_deref()),
        _ => return None,
    })
}

fn info_value(v: &crate::store::InfoValue) -> FieldValue {
    match v.number {
        Some(x) => FieldValue::Num(x),
        None => FieldValue::Text(v.text.clone()),
    }
}

/// Looks `field` up in the run columns, then the exact info field, then
/// every `<section>.field` info entry, then (for `key`) the run keys.
pub fn resolve_field(view: &RunView, field: &str) -> Resolution {
    if let Some(r) = column(view, field) {
        return r;
    }
    if let Some(v) = view.info.get(field) {
        return Resolution::Values(vec![info_value(v)]);
    }
    let suffix = format!(".{field}");
    let dotted: Vec<FieldValue> = view
        .info
        .iter()
        .filter(|(k, _)| k.ends_with(&suffix))
        .map(|(_, v)| info_value(v))
        .collect();
    if !dotted.is_empty() {
        return Resolution::Values(dotted);
    }
    if field == "key" || field == "keys" {
        return Resolution::Values(view.keys.iter().cloned().map(FieldValue::Text).collect());
    }
    Resolution::Missing
}

/// One include item: numeric equality, text equality, SQL `LIKE` when it
/// contains `%`, or an anchored regular expression.
struct Matcher {
    raw: String,
    number: Option<f64>,
    like: Option<Regex>,
    regex: Option<Regex>,
}

fn like_regex(pattern: &str) -> Option<Regex> {
    let mut re = String::from("(?is)^");
    for c in pattern.chars() {
        match c {
            '%' => re.push_str(".*"),
            '_' => re.push('.'),
            c => re.push_str(&regex::escape(&c.to_string())),
        }
    }
    re.push('$');
    Regex::new(&re).ok()
}

impl Matcher {
    fn new(raw: &str) -> Self {
        Matcher {
            raw: raw.to_string(),
            number: raw.parse::<f64>().ok().filter(|x| x.is_finite()),
            like: if raw.contains('%') { like_regex(raw) } else { None },
            regex: Regex::new(&format!("^(?:{raw})$")).ok(),
        }
    }

    fn matches(&self, v: &FieldValue) -> bool {
        if let Some(n) = self.number {
            let x = match v {
                FieldValue::Num(x) => Some(*x),
                FieldValue::Text(s) => s.trim().parse::<f64>().ok(),
            };
            if x == Some(n) {
                return true;
            }
        }
        let t = v.to_string();
        t == self.raw
            || self.like.as_ref().is_some_and(|r| r.is_match(&t))
            || self.regex.as_ref().is_some_and(|r| r.is_match(&t))
    }
}

fn single_number(view: &RunView, field: &str) -> Result<Option<f64>, AnalysisError> {
    let Resolution::Values(vs) = resolve_field(view, field) else {
        return Ok(None);
    };
    let mut out: Option<f64> = None;
    for v in vs {
        let x = match v {
            FieldValue::Num(x) => x,
            FieldValue::Text(t) => {
                return Err(AnalysisError::MixedTypes {
                    field: field.to_string(),
                    run_id: view.record.run_id.clone(),
                    value: t,
                })
            }
        };
        match out {
            Some(prev) if prev.to_bits() != x.to_bits() => {
                return Err(AnalysisError::AmbiguousField {
                    field: field.to_string(),
                    run_id: view.record.run_id.clone(),
                })
            }
            _ => out = Some(x),
        }
    }
    Ok(out)
}

fn is_excluded(excludes: &[String], section: &str, param: &str) -> bool {
    excludes
        .iter()
        .any(|e| e == param || e.strip_prefix(section).and_then(|r| r.strip_prefix('.')) == Some(param))
}

/// Stage-by-stage parameter grid of a run; `None` when the stored pipeline
/// cannot be decoded.
fn stage_params(view: &RunView) -> Option<Vec<(String, Vec<(String, Scalar)>)>> {
    let p: PipelineSpec = serde_json::from_str(&view.record.pipeline_json).ok()?;
    Some(
        p.stages
            .into_iter()
            .map(|s| {
                let params = s.params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
                (s.section_name, params)
            })
            .collect(),
    )
}

fn identity(stages: &[(String, Vec<(String, Scalar)>)], excludes: &[String]) -> String {
    let parts: Vec<String> = stages
        .iter()
        .map(|(section, params)| {
            let vals: Vec<String> = params
                .iter()
                .map(|(k, v)| {
                    if is_excluded(excludes, section, k) {
                        format!("{k}=*")
                    } else {
                        format!("{k}={v}")
                    }
                })
                .collect();
            format!("{section}({})", vals.join(","))
        })
        .collect();
    parts.join("|")
}

/// Collapses the values of one excluded parameter across a group.
fn value_range(values: &[&Scalar]) -> String {
    if let Some(nums) = values.iter().map(|v| v.as_f64()).collect::<Option<Vec<f64>>>() {
        let (mut lo, mut hi) = (0, 0);
        for (i, x) in nums.iter().enumerate() {
            if *x < nums[lo] {
                lo = i;
            }
            if *x > nums[hi] {
                hi = i;
            }
        }
        if nums[lo] == nums[hi] {
            return values[lo].to_string();
        }
        return format!("{}-{}", values[lo], values[hi]);
    }
    let mut names: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    names.sort();
    names.dedup();
    names.join("/")
}

fn masked_label(members: &[&[(String, Vec<(String, Scalar)>)]], excludes: &[String]) -> String {
    let first = members[0];
    let parts: Vec<String> = first
        .iter()
        .enumerate()
        .map(|(si, (section, params))| {
            let vals: Vec<String> = params
                .iter()
                .enumerate()
                .map(|(pi, (k, v))| {
                    if is_excluded(excludes, section, k) {
                        let all: Vec<&Scalar> = members.iter().map(|m| &m[si].1[pi].1).collect();
                        value_range(&all)
                    } else {
                        v.to_string()
                    }
                })
                .collect();
            format!("{section}({})", vals.join(","))
        })
        .collect();
    parts.join("|")
}

/// Filters runs by the include pairs, groups them by masked label and
/// aggregates each abscissa value into one point. Runs lacking a value for
/// either axis are not selected.
pub fn select_and_group(views: &[RunView], spec: &PlotSpec) -> Result<Vec<Series>, AnalysisError> {
    let filters: Vec<(&str, Vec<Matcher>)> = spec
        .include_keys
        .iter()
        .zip(&spec.include_values)
        .map(|(k, set)| (k.as_str(), set.iter().map(|s| Matcher::new(s)).collect()))
        .collect();
    let kept: Vec<&RunView> = views
        .iter()
        .filter(|v| {
            filters.iter().all(|(field, matchers)| match resolve_field(v, field) {
                Resolution::Missing => false,
                Resolution::Values(vals) => vals.iter().any(|x| matchers.iter().any(|m| m.matches(x))),
            })
        })
        .collect();
    if kept.is_empty() {
        return Ok(Vec::new());
    }
    for (field, err) in [
        (&spec.abscissae, AnalysisError::UnknownAbscissa as fn(String) -> AnalysisError),
        (&spec.ordinates, AnalysisError::UnknownOrdinate),
    ] {
        if kept.iter().all(|v| resolve_field(v, field) == Resolution::Missing) {
            return Err(err(field.clone()));
        }
    }

    struct Member<'a> {
        view: &'a RunView,
        stages: Vec<(String, Vec<(String, Scalar)>)>,
        x: f64,
        y: f64,
    }
    let mut groups: BTreeMap<String, Vec<Member>> = BTreeMap::new();
    for view in kept {
        let (Some(x), Some(y)) = (single_number(view, &spec.abscissae)?, single_number(view, &spec.ordinates)?) else {
            continue;
        };
        let (id, stages) = match stage_params(view) {
            Some(stages) => (identity(&stages, &spec.excludes), stages),
            None => (format!("\u{1}{}", view.record.label), Vec::new()),
        };
        groups.entry(id).or_default().push(Member { view, stages, x, y });
    }

    let mut series: Vec<Series> = groups
        .into_values()
        .map(|members| {
            let label = if members[0].stages.is_empty() {
                members[0].view.record.label.clone()
            } else {
                let grids: Vec<&[(String, Vec<(String, Scalar)>)]> =
                    members.iter().map(|m| m.stages.as_slice()).collect();
                masked_label(&grids, &spec.excludes)
            };
            let mut by_x: Vec<&Member> = members.iter().collect();
            by_x.sort_by(|a, b| a.x.total_cmp(&b.x).then_with(|| a.view.record.run_id.cmp(&b.view.record.run_id)));
            let mut points: Vec<Point> = Vec::new();
            for m in by_x {
                match points.last_mut() {
                    Some(p) if p.abscissa.to_bits() == m.x.to_bits() => {
                        p.samples.push(m.y);
                        p.run_ids.push(m.view.record.run_id.clone());
                    }
                    _ => points.push(Point {
                        abscissa: m.x,
                        samples: vec![m.y],
                        run_ids: vec![m.view.record.run_id.clone()],
                        mean: 0.0,
                        std: 0.0,
                    }),
                }
            }
            for p in &mut points {
                (p.mean, p.std) = mean_std(&p.samples);
            }
            Series { label, points }
        })
        .collect();
    series.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(series)
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeMap, BTreeSet};

    use super::*;
    use crate::analysis::{ErrorbarStyle, PlotType};
    use crate::config::ProcessParams;
    use crate::indicators::IndicatorSet;
    use crate::pipeline::{pipeline_json, StageInstance};
    use crate::store::{InfoValue, RunRecord, RunStatus};
    use crate::value::OrderedMap;

    fn process() -> ProcessParams {
        serde_json::from_value(serde_json::json!({
            "data_scheme": [],
            "pipeline_scheme": ["mlp"],
            "epochs": 10,
            "lr": 0.01,
            "loss_function": "mse",
            "run_files_path": "runs"
        }))
        .unwrap()
    }

    fn view(section: &str, params: &[(&str, Scalar)], mult: usize, test_loss: f64) -> RunView {
        let mut map = OrderedMap::new();
        for (k, v) in params {
            map.insert(*k, v.clone());
        }
        let stage = StageInstance {
            section_name: section.into(),
            stage_type: "mlp".into(),
            class_name: section.into(),
            path_to_class: "builtin".into(),
            key: Some(format!("{section}_key")),
            params: map,
        };
        let p = PipelineSpec::new(process(), vec![stage]);
        let mut r = RunRecord::pending(&p.hash, &p.label, mult, 10, pipeline_json(&p));
        r.status = RunStatus::Done;
        r.nb_params = Some(params.iter().filter_map(|(_, v)| v.as_i64()).product::<i64>() as u64);
        r.indicators = Some(IndicatorSet {
            final_train_loss: test_loss / 2.0,
            final_test_loss: test_loss,
            overfitting: 0.0,
            slope_mean: 0.0,
            slope_sigma_plus: 0.0,
            slope_sigma_minus: 0.0,
            trainability: 0.0,
            runtime_s: 1.0,
        });
        let mut info = BTreeMap::new();
        info.insert(format!("{section}.class"), InfoValue::text(section));
        for (k, v) in params {
            info.insert(format!("{section}.{k}"), InfoValue::text(v.to_string()));
        }
        RunView {
            record: r,
            keys: BTreeSet::from([format!("{section}_key")]),
            info,
        }
    }

    fn spec(x: &str, y: &str, keys: &[&str], values: &[&[&str]], excludes: &[&str]) -> PlotSpec {
        PlotSpec {
            name: "plot_1".into(),
            abscissae: x.into(),
            ordinates: y.into(),
            include_keys: keys.iter().map(|s| s.to_string()).collect(),
            include_values: values.iter().map(|s| s.iter().map(|s| s.to_string()).collect()).collect(),
            excludes: excludes.iter().map(|s| s.to_string()).collect(),
            plot_type: PlotType::Line,
            errorbars_style: ErrorbarStyle::Bars,
        }
    }

    #[test]
    fn identical_runs_aggregate_with_population_std() {
        let p = [("length", Scalar::Int(5)), ("width", Scalar::Int(2))];
        let views: Vec<RunView> = [0.1, 0.2, 0.3].iter().enumerate().map(|(i, l)| view("mlp_brick", &p, i, *l)).collect();
        let s = select_and_group(&views, &spec("nb_params", "test_loss", &[], &[], &[])).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].points.len(), 1);
        let pt = &s[0].points[0];
        assert!((pt.mean - 0.2).abs() < 1e-12);
        assert!((pt.std - (2.0f64 / 3.0).sqrt() * 0.1).abs() < 1e-12);
        assert_eq!(pt.samples.len(), 3);
    }

    #[test]
    fn excluded_widths_collapse_to_a_range() {
        let views: Vec<RunView> = (2..=4)
            .map(|w| view("mlp_brick", &[("length", Scalar::Int(5)), ("width", Scalar::Int(w))], 0, 0.1 * w as f64))
            .collect();
        let s = select_and_group(&views, &spec("nb_params", "test_loss", &[], &[], &["width"])).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].label, "mlp_brick(5,2-4)");
        let xs: Vec<f64> = s[0].points.iter().map(|p| p.abscissa).collect();
        assert_eq!(xs, vec![10.0, 15.0, 20.0]);
        let unmasked = select_and_group(&views, &spec("nb_params", "test_loss", &[], &[], &[])).unwrap();
        assert_eq!(unmasked.len(), 3);
        let labels: Vec<&str> = unmasked.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(labels, vec!["mlp_brick(5,2)", "mlp_brick(5,3)", "mlp_brick(5,4)"]);
    }

    #[test]
    fn string_params_join_with_slashes() {
        let views = vec![
            view("t", &[("style", Scalar::from("standardisation"))], 0, 0.1),
            view("t", &[("style", Scalar::from("normalisation"))], 0, 0.2),
        ];
        let s = select_and_group(&views, &spec("epochs", "test_loss", &[], &[], &["t.style"])).unwrap();
        assert_eq!(s[0].label, "t(normalisation/standardisation)");
    }

    #[test]
    fn include_filters() {
        let views = vec![
            view("mlp_brick", &[("length", Scalar::Int(3)), ("width", Scalar::Int(30))], 0, 0.1),
            view("mlp_brick", &[("length", Scalar::Int(3)), ("width", Scalar::Int(60))], 0, 0.2),
            view("mlp_funnel", &[("length", Scalar::Int(3)), ("width", Scalar::Int(90))], 0, 0.3),
            view("mlp_funnel", &[("length", Scalar::Int(4)), ("width", Scalar::Int(30))], 0, 0.4),
        ];
        let count = |keys: &[&str], values: &[&[&str]]| -> usize {
            select_and_group(&views, &spec("nb_params", "test_loss", keys, values, &[]))
                .unwrap()
                .iter()
                .flat_map(|s| &s.points)
                .map(|p| p.samples.len())
                .sum()
        };
        assert_eq!(count(&[], &[]), 4);
        assert_eq!(count(&["width"], &[&["30", "60"]]), 3);
        assert_eq!(count(&["width", "length"], &[&["30", "60"], &["3"]]), 2);
        assert_eq!(count(&["class"], &[&["mlp_f%"]]), 2);
        assert_eq!(count(&["class"], &[&["mlp_(brick|funnel)"]]), 4);
        assert_eq!(count(&["key"], &[&["mlp_brick_key"]]), 2);
        assert_eq!(count(&["label"], &[&["mlp_brick(3,30)"]]), 1);
        assert_eq!(count(&["test_loss"], &[&["0.4"]]), 1);
        assert_eq!(count(&["nonexistent"], &[&["1"]]), 0);
    }

    #[test]
    fn errors() {
        let views = vec![view("m", &[("w", Scalar::Int(2))], 0, 0.1)];
        assert!(matches!(
            select_and_group(&views, &spec("nope", "test_loss", &[], &[], &[])),
            Err(AnalysisError::UnknownAbscissa(_))
        ));
        assert!(matches!(
            select_and_group(&views, &spec("w", "nope", &[], &[], &[])),
            Err(AnalysisError::UnknownOrdinate(_))
        ));
        assert!(matches!(
            select_and_group(&views, &spec("w", "label", &[], &[], &[])),
            Err(AnalysisError::MixedTypes { .. })
        ));
        assert!(select_and_group(&[], &spec("nope", "nope", &[], &[], &[])).unwrap().is_empty());
    }
}
