use serde::Serialize;

use super::AnalysisError;
use crate::ini::parse_ini;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotType {
    Line,
    Violin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorbarStyle {
    Bars,
    Filled,
}

/// Any-of set of match items; a bare value is a set of one.
pub type MatchSet = Vec<String>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotSpec {
    /// Name of the `[plot_N]` section.
    pub name: String,
    pub abscissae: String,
    pub ordinates: String,
    pub include_keys: Vec<String>,
    pub include_values: Vec<MatchSet>,
    pub excludes: Vec<String>,
    pub plot_type: PlotType,
    pub errorbars_style: ErrorbarStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotConfig {
    pub file_title: String,
    pub plots: Vec<PlotSpec>,
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// Splits `[a, b], c, [d]` at top-level commas into match sets.
pub fn parse_match_sets(s: &str) -> Result<Vec<MatchSet>, String> {
    let mut out = Vec::new();
    let mut rest = s.trim();
    while !rest.is_empty() {
        if let Some(inner) = rest.strip_prefix('[') {
            let end = inner.find(']').ok_or_else(|| format!("unclosed `[` in `{s}`"))?;
            let items = split_list(&inner[..end]);
            if items.is_empty() {
                return Err(format!("empty set in `{s}`"));
            }
            out.push(items);
            rest = inner[end + 1..].trim_start();
            match rest.strip_prefix(',') {
                Some(r) => rest = r.trim_start(),
                None if rest.is_empty() => {}
                None => return Err(format!("expected `,` after `]` in `{s}`")),
            }
        } else {
            let (item, r) = match rest.find(',') {
                Some(i) => (&rest[..i], &rest[i + 1..]),
                None => (rest, ""),
            };
            let item = item.trim();
            if item.is_empty() || item.contains(']') {
                return Err(format!("malformed item in `{s}`"));
            }
            out.push(vec![item.to_string()]);
            rest = r.trim_start();
        }
    }
    Ok(out)
}

pub fn parse_plot_config(text: &str) -> Result<PlotConfig, AnalysisError> {
    let sections = parse_ini(text).map_err(|e| AnalysisError::Config(e.to_string()))?;
    let mut file_title = None;
    let mut plots = Vec::new();
    for sec in &sections {
        if sec.name == "global" {
            for e in &sec.entries {
                match e.key.as_str() {
                    "file_title" => file_title = Some(e.value.trim().to_string()),
                    other => {
                        return Err(AnalysisError::UnknownField {
                            section: sec.name.clone(),
                            field: other.to_string(),
                        })
                    }
                }
            }
            continue;
        }
        if !sec.name.starts_with("plot") {
            return Err(AnalysisError::UnknownField {
                section: sec.name.clone(),
                field: "<section>".into(),
            });
        }
        let mut spec = PlotSpec {
            name: sec.name.clone(),
            abscissae: String::new(),
            ordinates: String::new(),
            include_keys: Vec::new(),
            include_values: Vec::new(),
            excludes: Vec::new(),
            plot_type: PlotType::Line,
            errorbars_style: ErrorbarStyle::Bars,
        };
        let invalid = |key: &str, msg: String| AnalysisError::Config(format!("[{}] {key}: {msg}", sec.name));
        for e in &sec.entries {
            let v = e.value.trim();
            match e.key.as_str() {
                "abscissae" => spec.abscissae = v.to_string(),
                "ordinates" => spec.ordinates = v.to_string(),
                "include_keys" => spec.include_keys = split_list(v),
                "include_values" => spec.include_values = parse_match_sets(v).map_err(|m| invalid(&e.key, m))?,
                "excludes" => spec.excludes = split_list(v),
                "plot_type" => {
                    spec.plot_type = match v.to_ascii_lowercase().as_str() {
                        "line" => PlotType::Line,
                        "violin" => PlotType::Violin,
                        _ => return Err(invalid(&e.key, format!("expected line or violin, got `{v}`"))),
                    }
                }
                "errorbars_style" => {
                    spec.errorbars_style = match v.to_ascii_lowercase().as_str() {
                        "bars" => ErrorbarStyle::Bars,
                        "filled" => ErrorbarStyle::Filled,
                        _ => return Err(invalid(&e.key, format!("expected bars or filled, got `{v}`"))),
                    }
                }
                other => {
                    return Err(AnalysisError::UnknownField {
                        section: sec.name.clone(),
                        field: other.to_string(),
                    })
                }
            }
        }
        if spec.include_keys.len() != spec.include_values.len() {
            return Err(AnalysisError::ArityMismatch {
                section: sec.name.clone(),
                keys: spec.include_keys.len(),
                values: spec.include_values.len(),
            });
        }
        for (axis, v) in [("abscissae", &spec.abscissae), ("ordinates", &spec.ordinates)] {
            if v.is_empty() {
                return Err(AnalysisError::MissingAxis {
                    section: sec.name.clone(),
                    axis,
                });
            }
        }
        plots.push(spec);
    }
    Ok(PlotConfig {
        file_title: file_title.unwrap_or_else(|| "plots".into()),
        plots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE_PLOTS: &str = include_str!("../../tests/data/reference_plots.ini");

    #[test]
    fn reference_plots_config() {
        let cfg = parse_plot_config(REFERENCE_PLOTS).unwrap();
        assert_eq!(cfg.file_title, "output.plot");
        assert_eq!(cfg.plots.len(), 1);
        let p = &cfg.plots[0];
        assert_eq!(p.abscissae, "nb_params");
        assert_eq!(p.ordinates, "test_loss");
        assert_eq!(p.include_keys, vec!["class", "data_size", "length"]);
        assert_eq!(
            p.include_values,
            vec![vec!["dataset_OR".to_string()], vec!["30".into(), "60".into()], vec!["3".into()]]
        );
        assert_eq!(p.excludes, vec!["width", "length", "data_size"]);
        assert_eq!(p.plot_type, PlotType::Line);
        assert_eq!(p.errorbars_style, ErrorbarStyle::Bars);
    }

    #[test]
    fn empty_plot_section_misses_axes() {
        let err = parse_plot_config("[global]\nfile_title = x\n[plot_1]\n").unwrap_err();
        assert!(matches!(err, AnalysisError::MissingAxis { axis: "abscissae", .. }));
    }

    #[test]
    fn defaults_and_errors() {
        let cfg = parse_plot_config("[plot_2]\nabscissae = epochs\nordinates = overfitting\n").unwrap();
        assert_eq!(cfg.plots[0].plot_type, PlotType::Line);
        assert_eq!(cfg.plots[0].errorbars_style, ErrorbarStyle::Bars);
        assert_eq!(cfg.file_title, "plots");
        assert!(matches!(
            parse_plot_config("[plot_1]\nabscissae = a\nordinates = b\ninclude_keys = x, y\ninclude_values = 1\n"),
            Err(AnalysisError::ArityMismatch { keys: 2, values: 1, .. })
        ));
        assert!(matches!(
            parse_plot_config("[plot_1]\nabscissae = a\nordinates = b\ncolour = red\n"),
            Err(AnalysisError::UnknownField { .. })
        ));
        assert!(parse_plot_config("[plot_1]\nabscissae = a\nordinates = b\nplot_type = pie\n").is_err());
    }

    #[test]
    fn match_sets() {
        assert_eq!(
            parse_match_sets("[30, 60], 3,[a]").unwrap(),
            vec![vec!["30".to_string(), "60".into()], vec!["3".into()], vec!["a".into()]]
        );
        assert_eq!(parse_match_sets("").unwrap(), Vec::<MatchSet>::new());
        assert!(parse_match_sets("[30, 60").is_err());
        assert!(parse_match_sets("[]").is_err());
        assert!(parse_match_sets("[1] 2").is_err());
    }
}
