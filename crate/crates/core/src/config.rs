//! Experiment configuration: the `MONITOR` / `PROCESS` sections plus one
//! section per stage class, with value lists expanded from the range grammar.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ini::{parse_ini, IniEntry, IniError, IniSection};
use crate::value::{OrderedMap, Scalar};

/// Largest number of values a single `{a-b}` range may produce.
pub const MAX_RANGE_LEN: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("syntax error at line {line}: {message}")]
    SyntaxError { line: usize, message: String },
    #[error("missing mandatory section [{0}]")]
    MissingSection(&'static str),
    #[error("scheme names type `{0}` but no section has that type")]
    UnknownSchemeType(String),
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        section: String,
        key: String,
        line: usize,
    },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    InvalidValue {
        key: String,
        line: usize,
        message: String,
    },
    #[error("malformed range `{0}`")]
    MalformedRange(String),
    #[error("empty value")]
    EmptyValue,
    #[error("malformed size `{0}`")]
    MalformedSize(String),
}

impl From<IniError> for ConfigError {
    fn from(e: IniError) -> Self {
        ConfigError::SyntaxError {
            line: e.line,
            message: e.message,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorParams {
    pub need_gpu: bool,
    pub gpu_available: Vec<String>,
    pub nb_processus: usize,
    pub multiplicity: usize,
    pub cache_database_path: PathBuf,
    pub cache_size: u64,
}

impl Default for MonitorParams {
    fn default() -> Self {
        MonitorParams {
            need_gpu: false,
            gpu_available: Vec::new(),
            nb_processus: 1,
            multiplicity: 1,
            cache_database_path: PathBuf::from(".cache"),
            cache_size: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams {
    pub lr: f64,
    pub epochs: u32,
    pub loss_function: String,
    pub data_scheme: Vec<String>,
    pub pipeline_scheme: Vec<String>,
    pub run_files_path: PathBuf,
}

impl ProcessParams {
    /// Scheme slots in execution order: data stages then model stages.
    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.data_scheme
            .iter()
            .chain(self.pipeline_scheme.iter())
            .map(String::as_str)
    }
}

impl Default for ProcessParams {
    fn default() -> Self {
        ProcessParams {
            lr: 1e-3,
            epochs: 100,
            loss_function: "MSELoss".into(),
            data_scheme: Vec::new(),
            pipeline_scheme: Vec::new(),
            run_files_path: PathBuf::from(".runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSection {
    pub section_name: String,
    pub stage_type: String,
    pub class_name: String,
    pub path_to_class: String,
    pub key_template: Option<String>,
    pub params: OrderedMap<Vec<Scalar>>,
}

impl StageSection {
    /// Number of concrete parameter combinations this section expands to.
    pub fn combinations(&self) -> u128 {
        self.params.values().map(|v| v.len() as u128).product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSpec {
    pub monitor: MonitorParams,
    pub process: ProcessParams,
    pub sections: Vec<StageSection>,
}

impl ConfigSpec {
    pub fn sections_of_type<'a>(&'a self, stage_type: &'a str) -> impl Iterator<Item = &'a StageSection> + 'a {
        self.sections.iter().filter(move |s| s.stage_type == stage_type)
    }

    /// Renders the configuration back to INI text that `parse_config` accepts.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let join = |v: &[String]| v.join(", ");
        let p = &self.process;
        let _ = writeln!(out, "[PROCESS]");
        let _ = writeln!(out, "lr = {}", Scalar::Real(p.lr));
        let _ = writeln!(out, "epochs = {}", p.epochs);
        let _ = writeln!(out, "loss_function = {}", p.loss_function);
        let _ = writeln!(out, "data_scheme = {}", join(&p.data_scheme));
        let _ = writeln!(out, "pipeline_scheme = {}", join(&p.pipeline_scheme));
        let _ = writeln!(out, "run_files_path = {}", p.run_files_path.display());
        let m = &self.monitor;
        let _ = writeln!(out, "\n[MONITOR]");
        let _ = writeln!(out, "need_gpu = {}", Scalar::Bool(m.need_gpu));
        if !m.gpu_available.is_empty() {
            let _ = writeln!(out, "gpu_available = {}", join(&m.gpu_available));
        }
        let _ = writeln!(out, "nb_processus = {}", m.nb_processus);
        let _ = writeln!(out, "multiplicity = {}", m.multiplicity);
        let _ = writeln!(out, "cache_database_path = {}", m.cache_database_path.display());
        let _ = writeln!(out, "cache_size = {}", m.cache_size);
        for s in &self.sections {
            let _ = writeln!(out, "\n[{}]", s.section_name);
            let _ = writeln!(out, "type = {}", s.stage_type);
            let _ = writeln!(out, "class = {}", s.class_name);
            if !s.path_to_class.is_empty() {
                let _ = writeln!(out, "path_to_class = {}", s.path_to_class);
            }
            for (name, values) in s.params.iter() {
                let rendered: Vec<String> = values.iter().map(Scalar::to_string).collect();
                let _ = writeln!(out, "{name} = {}", rendered.join(", "));
            }
            if let Some(k) = &s.key_template {
                let _ = writeln!(out, "key = {k}");
            }
        }
        out
    }
}

/// Splits on `sep` at brace depth zero.
fn split_top_level(raw: &str, sep: char) -> Result<Vec<&str>, ConfigError> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in raw.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth < 0 {
                    return Err(ConfigError::MalformedRange(raw.to_string()));
                }
            }
            c if c == sep && depth == 0 => {
                parts.push(&raw[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(ConfigError::MalformedRange(raw.to_string()));
    }
    parts.push(&raw[start..]);
    Ok(parts)
}

fn expand_braced(item: &str, inner: &str) -> Result<Vec<Scalar>, ConfigError> {
    if inner.contains('{') || inner.contains('}') {
        return Err(ConfigError::MalformedRange(item.to_string()));
    }
    if inner.contains(',') {
        return inner
            .split(',')
            .map(|v| {
                let v = v.trim();
                if v.is_empty() {
                    Err(ConfigError::EmptyValue)
                } else {
                    Ok(Scalar::parse(v))
                }
            })
            .collect();
    }
    let inner = inner.trim();
    if inner.is_empty() {
        return Err(ConfigError::EmptyValue);
    }
    if inner.parse::<f64>().is_ok() {
        return Ok(vec![Scalar::parse(inner)]);
    }
    // A dash that is not a leading sign separates the bounds.
    let dash = inner
        .char_indices()
        .skip(1)
        .find(|&(_, c)| c == '-')
        .map(|(i, _)| i);
    let Some(dash) = dash else {
        return Ok(vec![Scalar::parse(inner)]);
    };
    let bad = || ConfigError::MalformedRange(item.to_string());
    let lo: i64 = inner[..dash].trim().parse().map_err(|_| bad())?;
    let hi: i64 = inner[dash + 1..].trim().parse().map_err(|_| bad())?;
    if lo > hi || (hi as i128 - lo as i128) as u64 >= MAX_RANGE_LEN {
        return Err(bad());
    }
    Ok((lo..=hi).map(Scalar::Int).collect())
}

/// Expands a raw value list: comma-separated items where an item is a scalar,
/// an inclusive integer range `{a-b}`, or an explicit set `{v1, v2, ...}`.
pub fn expand_values(raw: &str) -> Result<Vec<Scalar>, ConfigError> {
    if raw.trim().is_empty() {
        return Err(ConfigError::EmptyValue);
    }
    let mut out = Vec::new();
    for item in split_top_level(raw, ',')? {
        let item = item.trim();
        if item.is_empty() {
            return Err(ConfigError::EmptyValue);
        }
        if let Some(rest) = item.strip_prefix('{') {
            let inner = rest
                .strip_suffix('}')
                .ok_or_else(|| ConfigError::MalformedRange(item.to_string()))?;
            out.extend(expand_braced(item, inner)?);
        } else if item.contains('{') || item.contains('}') {
            return Err(ConfigError::MalformedRange(item.to_string()));
        } else {
            out.push(Scalar::parse(item));
        }
    }
    Ok(out)
}

/// Parses a byte count with an optional `K`, `M` or `G` suffix (powers of 1024).
pub fn parse_size(raw: &str) -> Result<u64, ConfigError> {
    let s = raw.trim();
    let bad = || ConfigError::MalformedSize(raw.to_string());
    let (digits, shift) = match s.chars().last() {
        Some('K' | 'k') => (&s[..s.len() - 1], 10),
        Some('M' | 'm') => (&s[..s.len() - 1], 20),
        Some('G' | 'g') => (&s[..s.len() - 1], 30),
        _ => (s, 0),
    };
    let n: u64 = digits.trim().parse().map_err(|_| bad())?;
    n.checked_mul(1u64 << shift).ok_or_else(bad)
}

fn split_scheme(raw: &str) -> Vec<String> {
    raw.split([',', '|'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

fn invalid(e: &IniEntry, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue {
        key: e.key.clone(),
        line: e.line,
        message: message.into(),
    }
}

fn parse_bool(e: &IniEntry) -> Result<bool, ConfigError> {
    match Scalar::parse(&e.value) {
        Scalar::Bool(b) => Ok(b),
        _ => Err(invalid(e, "expected True or False")),
    }
}

fn parse_positive(e: &IniEntry) -> Result<u64, ConfigError> {
    match e.value.trim().parse::<u64>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(invalid(e, "expected a positive integer")),
    }
}

fn parse_monitor(sec: &IniSection) -> Result<MonitorParams, ConfigError> {
    let mut m = MonitorParams::default();
    for e in &sec.entries {
        match e.key.as_str() {
            "need_gpu" => m.need_gpu = parse_bool(e)?,
            "gpu_available" => m.gpu_available = split_scheme(&e.value),
            "nb_processus" => m.nb_processus = parse_positive(e)? as usize,
            "multiplicity" => m.multiplicity = parse_positive(e)? as usize,
            "cache_database_path" => m.cache_database_path = PathBuf::from(&e.value),
            "cache_size" => {
                m.cache_size = parse_size(&e.value).map_err(|_| invalid(e, "expected a size such as 512K or 1G"))?
            }
            _ => {
                return Err(ConfigError::UnknownKey {
                    section: sec.name.clone(),
                    key: e.key.clone(),
                    line: e.line,
                })
            }
        }
    }
    if m.need_gpu && m.gpu_available.is_empty() {
        let line = sec.get("need_gpu").map_or(sec.line, |e| e.line);
        return Err(ConfigError::InvalidValue {
            key: "gpu_available".into(),
            line,
            message: "need_gpu is set but no resource tokens are listed".into(),
        });
    }
    Ok(m)
}

fn parse_process(sec: &IniSection) -> Result<ProcessParams, ConfigError> {
    let mut p = ProcessParams::default();
    for e in &sec.entries {
        match e.key.as_str() {
            "lr" => match Scalar::parse(&e.value).as_f64() {
                Some(x) if x.is_finite() && x > 0.0 => p.lr = x,
                _ => return Err(invalid(e, "expected a positive real")),
            },
            "epochs" => {
                let n = parse_positive(e)?;
                if n < 4 {
                    return Err(invalid(e, "at least 4 epochs are required"));
                }
                p.epochs = u32::try_from(n).map_err(|_| invalid(e, "too many epochs"))?;
            }
            "loss_function" => p.loss_function = e.value.clone(),
            "data_scheme" => p.data_scheme = split_scheme(&e.value),
            "pipeline_scheme" => p.pipeline_scheme = split_scheme(&e.value),
            "run_files_path" => p.run_files_path = PathBuf::from(&e.value),
            _ => {
                return Err(ConfigError::UnknownKey {
                    section: sec.name.clone(),
                    key: e.key.clone(),
                    line: e.line,
                })
            }
        }
    }
    if p.data_scheme.is_empty() && p.pipeline_scheme.is_empty() {
        return Err(ConfigError::InvalidValue {
            key: "pipeline_scheme".into(),
            line: sec.line,
            message: "data_scheme and pipeline_scheme are both empty".into(),
        });
    }
    Ok(p)
}

fn parse_stage(sec: &IniSection) -> Result<StageSection, ConfigError> {
    let mut stage_type = None;
    let mut class_name = None;
    let mut path_to_class = String::new();
    let mut key_template = None;
    let mut params = OrderedMap::new();
    for e in &sec.entries {
        match e.key.as_str() {
            "type" => stage_type = Some(e.value.clone()),
            "class" => class_name = Some(e.value.clone()),
            "path_to_class" => path_to_class = e.value.clone(),
            "key" => key_template = Some(e.value.clone()),
            name => {
                let values = expand_values(&e.value).map_err(|err| invalid(e, err.to_string()))?;
                params.insert(name, values);
            }
        }
    }
    let missing = |key: &str| ConfigError::InvalidValue {
        key: key.into(),
        line: sec.line,
        message: format!("section [{}] has no `{key}`", sec.name),
    };
    Ok(StageSection {
        section_name: sec.name.clone(),
        stage_type: stage_type.ok_or_else(|| missing("type"))?,
        class_name: class_name.ok_or_else(|| missing("class"))?,
        path_to_class,
        key_template,
        params,
    })
}

pub fn parse_config(text: &str) -> Result<ConfigSpec, ConfigError> {
    let ini = parse_ini(text)?;
    let monitor_sec = ini
        .iter()
        .find(|s| s.name == "MONITOR")
        .ok_or(ConfigError::MissingSection("MONITOR"))?;
    let process_sec = ini
        .iter()
        .find(|s| s.name == "PROCESS")
        .ok_or(ConfigError::MissingSection("PROCESS"))?;
    let monitor = parse_monitor(monitor_sec)?;
    let process = parse_process(process_sec)?;
    let sections = ini
        .iter()
        .filter(|s| s.name != "MONITOR" && s.name != "PROCESS")
        .map(parse_stage)
        .collect::<Result<Vec<_>, _>>()?;
    for slot in process.slots() {
        if !sections.iter().any(|s| s.stage_type == slot) {
            return Err(ConfigError::UnknownSchemeType(slot.to_string()));
        }
    }
    for s in &sections {
        if !process.slots().any(|t| t == s.stage_type) {
            log::warn!("section [{}] has type `{}` which no scheme uses", s.section_name, s.stage_type);
        }
    }
    Ok(ConfigSpec {
        monitor,
        process,
        sections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const REFERENCE_SWEEP: &str = include_str!("../tests/data/reference_sweep.ini");

    fn ints(v: &[i64]) -> Vec<Scalar> {
        v.iter().copied().map(Scalar::Int).collect()
    }

    #[test]
    fn expand_range_and_scalar() {
        assert_eq!(expand_values("{2-4},8").unwrap(), ints(&[2, 3, 4, 8]));
        assert_eq!(expand_values("5").unwrap(), ints(&[5]));
        assert_eq!(expand_values("{3, 5}, 8").unwrap(), ints(&[3, 5, 8]));
        assert_eq!(expand_values("5, {6-8}").unwrap(), ints(&[5, 6, 7, 8]));
        assert_eq!(expand_values("{-2-1}").unwrap(), ints(&[-2, -1, 0, 1]));
        assert_eq!(
            expand_values("normalisation, standardisation").unwrap(),
            vec![Scalar::from("normalisation"), Scalar::from("standardisation")]
        );
        assert_eq!(
            expand_values("True, False").unwrap(),
            vec![Scalar::Bool(true), Scalar::Bool(false)]
        );
        assert_eq!(expand_values("2,2").unwrap(), ints(&[2, 2]));
    }

    #[test]
    fn expand_errors() {
        assert!(matches!(expand_values("{4-2}"), Err(ConfigError::MalformedRange(_))));
        assert!(matches!(expand_values("{a-c}"), Err(ConfigError::MalformedRange(_))));
        assert!(matches!(expand_values("{1.5-3}"), Err(ConfigError::MalformedRange(_))));
        assert!(matches!(expand_values("{2-4"), Err(ConfigError::MalformedRange(_))));
        assert!(matches!(expand_values("2-4}"), Err(ConfigError::MalformedRange(_))));
        assert!(matches!(expand_values("{0-99999999}"), Err(ConfigError::MalformedRange(_))));
        assert_eq!(expand_values(""), Err(ConfigError::EmptyValue));
        assert_eq!(expand_values("1,,2"), Err(ConfigError::EmptyValue));
        assert_eq!(expand_values("{}"), Err(ConfigError::EmptyValue));
        assert_eq!(expand_values("{1,}"), Err(ConfigError::EmptyValue));
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("1G").unwrap(), 1_073_741_824);
        assert_eq!(parse_size("0").unwrap(), 0);
        assert_eq!(parse_size("512K").unwrap(), 524_288);
        assert_eq!(parse_size("3M").unwrap(), 3 * 1024 * 1024);
        assert!(matches!(parse_size("1T"), Err(ConfigError::MalformedSize(_))));
        assert!(matches!(parse_size("G"), Err(ConfigError::MalformedSize(_))));
        assert!(matches!(parse_size("-1"), Err(ConfigError::MalformedSize(_))));
    }

    #[test]
    fn reference_sweep_config() {
        let cfg = parse_config(REFERENCE_SWEEP).unwrap();
        assert_eq!(cfg.sections.len(), 8);
        assert_eq!(cfg.monitor.multiplicity, 4);
        assert_eq!(cfg.monitor.nb_processus, 8);
        assert!(cfg.monitor.need_gpu);
        assert_eq!(cfg.monitor.gpu_available, vec!["cuda:1", "cuda:2"]);
        assert_eq!(cfg.monitor.cache_size, 1 << 30);
        assert_eq!(cfg.process.lr, 1e-2);
        assert_eq!(cfg.process.epochs, 200);
        assert_eq!(cfg.process.pipeline_scheme, vec!["convolution", "readout", "mlp"]);
        let funnel = cfg.sections.iter().find(|s| s.section_name == "mlp_funnel").unwrap();
        assert_eq!(funnel.params.get("length").unwrap(), &ints(&[5, 6, 7, 8]));
        assert_eq!(funnel.key_template.as_deref(), Some("mlp_{class}"));
        let conv = cfg.sections.iter().find(|s| s.section_name == "convolution").unwrap();
        assert_eq!(conv.params.keys().collect::<Vec<_>>(), vec!["pooling", "nb_convolution"]);
        assert_eq!(conv.params.get("nb_convolution").unwrap(), &ints(&[3, 5, 8]));
    }

    #[test]
    fn minimal_config() {
        let text = "[MONITOR]\n[PROCESS]\npipeline_scheme = mlp\n[m]\ntype = mlp\nclass = mlp_brick\nlength = 2\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.sections.len(), 1);
        assert_eq!(cfg.monitor, MonitorParams::default());
    }

    #[test]
    fn validation_errors() {
        let missing_type = "[MONITOR]\n[PROCESS]\npipeline_scheme = mlp\n[m]\ntype = data\nclass = x\n";
        assert_eq!(
            parse_config(missing_type),
            Err(ConfigError::UnknownSchemeType("mlp".into()))
        );
        assert_eq!(
            parse_config("[PROCESS]\npipeline_scheme = a\n"),
            Err(ConfigError::MissingSection("MONITOR"))
        );
        assert_eq!(
            parse_config("[MONITOR]\n"),
            Err(ConfigError::MissingSection("PROCESS"))
        );
        let unknown = "[MONITOR]\nfoo = 1\n[PROCESS]\npipeline_scheme = m\n[m]\ntype = m\nclass = c\n";
        assert!(matches!(parse_config(unknown), Err(ConfigError::UnknownKey { line: 2, .. })));
        let short = "[MONITOR]\n[PROCESS]\nepochs = 3\npipeline_scheme = m\n[m]\ntype = m\nclass = c\n";
        assert!(matches!(parse_config(short), Err(ConfigError::InvalidValue { line: 3, .. })));
        let bad_syntax = "[MONITOR]\n[PROCESS]\npipeline_scheme = m\njunk\n";
        assert!(matches!(parse_config(bad_syntax), Err(ConfigError::SyntaxError { line: 4, .. })));
        let bad_range = "[MONITOR]\n[PROCESS]\npipeline_scheme = m\n[m]\ntype = m\nclass = c\nw = {4-2}\n";
        assert!(matches!(parse_config(bad_range), Err(ConfigError::InvalidValue { line: 7, .. })));
    }

    #[test]
    fn pipe_separated_scheme() {
        let text = "[MONITOR]\n[PROCESS]\ndata_scheme = a | b\n[x]\ntype = a\nclass = c\n[y]\ntype = b\nclass = c\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.process.data_scheme, vec!["a", "b"]);
    }

    #[test]
    fn reference_sweep_round_trips() {
        let cfg = parse_config(REFERENCE_SWEEP).unwrap();
        assert_eq!(parse_config(&cfg.to_ini()).unwrap(), cfg);
    }

    proptest! {
        #[test]
        fn range_yields_consecutive_integers(a in -1000i64..1000, len in 0i64..200) {
            let b = a + len;
            let vals = expand_values(&format!("{{{a}-{b}}}")).unwrap();
            prop_assert_eq!(vals.len() as i64, b - a + 1);
            for (i, v) in vals.iter().enumerate() {
                prop_assert_eq!(v, &Scalar::Int(a + i as i64));
            }
        }

        #[test]
        fn expansion_idempotent_on_scalars(xs in proptest::collection::vec(-1000i64..1000, 1..8)) {
            let raw = xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
            let once = expand_values(&raw).unwrap();
            let rendered = once.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ");
            prop_assert_eq!(expand_values(&rendered).unwrap(), once);
        }

        #[test]
        fn config_round_trip(
            lens in proptest::collection::vec(1i64..9, 1..4),
            style in "[a-z]{1,8}",
            lr in 1e-5f64..1.0,
            mult in 1usize..5,
        ) {
            prop_assume!(style != "true" && style != "false");
            let mut params = OrderedMap::new();
            params.insert("length", lens.iter().copied().map(Scalar::Int).collect());
            params.insert("style", vec![Scalar::Str(style)]);
            params.insert("rate", vec![Scalar::Real(lr)]);
            let cfg = ConfigSpec {
                monitor: MonitorParams { multiplicity: mult, ..MonitorParams::default() },
                process: ProcessParams {
                    lr,
                    pipeline_scheme: vec!["mlp".into()],
                    ..ProcessParams::default()
                },
                sections: vec![StageSection {
                    section_name: "m".into(),
                    stage_type: "mlp".into(),
                    class_name: "mlp_brick".into(),
                    path_to_class: String::new(),
                    key_template: Some("mlp_{class}".into()),
                    params,
                }],
            };
            prop_assert_eq!(parse_config(&cfg.to_ini()).unwrap(), cfg);
        }
    }
}
