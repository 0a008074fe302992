//! Expansion of a configuration into concrete pipelines, their labels, keys,
//! content hashes and on-disk JSON form.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigSpec, ProcessParams, StageSection};
use crate::digest;
use crate::value::{OrderedMap, Scalar};

pub const DEFAULT_PIPELINE_LIMIT: u128 = 1_000_000;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration expands to {count} pipelines, above the limit of {limit}")]
    ExplosionGuard { count: u128, limit: u128 },
    #[error("key template `{template}` references unknown placeholder `{name}`")]
    UnknownPlaceholder { template: String, name: String },
    #[error("pipelines {0} collide on hash")]
    HashCollision(String),
    #[error("corrupt pipeline file {path}: {reason}")]
    CorruptPipelineFile { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInstance {
    #[serde(rename = "section")]
    pub section_name: String,
    #[serde(rename = "type")]
    pub stage_type: String,
    #[serde(rename = "class")]
    pub class_name: String,
    #[serde(rename = "path")]
    pub path_to_class: String,
    pub key: Option<String>,
    pub params: OrderedMap<Scalar>,
}

impl StageInstance {
    /// `section(v1,v2,...)` with every parameter in declaration order.
    pub fn label(&self) -> String {
        let values: Vec<String> = self.params.values().map(Scalar::to_string).collect();
        format!("{}({})", self.section_name, values.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub hash: String,
    pub label: String,
    pub process: ProcessParams,
    pub stages: Vec<StageInstance>,
}

#[derive(Serialize)]
struct HashedContent<'a> {
    process: &'a ProcessParams,
    stages: &'a [StageInstance],
}

impl PipelineSpec {
    /// Builds a pipeline from its stages, deriving label and hash.
    pub fn new(process: ProcessParams, stages: Vec<StageInstance>) -> Self {
        let label = label_of(&stages);
        let hash = content_hash(&process, &stages);
        PipelineSpec {
            hash,
            label,
            process,
            stages,
        }
    }

    pub fn keys(&self) -> BTreeSet<String> {
        self.stages.iter().filter_map(|s| s.key.clone()).collect()
    }

    pub fn data_stages(&self) -> &[StageInstance] {
        let n = self.process.data_scheme.len().min(self.stages.len());
        &self.stages[..n]
    }

    pub fn model_stages(&self) -> &[StageInstance] {
        let n = self.process.data_scheme.len().min(self.stages.len());
        &self.stages[n..]
    }

    /// Recomputes the hash from content; used to detect tampering.
    pub fn recompute_hash(&self) -> String {
        content_hash(&self.process, &self.stages)
    }
}

pub fn pipeline_label(p: &PipelineSpec) -> String {
    label_of(&p.stages)
}

fn label_of(stages: &[StageInstance]) -> String {
    stages
        .iter()
        .map(StageInstance::label)
        .collect::<Vec<_>>()
        .join("|")
}

/// SHA-256 of the canonical JSON (object keys sorted, stage order kept).
fn content_hash(process: &ProcessParams, stages: &[StageInstance]) -> String {
    // `serde_json::Value` objects are sorted maps, which canonicalizes key order.
    let value = serde_json::to_value(HashedContent { process, stages })
        .expect("pipeline content is always serializable");
    digest::hex_id(value.to_string().as_bytes())
}

/// Substitutes `{class}`, `{type}`, `{section}` and `{param}` placeholders.
pub fn render_key(template: &str, stage: &StageInstance) -> Result<String, PipelineError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            out.push_str(&rest[open..]);
            return Ok(out);
        };
        let name = &after[..close];
        let value = match name {
            "class" => stage.class_name.clone(),
            "type" => stage.stage_type.clone(),
            "section" => stage.section_name.clone(),
            param => stage
                .params
                .get(param)
                .map(Scalar::to_string)
                .ok_or_else(|| PipelineError::UnknownPlaceholder {
                    template: template.to_string(),
                    name: param.to_string(),
                })?,
        };
        out.push_str(&value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Every concrete parameter assignment of a section, row-major over the
/// parameters in declaration order (the last parameter varies fastest).
fn section_instances(section: &StageSection) -> Result<Vec<StageInstance>, PipelineError> {
    let names: Vec<&str> = section.params.keys().collect();
    let lists: Vec<&Vec<Scalar>> = section.params.values().collect();
    let mut out = Vec::new();
    let mut idx = vec![0usize; lists.len()];
    loop {
        let params: OrderedMap<Scalar> = names
            .iter()
            .zip(&lists)
            .zip(&idx)
            .map(|((n, l), &i)| (n.to_string(), l[i].clone()))
            .collect();
        let mut stage = StageInstance {
            section_name: section.section_name.clone(),
            stage_type: section.stage_type.clone(),
            class_name: section.class_name.clone(),
            path_to_class: section.path_to_class.clone(),
            key: None,
            params,
        };
        if let Some(t) = &section.key_template {
            stage.key = Some(render_key(t, &stage)?);
        }
        out.push(stage);
        // Odometer increment.
        let mut pos = lists.len();
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < lists[pos].len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Closed-form number of pipelines: product over slots of the summed
/// section combinations for that slot's type.
pub fn pipeline_count(cfg: &ConfigSpec) -> u128 {
    cfg.process
        .slots()
        .map(|slot| cfg.sections_of_type(slot).map(StageSection::combinations).sum::<u128>())
        .fold(1u128, |acc, n| acc.saturating_mul(n))
}

pub fn generate_pipelines(cfg: &ConfigSpec) -> Result<Vec<PipelineSpec>, PipelineError> {
    generate_pipelines_with_limit(cfg, DEFAULT_PIPELINE_LIMIT)
}

pub fn generate_pipelines_with_limit(
    cfg: &ConfigSpec,
    limit: u128,
) -> Result<Vec<PipelineSpec>, PipelineError> {
    let count = pipeline_count(cfg);
    if count > limit {
        return Err(PipelineError::ExplosionGuard { count, limit });
    }
    let mut alternatives: Vec<Vec<StageInstance>> = Vec::new();
    for slot in cfg.process.slots() {
        let mut alts = Vec::new();
        for section in cfg.sections_of_type(slot) {
            alts.extend(section_instances(section)?);
        }
        alternatives.push(alts);
    }
    let mut out = Vec::with_capacity(count as usize);
    if alternatives.iter().any(Vec::is_empty) {
        return Ok(out);
    }
    let mut idx = vec![0usize; alternatives.len()];
    'outer: loop {
        let stages = alternatives
            .iter()
            .zip(&idx)
            .map(|(alts, &i)| alts[i].clone())
            .collect();
        out.push(PipelineSpec::new(cfg.process.clone(), stages));
        let mut pos = alternatives.len();
        loop {
            if pos == 0 {
                break 'outer;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < alternatives[pos].len() {
                break;
            }
            idx[pos] = 0;
        }
    }
    let mut seen = HashSet::with_capacity(out.len());
    for p in &out {
        if !seen.insert(p.hash.as_str()) {
            return Err(PipelineError::HashCollision(p.hash.clone()));
        }
    }
    Ok(out)
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

pub fn pipeline_json(p: &PipelineSpec) -> String {
    serde_json::to_string_pretty(p).expect("pipeline is always serializable")
}

/// Writes one `<hash>.json` per pipeline plus `manifest.json` (the ordered
/// hash list). Returns the manifest.
pub fn persist_pipelines(dir: &Path, ps: &[PipelineSpec]) -> Result<Vec<String>, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Vec::with_capacity(ps.len());
    for p in ps {
        let path = dir.join(format!("{}.json", p.hash));
        let mut text = pipeline_json(p);
        text.push('\n');
        write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
        manifest.push(p.hash.clone());
    }
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("string list serializes");
    text.push('\n');
    write_atomic(&path, text.as_bytes()).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn load_pipeline_file(path: &Path) -> Result<PipelineSpec, PipelineError> {
    let corrupt = |reason: String| PipelineError::CorruptPipelineFile {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let p: PipelineSpec = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let actual = p.recompute_hash();
    if actual != p.hash {
        return Err(corrupt(format!("stored hash {} but content hashes to {actual}", p.hash)));
    }
    if p.label != pipeline_label(&p) {
        return Err(corrupt(format!("label `{}` does not match its stages", p.label)));
    }
    Ok(p)
}

pub fn load_pipelines(dir: &Path) -> Result<Vec<PipelineSpec>, PipelineError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Vec<String> =
        serde_json::from_str(&text).map_err(|e| PipelineError::CorruptPipelineFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    manifest
        .iter()
        .map(|hash| {
            let file = dir.join(format!("{hash}.json"));
            let p = load_pipeline_file(&file)?;
            if &p.hash != hash {
                return Err(PipelineError::CorruptPipelineFile {
                    path: file,
                    reason: format!("manifest lists {hash} but file holds {}", p.hash),
                });
            }
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    const REFERENCE_SWEEP: &str = include_str!("../tests/data/reference_sweep.ini");

    fn funnel_config() -> ConfigSpec {
        parse_config(
            "[MONITOR]\n[PROCESS]\npipeline_scheme = mlp\n\
             [mlp_funnel]\ntype = mlp\nclass = mlp_funnel\npath_to_class = ./mosaic/share/mlp.py\n\
             length = 4\nwidth = {2-4},8\n",
        )
        .unwrap()
    }

    fn stage(section: &str, params: &[(&str, Scalar)]) -> StageInstance {
        StageInstance {
            section_name: section.into(),
            stage_type: "t".into(),
            class_name: section.into(),
            path_to_class: String::new(),
            key: None,
            params: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    #[test]
    fn funnel_family_labels() {
        let ps = generate_pipelines(&funnel_config()).unwrap();
        let labels: Vec<_> = ps.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(
            labels,
            ["mlp_funnel(4,2)", "mlp_funnel(4,3)", "mlp_funnel(4,4)", "mlp_funnel(4,8)"]
        );
    }

    #[test]
    fn label_rules() {
        assert_eq!(stage("readout_1", &[]).label(), "readout_1()");
        let p = PipelineSpec::new(
            ProcessParams::default(),
            vec![
                stage("convolution", &[("pooling", Scalar::Bool(true)), ("n", Scalar::Int(3))]),
                stage("mlp_brick", &[("length", Scalar::Int(5)), ("width", Scalar::Int(2))]),
            ],
        );
        assert_eq!(p.label, "convolution(True,3)|mlp_brick(5,2)");
        assert_eq!(pipeline_label(&p), p.label);
    }

    #[test]
    fn key_rendering() {
        let s = StageInstance {
            class_name: "mlp_funnel".into(),
            ..stage("mlp_funnel", &[("width", Scalar::Int(8))])
        };
        assert_eq!(render_key("mlp_{class}", &s).unwrap(), "mlp_mlp_funnel");
        assert_eq!(render_key("plain", &s).unwrap(), "plain");
        assert_eq!(render_key("w{width}", &s).unwrap(), "w8");
        assert!(matches!(
            render_key("{depth}", &s),
            Err(PipelineError::UnknownPlaceholder { .. })
        ));
    }

    #[test]
    fn single_scalar_section() {
        let cfg = parse_config("[MONITOR]\n[PROCESS]\npipeline_scheme = m\n[m]\ntype = m\nclass = c\na = 1\nb = x\n")
            .unwrap();
        assert_eq!(generate_pipelines(&cfg).unwrap().len(), 1);
    }

    #[test]
    fn reference_sweep_count_and_order() {
        let cfg = parse_config(REFERENCE_SWEEP).unwrap();
        assert_eq!(pipeline_count(&cfg), 576);
        let ps = generate_pipelines(&cfg).unwrap();
        assert_eq!(ps.len(), 576);
        // Last slot varies fastest; same-type sections are alternatives.
        assert!(ps[0].label.ends_with("|readout_1()|mlp_funnel(5,2)"));
        assert!(ps[1].label.ends_with("|readout_1()|mlp_funnel(5,3)"));
        assert!(ps[12].label.ends_with("|readout_1()|mlp_brick(5,2)"));
        assert!(ps[24].label.ends_with("|readout_2()|mlp_funnel(5,2)"));
        let keys = ps[0].keys();
        assert!(keys.contains("mlp_mlp_funnel"));
        assert!(keys.contains("data_dataset_generator"));
        assert_eq!(ps[0].data_stages().len(), 3);
        assert_eq!(ps[0].model_stages().len(), 3);
    }

    #[test]
    fn explosion_guard() {
        let cfg = parse_config(REFERENCE_SWEEP).unwrap();
        assert!(matches!(
            generate_pipelines_with_limit(&cfg, 100),
            Err(PipelineError::ExplosionGuard { count: 576, limit: 100 })
        ));
    }

    #[test]
    fn hash_is_stable_under_reserialization() {
        let ps = generate_pipelines(&funnel_config()).unwrap();
        for p in &ps {
            let back: PipelineSpec = serde_json::from_str(&pipeline_json(p)).unwrap();
            assert_eq!(back.recompute_hash(), p.hash);
            assert_eq!(&back, p);
        }
    }

    #[test]
    fn deterministic_generation() {
        let cfg = parse_config(REFERENCE_SWEEP).unwrap();
        let a: Vec<String> = generate_pipelines(&cfg).unwrap().iter().map(pipeline_json).collect();
        let b: Vec<String> = generate_pipelines(&cfg).unwrap().iter().map(pipeline_json).collect();
        assert_eq!(a, b);
    }
}
