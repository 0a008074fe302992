//! Built-in worker: executes one pipeline with the native trainer and speaks
//! the runner protocol over stdin/stdout.

use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::digest;
use crate::pipeline::{PipelineSpec, StageInstance};
use crate::protocol::{self, Command, FaultKind, RunCommand, WorkerEvent};
use crate::runner::cache::{CacheError, DataCache};
use crate::trainer::{
    gen_dataset, train, transform, Checkpoint, Dataset, DatasetParams, MlpKind, MlpModel, MlpShape, TrainError,
    TrainHyper, TrainState, TransformStyle,
};
use crate::value::{OrderedMap, Scalar};

pub const CURVE_FILE: &str = "curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Stage classes the built-in worker can execute.
pub const BUILTIN_CLASSES: [&str; 4] = ["dataset_generator", "transform", "mlp_funnel", "mlp_brick"];

pub fn is_builtin(class: &str) -> bool {
    BUILTIN_CLASSES.contains(&class)
}

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("stage `{section}`: {message}")]
    Stage { section: String, message: String },
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Protocol(#[from] protocol::ProtocolError),
}

fn stage_err(stage: &StageInstance, message: impl Into<String>) -> WorkerError {
    WorkerError::Stage {
        section: stage.section_name.clone(),
        message: message.into(),
    }
}

/// How a session ended when it did not fail with an error.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionEnd {
    Done { checkpoint: PathBuf, curve: PathBuf },
    /// Injected crash: the caller must stop without a terminal event.
    Crash,
}

fn as_usize(stage: &StageInstance, name: &str, v: &Scalar) -> Result<usize, WorkerError> {
    match v.as_i64() {
        Some(n) if n >= 1 => Ok(n as usize),
        _ => Err(stage_err(stage, format!("`{name}` must be a positive integer, got `{v}`"))),
    }
}

fn shape_params(stage: &StageInstance) -> Result<(usize, usize), WorkerError> {
    let (mut length, mut width) = (None, None);
    for (name, v) in stage.params.iter() {
        match name {
            "length" => length = Some(as_usize(stage, name, v)?),
            "width" => width = Some(as_usize(stage, name, v)?),
            other => return Err(stage_err(stage, format!("unknown parameter `{other}`"))),
        }
    }
    let length = length.ok_or_else(|| stage_err(stage, "missing parameter `length`"))?;
    Ok((length, width.unwrap_or(1)))
}

fn transform_style(stage: &StageInstance) -> Result<TransformStyle, WorkerError> {
    let mut style = None;
    for (name, v) in stage.params.iter() {
        match name {
            "style" => style = Some(TransformStyle::parse(&v.to_string())?),
            other => return Err(stage_err(stage, format!("unknown parameter `{other}`"))),
        }
    }
    style.ok_or_else(|| stage_err(stage, "missing parameter `style`"))
}

fn data_cache_key(stages: &[StageInstance], data_seed: u64) -> String {
    let configs = serde_json::to_vec(stages).expect("stages serialize");
    digest::hex_id(&[configs.as_slice(), &data_seed.to_le_bytes()].concat())
}

/// Runs the data stages in order, returning the dataset and one info map per
/// stage.
fn build_data(
    stages: &[StageInstance],
    data_seed: u64,
) -> Result<(Dataset, Vec<(String, Map<String, Value>)>), WorkerError> {
    let Some((first, rest)) = stages.split_first() else {
        return Err(WorkerError::Stage {
            section: "<data>".into(),
            message: "the built-in trainer needs a dataset_generator data stage".into(),
        });
    };
    if first.class_name != "dataset_generator" {
        return Err(stage_err(first, "the first data stage must be a dataset_generator"));
    }
    let params = DatasetParams::from_params(&first.params)?;
    let mut data = gen_dataset(&params, data_seed)?;
    let mut infos = Vec::new();
    let mut fields = Map::new();
    fields.insert("input_shape".into(), json!([params.data_size, data.d_in()]));
    fields.insert("output_shape".into(), json!([params.data_size, data.d_out()]));
    fields.insert("data_size".into(), json!(params.data_size));
    fields.insert("batch_size".into(), json!(params.batch_size));
    fields.insert("train_size".into(), json!(data.n_train));
    fields.insert("test_size".into(), json!(data.n_test()));
    infos.push((first.section_name.clone(), fields));
    for stage in rest {
        match stage.class_name.as_str() {
            "transform" => {
                let style = transform_style(stage)?;
                data = transform(&data, style);
                let mut f = Map::new();
                f.insert("style".into(), json!(style.as_str()));
                infos.push((stage.section_name.clone(), f));
            }
            other => return Err(stage_err(stage, format!("`{other}` is not a built-in data stage"))),
        }
    }
    Ok((data, infos))
}

fn batch_size_of(stages: &[StageInstance]) -> Result<usize, WorkerError> {
    match stages.first() {
        Some(s) => Ok(DatasetParams::from_params(&s.params)?.batch_size),
        None => Ok(DatasetParams::default().batch_size),
    }
}

/// Hidden-layer widths contributed by each model stage. Every stage but the
/// last tapers toward its own input width.
fn model_dims(stages: &[StageInstance], d_in: usize, d_out: usize) -> Result<(Vec<usize>, Vec<Vec<usize>>), WorkerError> {
    if stages.is_empty() {
        return Err(WorkerError::Stage {
            section: "<model>".into(),
            message: "the pipeline has no model stage".into(),
        });
    }
    let mut dims = vec![d_in];
    let mut per_stage = Vec::new();
    for (i, stage) in stages.iter().enumerate() {
        let kind = MlpKind::from_class(&stage.class_name)
            .ok_or_else(|| stage_err(stage, format!("`{}` is not a built-in model stage", stage.class_name)))?;
        let (length, width) = shape_params(stage)?;
        let fan_in = *dims.last().expect("dims non-empty");
        let target = if i + 1 == stages.len() { d_out } else { fan_in };
        let widths = MlpShape::new(kind, length, width, fan_in, target)?.hidden_widths();
        dims.extend(&widths);
        per_stage.push(widths);
    }
    dims.push(d_out);
    Ok((dims, per_stage))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkerError + '_ {
    move |source| WorkerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Executes one run command, reporting events through `emit`.
pub fn run_session(cmd: &RunCommand, mut emit: impl FnMut(WorkerEvent)) -> Result<SessionEnd, WorkerError> {
    crate::trainer::check_loss_name(&cmd.loss_function)?;
    if !(cmd.lr.is_finite() && cmd.lr >= 0.0) {
        return Err(TrainError::InvalidParam {
            name: "lr".into(),
            message: "must be a finite non-negative number".into(),
        }
        .into());
    }
    let p: &PipelineSpec = &cmd.pipeline;
    let data_seed = cmd.data_seed.unwrap_or(cmd.seed);
    let data_stages = p.data_stages();

    let (data, infos, cache_status) = match &cmd.cache {
        Some(c) => {
            let cache = DataCache::new(&c.dir, c.size);
            let key = data_cache_key(data_stages, data_seed);
            let mut infos = None;
            let fetched = cache.fetch_or_build(&key, || {
                build_data(data_stages, data_seed).map(|(d, i)| {
                    infos = Some(i);
                    d.to_bytes()
                })
            })??;
            let data = Dataset::from_bytes(&fetched.bytes).ok_or_else(|| WorkerError::Stage {
                section: "<data>".into(),
                message: format!("cached dataset {key} is corrupt"),
            })?;
            let infos = match infos {
                Some(i) => i,
                // A hit skips the stages, so their info is rebuilt from the parameters.
                None => build_data_infos(data_stages, &data)?,
            };
            (data, infos, Some(fetched.status.as_str()))
        }
        None => {
            let (d, i) = build_data(data_stages, data_seed)?;
            (d, i, None)
        }
    };
    let data_hash = data.content_hash();
    let n_data = infos.len();
    for (i, (stage, mut fields)) in infos.into_iter().enumerate() {
        if i + 1 == n_data {
            fields.insert("data_hash".into(), json!(data_hash));
            if let Some(s) = cache_status {
                fields.insert("cache".into(), json!(s));
            }
        }
        emit(WorkerEvent::Info { stage, fields });
    }

    let (dims, per_stage) = model_dims(p.model_stages(), data.d_in(), data.d_out())?;
    let (mut model, mut state) = match &cmd.resume_from {
        Some(path) => {
            let (m, s) = Checkpoint::load(path)?.restore()?;
            if m.dims != dims {
                return Err(TrainError::Checkpoint(format!(
                    "checkpoint layer dims {:?} differ from the pipeline's {:?}",
                    m.dims, dims
                ))
                .into());
            }
            (m, s)
        }
        None => {
            let m = MlpModel::he_uniform(dims.clone(), digest::sub_seed(cmd.seed, "init"));
            let s = TrainState::new(&m, digest::sub_seed(cmd.seed, "shuffle"));
            (m, s)
        }
    };
    let n_model = per_stage.len();
    for (i, (stage, widths)) in p.model_stages().iter().zip(per_stage).enumerate() {
        let mut fields = Map::new();
        fields.insert("hidden_widths".into(), json!(widths));
        if i + 1 == n_model {
            fields.insert("nb_params".into(), json!(model.count_params()));
            fields.insert("layer_dims".into(), json!(dims));
        }
        emit(WorkerEvent::Info {
            stage: stage.section_name.clone(),
            fields,
        });
    }

    let start = state.epochs_done();
    let mut epochs = cmd.epochs;
    let mut crash = false;
    let mut poison = None;
    if let Some(f) = cmd.fault {
        if f.epoch > start && f.epoch <= start + cmd.epochs {
            match f.kind {
                FaultKind::Nan => poison = Some(f.epoch),
                FaultKind::Crash => {
                    epochs = f.epoch - 1 - start;
                    crash = true;
                }
            }
        }
    }
    let hp = TrainHyper {
        epochs,
        lr: cmd.lr,
        batch_size: batch_size_of(data_stages)?,
        loss: cmd.loss_function.clone(),
        poison_epoch: poison,
    };
    train(&mut model, &data, &hp, &mut state, |e| {
        emit(WorkerEvent::Epoch {
            epoch: e.epoch,
            train_loss: e.train_loss,
            test_loss: e.test_loss,
        })
    })?;
    if crash {
        return Ok(SessionEnd::Crash);
    }

    let run_dir = cmd
        .run_dir
        .clone()
        .unwrap_or_else(|| p.process.run_files_path.join(format!("{}-{:016x}", p.hash, cmd.seed)));
    std::fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let curve = run_dir.join(CURVE_FILE);
    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    protocol::write_curve(&curve, &state.history, 1)?;
    Checkpoint::capture(&model, &state).save(&checkpoint).map_err(io_err(&checkpoint))?;
    Ok(SessionEnd::Done { checkpoint, curve })
}

/// Info maps for data stages whose output came from the cache.
fn build_data_infos(
    stages: &[StageInstance],
    data: &Dataset,
) -> Result<Vec<(String, Map<String, Value>)>, WorkerError> {
    let mut infos = Vec::new();
    for (i, stage) in stages.iter().enumerate() {
        let mut f = Map::new();
        if i == 0 {
            let params = DatasetParams::from_params(&stage.params)?;
            f.insert("input_shape".into(), json!([params.data_size, data.d_in()]));
            f.insert("output_shape".into(), json!([params.data_size, data.d_out()]));
            f.insert("data_size".into(), json!(params.data_size));
            f.insert("batch_size".into(), json!(params.batch_size));
            f.insert("train_size".into(), json!(data.n_train));
            f.insert("test_size".into(), json!(data.n_test()));
        } else {
            f.insert("style".into(), json!(transform_style(stage)?.as_str()));
        }
        infos.push((stage.section_name.clone(), f));
    }
    Ok(infos)
}

/// Reads one command from stdin, runs it and streams events to stdout.
/// Returns the process exit code.
pub fn serve_stdio() -> i32 {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut send = |ev: WorkerEvent| {
        let _ = writeln!(out, "{}", ev.to_line());
        let _ = out.flush();
    };
    let mut line = String::new();
    if let Err(e) = io::stdin().lock().read_line(&mut line) {
        send(WorkerEvent::Error {
            message: format!("cannot read command: {e}"),
        });
        return 1;
    }
    let cmd = match protocol::parse_command_line(&line) {
        Ok(Command::Run(cmd)) => cmd,
        Err(e) => {
            send(WorkerEvent::Error { message: e.to_string() });
            return 1;
        }
    };
    if let Ok(token) = std::env::var(protocol::RESOURCE_TOKEN_ENV) {
        log::debug!("holding resource token {token}");
    }
    let result = run_session(&cmd, &mut send);
    match result {
        Ok(SessionEnd::Done { checkpoint, curve }) => {
            send(WorkerEvent::Done { checkpoint, curve });
            0
        }
        Ok(SessionEnd::Crash) => {
            eprintln!("injected crash");
            101
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            send(WorkerEvent::Error { message: e.to_string() });
            1
        }
    }
}

/// Merges stage params into a flat `<section>.<param>` map, plus
/// `<section>.class`.
pub fn stage_param_fields(p: &PipelineSpec) -> OrderedMap<Scalar> {
    let mut out = OrderedMap::new();
    for s in &p.stages {
        out.insert(format!("{}.class", s.section_name), Scalar::Str(s.class_name.clone()));
        for (k, v) in s.params.iter() {
            out.insert(format!("{}.{}", s.section_name, k), v.clone());
        }
    }
    out
}
