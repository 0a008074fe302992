//! Execution of one run in a worker process.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process, Stdio};
use std::time::Instant;

use serde_json::{Map, Value};

use super::{Launcher, RunContext, PYTHON_ENV};
use crate::indicators::{compute_all_with, LossCurve};
use crate::pipeline::{pipeline_json, PipelineSpec};
use crate::protocol::{
    self, CacheSettings, Command, CurveRow, RunCommand, SessionValidator, WorkerEvent, RESOURCE_TOKEN_ENV,
};
use crate::store::{InfoValue, RunRecord, RunStatus};
use crate::worker::{is_builtin, stage_param_fields};

pub const LOG_FILE: &str = "worker.log";

/// A run ready to execute: fresh, or resuming a finished record.
#[derive(Debug, Clone)]
pub struct Job {
    pub pipeline: std::sync::Arc<PipelineSpec>,
    pub mult_index: usize,
    pub seed: u64,
    pub data_seed: u64,
    /// Epochs to train in this session.
    pub epochs: u32,
    pub resume: Option<Resume>,
}

#[derive(Debug, Clone)]
pub struct Resume {
    pub checkpoint: PathBuf,
    pub previous: RunRecord,
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub record: RunRecord,
    /// Info rows to store with the record.
    pub info: Vec<(String, InfoValue)>,
}

pub(crate) fn now_s() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Picks the program that executes `p`: the built-in worker when every stage
/// class is built in, otherwise the plugin named by the first other stage.
pub fn resolve_launcher(p: &PipelineSpec, ctx: &RunContext) -> Result<Launcher, String> {
    let Some(stage) = p.stages.iter().find(|s| !is_builtin(&s.class_name)) else {
        return Ok(ctx.worker.clone());
    };
    if stage.path_to_class.trim().is_empty() {
        return Err(format!(
            "stage resolution: class `{}` of stage `{}` is not built in and has no path_to_class",
            stage.class_name, stage.section_name
        ));
    }
    let path = std::path::absolute(Path::new(stage.path_to_class.trim()))
        .map_err(|e| format!("stage resolution: {}: {e}", stage.path_to_class))?;
    if !path.is_file() {
        return Err(format!(
            "stage resolution: class `{}` of stage `{}` is not built in and {} does not exist",
            stage.class_name,
            stage.section_name,
            path.display()
        ));
    }
    if path.extension().is_some_and(|e| e == "py") {
        let python = std::env::var_os(PYTHON_ENV).map(PathBuf::from).unwrap_or_else(|| "python3".into());
        Ok(Launcher {
            program: python,
            args: vec![path.to_string_lossy().into_owned()],
        })
    } else {
        Ok(Launcher {
            program: path,
            args: Vec::new(),
        })
    }
}

pub fn run_dir(p: &PipelineSpec, mult_index: usize, ctx: &RunContext) -> PathBuf {
    let root = ctx.run_root.clone().unwrap_or_else(|| p.process.run_files_path.clone());
    let dir = root.join(&p.hash).join(mult_index.to_string());
    std::path::absolute(&dir).unwrap_or(dir)
}

/// What a worker session produced, before interpretation.
#[derive(Debug, Default)]
struct Session {
    info: Map<String, Value>,
    epochs: Vec<CurveRow>,
    terminal: Option<WorkerEvent>,
    protocol_error: Option<String>,
    exit: Option<std::process::ExitStatus>,
}

fn kill(child: &mut Child) {
    let _ = child.kill();
    let _ = child.wait();
}

fn run_worker(
    launcher: &Launcher,
    cmd: &RunCommand,
    first_epoch: u32,
    token: Option<&str>,
    log_path: &Path,
) -> io::Result<Session> {
    let log = File::create(log_path)?;
    let mut proc = Process::new(&launcher.program);
    proc.args(&launcher.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::from(log));
    match token {
        Some(t) => proc.env(RESOURCE_TOKEN_ENV, t),
        None => proc.env_remove(RESOURCE_TOKEN_ENV),
    };
    let mut child = proc.spawn()?;
    let line = protocol::command_line(&Command::Run(cmd.clone()));
    {
        let mut stdin = child.stdin.take().expect("stdin piped");
        // A worker that exits before reading is reported through its output.
        let _ = writeln!(stdin, "{line}");
    }
    let mut validator = SessionValidator::new(first_epoch, cmd.epochs);
    let mut session = Session::default();
    let stdout = child.stdout.take().expect("stdout piped");
    for line in BufReader::new(stdout).lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                session.protocol_error = Some(format!("unreadable worker output: {e}"));
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let ev = match protocol::parse_event_line(&line) {
            Ok(ev) => ev,
            Err(e) => {
                session.protocol_error = Some(e.to_string());
                break;
            }
        };
        let check = validator.accept(&ev);
        if let Err(e) = check {
            session.protocol_error = Some(e.to_string());
            break;
        }
        match ev {
            WorkerEvent::Info { fields, .. } => session.info.extend(fields),
            WorkerEvent::Epoch {
                epoch,
                train_loss,
                test_loss,
            } => session.epochs.push(CurveRow {
                epoch,
                train_loss,
                test_loss,
            }),
            terminal => session.terminal = Some(terminal),
        }
    }
    if session.protocol_error.is_none() && session.terminal.is_some() {
        if let Err(e) = validator.finish() {
            session.protocol_error = Some(e.to_string());
        }
    }
    if session.protocol_error.is_some() {
        kill(&mut child);
    } else {
        session.exit = Some(child.wait()?);
    }
    Ok(session)
}

fn json_info(info: &Map<String, Value>) -> Vec<(String, InfoValue)> {
    info.iter().map(|(k, v)| (k.clone(), InfoValue::from_json(v))).collect()
}

fn load_full_curve(curve: &Path, previous: Option<&[CurveRow]>) -> Result<Vec<CurveRow>, String> {
    let mut rows = protocol::read_curve(curve).map_err(|e| e.to_string())?;
    if let (Some(first), Some(old)) = (rows.first(), previous) {
        if first.epoch != 1 {
            // The worker wrote only this session's epochs.
            if old.last().map(|o| o.epoch + 1) != Some(first.epoch) {
                return Err(format!(
                    "curve resumes at epoch {} but the previous curve has {} rows",
                    first.epoch,
                    old.len()
                ));
            }
            let mut full = old.to_vec();
            full.extend(rows);
            rows = full;
            protocol::write_curve(curve, &rows_curve(&rows), 1).map_err(|e| e.to_string())?;
        }
    }
    if rows.first().is_some_and(|r| r.epoch != 1) {
        return Err("curve does not start at epoch 1".into());
    }
    Ok(rows)
}

fn rows_curve(rows: &[CurveRow]) -> LossCurve {
    protocol::rows_to_curve(rows)
}

/// Runs `job` to completion. Failures are reported in the returned record,
/// never as errors.
pub fn execute(job: &Job, ctx: &RunContext, cache: Option<&CacheSettings>, token: Option<&str>) -> JobResult {
    let p = &*job.pipeline;
    let started_at = now_s();
    let start = Instant::now();
    let mut record = match &job.resume {
        Some(r) => r.previous.clone(),
        None => {
            let mut r = RunRecord::pending(&p.hash, &p.label, job.mult_index, p.process.epochs, pipeline_json(p));
            r.seed = job.seed;
            r.data_seed = job.data_seed;
            r
        }
    };
    let previous_runtime = job
        .resume
        .as_ref()
        .and_then(|r| r.previous.indicators.map(|i| i.runtime_s))
        .unwrap_or(0.0);
    if job.resume.is_none() {
        record.started_at = Some(started_at);
    }
    record.resource_token = token.map(str::to_string);
    let mut info: Vec<(String, InfoValue)> = stage_param_fields(p)
        .iter()
        .map(|(k, v)| (k.to_string(), InfoValue::text(v.to_string())))
        .collect();

    let fail = |mut record: RunRecord, reason: String, info: Vec<(String, InfoValue)>| {
        log::warn!("run {} failed: {reason}", record.run_id);
        record.status = RunStatus::Failed;
        record.indicators = None;
        record.failure_reason = Some(reason);
        record.finished_at = Some(now_s());
        JobResult { record, info }
    };

    // Read before the worker can overwrite it.
    let previous_rows = match &job.resume {
        Some(r) => match r.previous.curve_path.as_deref().map(protocol::read_curve) {
            Some(Ok(rows)) => Some(rows),
            Some(Err(e)) => return fail(record, format!("previous curve: {e}"), info),
            None => return fail(record, "previous curve: missing path".into(), info),
        },
        None => None,
    };
    let launcher = match resolve_launcher(p, ctx) {
        Ok(l) => l,
        Err(reason) => return fail(record, reason, info),
    };
    let dir = run_dir(p, job.mult_index, ctx);
    if let Err(e) = fs::create_dir_all(&dir) {
        return fail(record, format!("cannot create {}: {e}", dir.display()), info);
    }
    let log_path = dir.join(LOG_FILE);
    record.log_path = Some(log_path.clone());
    let cmd = RunCommand {
        pipeline: p.clone(),
        epochs: job.epochs,
        lr: p.process.lr,
        loss_function: p.process.loss_function.clone(),
        seed: job.seed,
        resume_from: job.resume.as_ref().map(|r| r.checkpoint.clone()),
        resource_token: token.map(str::to_string),
        run_dir: Some(dir.clone()),
        data_seed: Some(job.data_seed),
        cache: cache.cloned(),
        fault: ctx.faults.get(&record.run_id).copied(),
    };
    let first_epoch = job.resume.as_ref().map_or(0, |r| r.previous.epochs) + 1;
    let session = match run_worker(&launcher, &cmd, first_epoch, token, &log_path) {
        Ok(s) => s,
        Err(e) => {
            return fail(
                record,
                format!("cannot start worker {}: {e}", launcher.program.display()),
                info,
            )
        }
    };
    info.extend(json_info(&session.info));
    if let Some(n) = session.info.get("nb_params").and_then(Value::as_u64) {
        record.nb_params = Some(n);
    }
    if let Some(e) = session.protocol_error {
        return fail(record, format!("protocol error: {e}"), info);
    }
    let (checkpoint, curve) = match session.terminal {
        Some(WorkerEvent::Done { checkpoint, curve }) => (checkpoint, curve),
        Some(WorkerEvent::Error { message }) => return fail(record, message, info),
        _ => {
            let status = session
                .exit
                .map(|s| s.to_string())
                .unwrap_or_else(|| "unknown status".into());
            return fail(record, format!("worker exited ({status}) without a terminal event"), info);
        }
    };
    let rows = match load_full_curve(&curve, previous_rows.as_deref()) {
        Ok(r) => r,
        Err(e) => return fail(record, format!("curve: {e}"), info),
    };
    let expected = job.resume.as_ref().map_or(0, |r| r.previous.epochs) + job.epochs;
    if rows.len() != expected as usize {
        return fail(
            record,
            format!("curve has {} epochs, expected {expected}", rows.len()),
            info,
        );
    }
    let tail = &rows[rows.len() - session.epochs.len()..];
    let same_bits = |a: f64, b: f64| a.to_bits() == b.to_bits();
    if tail
        .iter()
        .zip(&session.epochs)
        .any(|(c, s)| c.epoch != s.epoch || !same_bits(c.train_loss, s.train_loss) || !same_bits(c.test_loss, s.test_loss))
    {
        return fail(record, "curve file disagrees with the streamed epochs".into(), info);
    }
    let runtime = previous_runtime + start.elapsed().as_secs_f64();
    let indicators = match compute_all_with(&rows_curve(&rows), runtime, ctx.slope_convention) {
        Ok(i) => i,
        Err(e) => return fail(record, format!("indicators: {e}"), info),
    };
    record.status = RunStatus::Done;
    record.epochs = expected;
    record.indicators = Some(indicators);
    record.failure_reason = None;
    record.curve_path = Some(curve);
    record.checkpoint_path = Some(checkpoint);
    record.finished_at = Some(now_s());
    JobResult { record, info }
}
