//! Bounded pool of isolated worker processes, with resource tokens, a shared
//! dataset cache, a single database writer and the rerun mechanism.

pub mod cache;
mod exec;

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

pub use exec::{execute, resolve_launcher, run_dir, Job, JobResult, Resume, LOG_FILE};

use crate::config::MonitorParams;
use crate::digest;
use crate::indicators::SlopeConvention;
use crate::pipeline::{pipeline_json, PipelineSpec};
use crate::protocol::{CacheSettings, FaultInjection};
use crate::store::{RunRecord, RunStatus, Store, StoreError};

/// Overrides the interpreter used for `.py` plugins (default `python3`).
pub const PYTHON_ENV: &str = "GRIDRUN_PYTHON";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("need_gpu is set but gpu_available lists no tokens")]
    NoTokens,
    #[error("corrupt pipeline stored for run {run_id}: {message}")]
    CorruptPipeline { run_id: String, message: String },
}

/// Program plus leading arguments that starts a worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Launcher {
    pub program: PathBuf,
    pub args: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunContext {
    pub global_seed: u64,
    /// Starts the built-in worker.
    pub worker: Launcher,
    /// Replaces every pipeline's `run_files_path` when set.
    pub run_root: Option<PathBuf>,
    /// Injected faults keyed by run id.
    pub faults: HashMap<String, FaultInjection>,
    pub slope_convention: SlopeConvention,
}

impl RunContext {
    pub fn new(global_seed: u64, worker: Launcher) -> Self {
        RunContext {
            global_seed,
            worker,
            run_root: None,
            faults: HashMap::new(),
            slope_convention: SlopeConvention::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub done: usize,
    pub failed: usize,
    /// Runs already done before this call; included in `done`.
    pub skipped: usize,
    /// Largest number of simultaneously executing runs observed.
    pub max_concurrency: usize,
    pub failures: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RerunSummary {
    pub selected: usize,
    pub resumed: usize,
    /// Zero-epoch reruns, which only touch the timestamp.
    pub touched: usize,
    /// Selected runs that are not done and were left alone.
    pub not_done: Vec<String>,
    /// Runs whose resume failed; their records are unchanged.
    pub failures: Vec<(String, String)>,
}

fn cache_settings(monitor: &MonitorParams) -> Option<CacheSettings> {
    (monitor.cache_size > 0).then(|| CacheSettings {
        dir: std::path::absolute(&monitor.cache_database_path).unwrap_or(monitor.cache_database_path.clone()),
        size: monitor.cache_size,
    })
}

/// Worker slots: one per concurrent run, each with its token when tokens
/// are required.
fn slots(monitor: &MonitorParams) -> Result<Vec<Option<String>>, RunnerError> {
    let n = monitor.nb_processus.max(1);
    if monitor.need_gpu {
        if monitor.gpu_available.is_empty() {
            return Err(RunnerError::NoTokens);
        }
        Ok(monitor.gpu_available.iter().take(n).cloned().map(Some).collect())
    } else {
        Ok(vec![None; n])
    }
}

enum PoolMsg {
    Started { run_id: String, at: f64, token: Option<String> },
    Finished(Box<JobResult>),
}

/// Runs `jobs` on `slots.len()` threads, each driving one worker process at
/// a time. `on_msg` runs on the calling thread, which is the only one that
/// touches the database. Returns the peak concurrency.
fn run_pool(
    jobs: Vec<Job>,
    slots: Vec<Option<String>>,
    ctx: &RunContext,
    cache: Option<&CacheSettings>,
    mut on_msg: impl FnMut(PoolMsg),
) -> usize {
    let queue = Mutex::new(VecDeque::from(jobs));
    let running = AtomicUsize::new(0);
    let peak = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for token in slots {
            let tx = tx.clone();
            let (queue, running, peak) = (&queue, &running, &peak);
            scope.spawn(move || loop {
                let Some(job) = queue.lock().unwrap().pop_front() else {
                    break;
                };
                let run_id = crate::store::run_id(&job.pipeline.hash, job.mult_index);
                let now = running.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let _ = tx.send(PoolMsg::Started {
                    run_id,
                    at: exec::now_s(),
                    token: token.clone(),
                });
                let result = execute(&job, ctx, cache, token.as_deref());
                running.fetch_sub(1, Ordering::SeqCst);
                let _ = tx.send(PoolMsg::Finished(Box::new(result)));
            });
        }
        drop(tx);
        for msg in rx {
            on_msg(msg);
        }
    });
    peak.load(Ordering::SeqCst)
}

/// Executes every pipeline `monitor.multiplicity` times. Runs already done
/// in the store are skipped; everything else (new, pending, failed or
/// interrupted) is executed.
pub fn schedule(
    pipelines: &[PipelineSpec],
    monitor: &MonitorParams,
    store: &mut Store,
    ctx: &RunContext,
) -> Result<RunSummary, RunnerError> {
    let slots = slots(monitor)?;
    let mut summary = RunSummary::default();
    let mut jobs = Vec::new();
    let mut pending = Vec::new();
    let mut records: HashMap<String, RunRecord> = HashMap::new();
    for p in pipelines {
        let shared = Arc::new(p.clone());
        let json = pipeline_json(p);
        let keys = p.keys();
        for mult_index in 0..monitor.multiplicity.max(1) {
            let id = crate::store::run_id(&p.hash, mult_index);
            if let Some(existing) = store.get_run(&id)? {
                if existing.status == RunStatus::Done {
                    summary.skipped += 1;
                    summary.done += 1;
                    continue;
                }
            }
            let mut r = RunRecord::pending(&p.hash, &p.label, mult_index, p.process.epochs, json.clone());
            r.seed = digest::run_seed(ctx.global_seed, &p.hash, mult_index);
            r.data_seed = digest::data_seed(ctx.global_seed, &p.hash);
            jobs.push(Job {
                pipeline: shared.clone(),
                mult_index,
                seed: r.seed,
                data_seed: r.data_seed,
                epochs: p.process.epochs,
                resume: None,
            });
            pending.push((r.clone(), keys.clone()));
            records.insert(id, r);
        }
    }
    store.insert_pending(&pending)?;
    log::info!(
        "scheduling {} runs on {} slot(s), {} already done",
        jobs.len(),
        slots.len(),
        summary.skipped
    );
    let cache = cache_settings(monitor);
    let mut write_error = None;
    let peak = run_pool(jobs, slots, ctx, cache.as_ref(), |msg| {
        let res = match msg {
            PoolMsg::Started { run_id, at, token } => match records.get_mut(&run_id) {
                Some(r) => {
                    r.status = RunStatus::Running;
                    r.started_at = Some(at);
                    r.resource_token = token;
                    store.update_run(r)
                }
                None => Ok(()),
            },
            PoolMsg::Finished(result) => {
                let JobResult { mut record, info } = *result;
                if let Some(r) = records.get(&record.run_id) {
                    record.started_at = r.started_at;
                }
                match record.status {
                    RunStatus::Done => summary.done += 1,
                    _ => {
                        summary.failed += 1;
                        summary
                            .failures
                            .push((record.run_id.clone(), record.failure_reason.clone().unwrap_or_default()));
                    }
                }
                let keys = record_keys(&record);
                store.upsert_run(&record, &keys, &info)
            }
        };
        if let Err(e) = res {
            log::error!("database write failed: {e}");
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(e.into());
    }
    summary.max_concurrency = peak;
    summary.failures.sort();
    Ok(summary)
}

fn record_keys(r: &RunRecord) -> BTreeSet<String> {
    serde_json::from_str::<PipelineSpec>(&r.pipeline_json)
        .map(|p| p.keys())
        .unwrap_or_default()
}

/// Continues the done runs matched by `selection` for `extra_epochs` more
/// epochs, updating their records in place.
pub fn rerun(
    store: &mut Store,
    selection: &str,
    extra_epochs: u32,
    monitor: &MonitorParams,
    ctx: &RunContext,
) -> Result<RerunSummary, RunnerError> {
    let selected = store.query_runs(selection)?;
    let mut summary = RerunSummary {
        selected: selected.len(),
        ..RerunSummary::default()
    };
    let mut jobs = Vec::new();
    for r in selected {
        if r.status != RunStatus::Done {
            summary.not_done.push(r.run_id);
            continue;
        }
        if extra_epochs == 0 {
            let mut r = r;
            r.finished_at = Some(exec::now_s());
            store.update_run(&r)?;
            summary.touched += 1;
            continue;
        }
        let checkpoint = match &r.checkpoint_path {
            Some(c) if c.is_file() => c.clone(),
            other => {
                let where_ = other.as_ref().map(|c| c.display().to_string()).unwrap_or("none recorded".into());
                summary
                    .failures
                    .push((r.run_id.clone(), format!("checkpoint missing: {where_}")));
                continue;
            }
        };
        let pipeline: PipelineSpec =
            serde_json::from_str(&r.pipeline_json).map_err(|e| RunnerError::CorruptPipeline {
                run_id: r.run_id.clone(),
                message: e.to_string(),
            })?;
        jobs.push(Job {
            pipeline: Arc::new(pipeline),
            mult_index: r.mult_index,
            seed: r.seed,
            data_seed: r.data_seed,
            epochs: extra_epochs,
            resume: Some(Resume {
                checkpoint,
                previous: r,
            }),
        });
    }
    let cache = cache_settings(monitor);
    let mut write_error = None;
    run_pool(jobs, slots(monitor)?, ctx, cache.as_ref(), |msg| {
        let PoolMsg::Finished(result) = msg else { return };
        let JobResult { record, info } = *result;
        if record.status != RunStatus::Done {
            summary
                .failures
                .push((record.run_id.clone(), record.failure_reason.unwrap_or_default()));
            return;
        }
        summary.resumed += 1;
        let res = store.update_run(&record).and_then(|_| store.merge_info(&record.run_id, &info));
        if let Err(e) = res {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(e.into());
    }
    summary.failures.sort();
    summary.not_done.sort();
    Ok(summary)
}
