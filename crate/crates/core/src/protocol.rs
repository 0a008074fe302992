//! Runner/worker wire protocol (line-delimited JSON over the worker's stdin
//! and stdout) and the curve CSV file format.
//!
//! The parent writes a single `{"cmd":"run",...}` line. The worker answers
//! with `info` events (one per stage), one `epoch` event per trained epoch and
//! exactly one terminal `done` or `error` event.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::indicators::LossCurve;
use crate::pipeline::PipelineSpec;

/// Environment variable through which a worker receives its resource token.
pub const RESOURCE_TOKEN_ENV: &str = "GRIDRUN_RESOURCE_TOKEN";

pub const CURVE_HEADER: &str = "epoch,train_loss,test_loss";

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unexpected event: {0}")]
    Sequence(String),
    #[error("malformed curve file {path}: {reason}")]
    Curve { path: PathBuf, reason: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Dataset cache location handed to workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSettings {
    pub dir: PathBuf,
    pub size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Corrupt the parameters so the loss becomes non-finite.
    Nan,
    /// Exit abruptly without a terminal event.
    Crash,
}

/// Test hook: makes a worker fail at a given (absolute) epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInjection {
    pub kind: FaultKind,
    pub epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCommand {
    pub pipeline: PipelineSpec,
    /// Epochs to train in this session (additional epochs when resuming).
    pub epochs: u32,
    pub lr: f64,
    pub loss_function: String,
    pub seed: u64,
    pub resume_from: Option<PathBuf>,
    pub resource_token: Option<String>,
    /// Directory for the curve, checkpoint and other run files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    /// Dataset seed shared by all repetitions of a pipeline; workers fall
    /// back to `seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<CacheSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultInjection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    Run(RunCommand),
}

fn nullable_f64<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    // Non-finite floats have no JSON form; serializers emit `null` for them.
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkerEvent {
    Info {
        stage: String,
        fields: serde_json::Map<String, serde_json::Value>,
    },
    Epoch {
        epoch: u32,
        #[serde(deserialize_with = "nullable_f64")]
        train_loss: f64,
        #[serde(deserialize_with = "nullable_f64")]
        test_loss: f64,
    },
    Done {
        checkpoint: PathBuf,
        curve: PathBuf,
    },
    Error {
        message: String,
    },
}

impl WorkerEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(self, WorkerEvent::Done { .. } | WorkerEvent::Error { .. })
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

pub fn parse_command_line(line: &str) -> Result<Command, ProtocolError> {
    serde_json::from_str(line.trim()).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn command_line(cmd: &Command) -> String {
    serde_json::to_string(cmd).expect("commands serialize")
}

/// Parses one worker output line against the event schema.
pub fn parse_event_line(line: &str) -> Result<WorkerEvent, ProtocolError> {
    let ev: WorkerEvent =
        serde_json::from_str(line.trim()).map_err(|e| ProtocolError::Malformed(format!("{e}: {line}")))?;
    match &ev {
        WorkerEvent::Epoch { epoch: 0, .. } => Err(ProtocolError::Malformed("epoch numbers start at 1".into())),
        WorkerEvent::Info { stage, .. } if stage.is_empty() => {
            Err(ProtocolError::Malformed("info event with empty stage".into()))
        }
        _ => Ok(ev),
    }
}

/// Checks the ordering rules of one worker session: distinct info stages,
/// consecutive epochs starting at `first_epoch`, exactly `epochs` epoch
/// events before `done`, and nothing after the terminal event.
#[derive(Debug, Clone)]
pub struct SessionValidator {
    first_epoch: u32,
    epochs: u32,
    next_epoch: u32,
    stages: HashSet<String>,
    terminal: Option<bool>,
}

impl SessionValidator {
    pub fn new(first_epoch: u32, epochs: u32) -> Self {
        SessionValidator {
            first_epoch,
            epochs,
            next_epoch: first_epoch,
            stages: HashSet::new(),
            terminal: None,
        }
    }

    pub fn epochs_seen(&self) -> u32 {
        self.next_epoch - self.first_epoch
    }

    pub fn accept(&mut self, ev: &WorkerEvent) -> Result<(), ProtocolError> {
        if self.terminal.is_some() {
            return Err(ProtocolError::Sequence("event after terminal event".into()));
        }
        match ev {
            WorkerEvent::Info { stage, .. } => {
                if !self.stages.insert(stage.clone()) {
                    return Err(ProtocolError::Sequence(format!("second info event for stage `{stage}`")));
                }
            }
            WorkerEvent::Epoch { epoch, .. } => {
                if *epoch != self.next_epoch {
                    return Err(ProtocolError::Sequence(format!(
                        "epoch {epoch} where {} was expected",
                        self.next_epoch
                    )));
                }
                if self.epochs_seen() >= self.epochs {
                    return Err(ProtocolError::Sequence(format!("more than {} epochs", self.epochs)));
                }
                self.next_epoch += 1;
            }
            WorkerEvent::Done { .. } => {
                if self.epochs_seen() != self.epochs {
                    return Err(ProtocolError::Sequence(format!(
                        "done after {} of {} epochs",
                        self.epochs_seen(),
                        self.epochs
                    )));
                }
                self.terminal = Some(true);
            }
            WorkerEvent::Error { .. } => self.terminal = Some(false),
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<(), ProtocolError> {
        match self.terminal {
            Some(_) => Ok(()),
            None => Err(ProtocolError::Sequence("stream ended without a terminal event".into())),
        }
    }
}

/// One curve CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub epoch: u32,
    pub train_loss: f64,
    pub test_loss: f64,
}

pub fn curve_csv(curve: &LossCurve, first_epoch: u32) -> String {
    let mut out = String::with_capacity(32 * curve.len() + 32);
    out.push_str(CURVE_HEADER);
    out.push('\n');
    for (i, (a, b)) in curve.train.iter().zip(&curve.test).enumerate() {
        // `Display` for f64 is the shortest representation that parses back exactly.
        let _ = writeln!(out, "{},{a},{b}", first_epoch as usize + i);
    }
    out
}

pub fn write_curve(path: &Path, curve: &LossCurve, first_epoch: u32) -> Result<(), ProtocolError> {
    crate::pipeline::write_atomic(path, curve_csv(curve, first_epoch).as_bytes()).map_err(|source| {
        ProtocolError::Io {
            path: path.to_path_buf(),
            source,
        }
    })
}

pub fn parse_curve(text: &str) -> Result<Vec<CurveRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CURVE_HEADER => {}
        other => return Err(format!("expected header `{CURVE_HEADER}`, found {other:?}")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let row = match cols.as_slice() {
            [e, a, b] => CurveRow {
                epoch: e.parse().map_err(|_| format!("row {}: bad epoch `{e}`", i + 1))?,
                train_loss: a.parse().map_err(|_| format!("row {}: bad train loss `{a}`", i + 1))?,
                test_loss: b.parse().map_err(|_| format!("row {}: bad test loss `{b}`", i + 1))?,
            },
            _ => return Err(format!("row {}: expected 3 columns", i + 1)),
        };
        if let Some(prev) = rows.last().map(|r: &CurveRow| r.epoch) {
            if row.epoch != prev + 1 {
                return Err(format!("row {}: epoch {} does not follow {prev}", i + 1, row.epoch));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>, ProtocolError> {
    let text = fs::read_to_string(path).map_err(|source| ProtocolError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_curve(&text).map_err(|reason| ProtocolError::Curve {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn rows_to_curve(rows: &[CurveRow]) -> LossCurve {
    LossCurve {
        train: rows.iter().map(|r| r.train_loss).collect(),
        test: rows.iter().map(|r| r.test_loss).collect(),
    }
}
