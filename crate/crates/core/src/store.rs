//! Run records in a single-file SQLite database.
//!
//! Tables: `runs` (one row per run, indicators as columns), `run_keys`
//! (stage keys) and `run_info` (stage-published fields and stage params).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use regex::Regex;
use rusqlite::functions::FunctionFlags;
use rusqlite::{params, Connection, OptionalExtension, Row};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::IndicatorSet;

pub const SCHEMA_VERSION: i64 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("database schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid selection `{query}`: {message}")]
    QuerySyntaxError { query: String, message: String },
    #[error("database error: {0}")]
    Sql(#[from] rusqlite::Error),
    #[error("corrupt record {run_id}: {message}")]
    Corrupt { run_id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

impl RunStatus {
    pub const ALL: [RunStatus; 4] = [RunStatus::Pending, RunStatus::Running, RunStatus::Done, RunStatus::Failed];

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Pending => "pending",
            RunStatus::Running => "running",
            RunStatus::Done => "done",
            RunStatus::Failed => "failed",
        }
    }
}

impl FromStr for RunStatus {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        RunStatus::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown status `{s}`"))
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn run_id(pipeline_hash: &str, mult_index: usize) -> String {
    format!("{pipeline_hash}#{mult_index}")
}

/// One row of `runs`. `indicators` is present exactly when the run is done.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub pipeline_hash: String,
    pub label: String,
    pub mult_index: usize,
    pub status: RunStatus,
    pub epochs: u32,
    pub nb_params: Option<u64>,
    pub indicators: Option<IndicatorSet>,
    pub pipeline_json: String,
    pub curve_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub failure_reason: Option<String>,
    pub seed: u64,
    pub data_seed: u64,
    pub resource_token: Option<String>,
}

impl RunRecord {
    pub fn pending(pipeline_hash: &str, label: &str, mult_index: usize, epochs: u32, pipeline_json: String) -> Self {
        RunRecord {
            run_id: run_id(pipeline_hash, mult_index),
            pipeline_hash: pipeline_hash.to_string(),
            label: label.to_string(),
            mult_index,
            status: RunStatus::Pending,
            epochs,
            nb_params: None,
            indicators: None,
            pipeline_json,
            curve_path: None,
            checkpoint_path: None,
            log_path: None,
            started_at: None,
            finished_at: None,
            failure_reason: None,
            seed: 0,
            data_seed: 0,
            resource_token: None,
        }
    }
}

/// A `run_info` value: text plus whether it parses as a number.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoValue {
    pub text: String,
    pub number: Option<f64>,
}

impl InfoValue {
    pub fn text(s: impl Into<String>) -> Self {
        let text = s.into();
        let number = text.trim().parse::<f64>().ok().filter(|x| x.is_finite());
        InfoValue { text, number }
    }

    pub fn from_json(v: &serde_json::Value) -> Self {
        match v {
            serde_json::Value::String(s) => InfoValue::text(s.clone()),
            serde_json::Value::Number(n) => InfoValue {
                text: n.to_string(),
                number: n.as_f64(),
            },
            serde_json::Value::Bool(b) => InfoValue::text(if *b { "True" } else { "False" }),
            other => InfoValue::text(other.to_string()),
        }
    }
}

const SCHEMA: &str = "
CREATE TABLE runs (
    run_id TEXT PRIMARY KEY NOT NULL,
    pipeline_hash TEXT NOT NULL,
    label TEXT NOT NULL,
    mult_index INTEGER NOT NULL,
    status TEXT NOT NULL CHECK (status IN ('pending', 'running', 'done', 'failed')),
    epochs INTEGER NOT NULL,
    nb_params INTEGER,
    runtime_s REAL,
    final_train_loss REAL,
    final_test_loss REAL,
    overfitting REAL,
    slope_mean REAL,
    slope_sigma_plus REAL,
    slope_sigma_minus REAL,
    trainability REAL,
    pipeline_json TEXT NOT NULL,
    curve_path TEXT,
    checkpoint_path TEXT,
    log_path TEXT,
    started_at REAL,
    finished_at REAL,
    failure_reason TEXT,
    seed TEXT NOT NULL,
    data_seed TEXT NOT NULL,
    resource_token TEXT
);
CREATE TABLE run_keys (
    run_id TEXT NOT NULL REFERENCES runs(run_id) ON DELETE CASCADE,
    key TEXT NOT NULL,
    PRIMARY KEY (run_id, key)
);
CREATE TABLE run_info (
    run_id TEXT NOT NULL REFERENCES runs(run_id) ON DELETE CASCADE,
    field TEXT NOT NULL,
    value TEXT NOT NULL,
    is_numeric INTEGER NOT NULL,
    num REAL,
    PRIMARY KEY (run_id, field)
);
CREATE INDEX runs_pipeline_hash ON runs(pipeline_hash);
CREATE INDEX runs_status ON runs(status);
CREATE INDEX run_keys_key ON run_keys(key);
CREATE INDEX run_info_field ON run_info(field);
";

const RUN_COLUMNS: &str = "run_id, pipeline_hash, label, mult_index, status, epochs, nb_params, runtime_s, \
    final_train_loss, final_test_loss, overfitting, slope_mean, slope_sigma_plus, slope_sigma_minus, trainability, \
    pipeline_json, curve_path, checkpoint_path, log_path, started_at, finished_at, failure_reason, seed, data_seed, \
    resource_token";

/// Column names of `runs`, in table order.
pub const RUN_FIELDS: [&str; 25] = [
    "run_id",
    "pipeline_hash",
    "label",
    "mult_index",
    "status",
    "epochs",
    "nb_params",
    "runtime_s",
    "final_train_loss",
    "final_test_loss",
    "overfitting",
    "slope_mean",
    "slope_sigma_plus",
    "slope_sigma_minus",
    "trainability",
    "pipeline_json",
    "curve_path",
    "checkpoint_path",
    "log_path",
    "started_at",
    "finished_at",
    "failure_reason",
    "seed",
    "data_seed",
    "resource_token",
];

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

fn record_from_row(row: &Row) -> rusqlite::Result<Result<RunRecord, StoreError>> {
    let run_id: String = row.get(0)?;
    let status: String = row.get(4)?;
    let seed: String = row.get(22)?;
    let data_seed: String = row.get(23)?;
    let corrupt = |message: String| StoreError::Corrupt {
        run_id: run_id.clone(),
        message,
    };
    let status = match status.parse::<RunStatus>() {
        Ok(s) => s,
        Err(m) => return Ok(Err(corrupt(m))),
    };
    let (Ok(seed), Ok(data_seed)) = (seed.parse::<u64>(), data_seed.parse::<u64>()) else {
        return Ok(Err(corrupt("seed is not a u64".into())));
    };
    let ind: [Option<f64>; 8] = [
        row.get(8)?,
        row.get(9)?,
        row.get(10)?,
        row.get(11)?,
        row.get(12)?,
        row.get(13)?,
        row.get(14)?,
        row.get(7)?,
    ];
    let indicators = match ind {
        [Some(a), Some(b), Some(c), Some(d), Some(e), Some(f), Some(g), Some(h)] => Some(IndicatorSet {
            final_train_loss: a,
            final_test_loss: b,
            overfitting: c,
            slope_mean: d,
            slope_sigma_plus: e,
            slope_sigma_minus: f,
            trainability: g,
            runtime_s: h,
        }),
        _ => None,
    };
    let nb_params: Option<i64> = row.get(6)?;
    let mult_index: i64 = row.get(3)?;
    let epochs: i64 = row.get(5)?;
    Ok(Ok(RunRecord {
        run_id: run_id.clone(),
        pipeline_hash: row.get(1)?,
        label: row.get(2)?,
        mult_index: mult_index as usize,
        status,
        epochs: epochs as u32,
        nb_params: nb_params.map(|n| n as u64),
        indicators,
        pipeline_json: row.get(15)?,
        curve_path: row.get::<_, Option<String>>(16)?.map(PathBuf::from),
        checkpoint_path: row.get::<_, Option<String>>(17)?.map(PathBuf::from),
        log_path: row.get::<_, Option<String>>(18)?.map(PathBuf::from),
        started_at: row.get(19)?,
        finished_at: row.get(20)?,
        failure_reason: row.get(21)?,
        seed,
        data_seed,
        resource_token: row.get(24)?,
    }))
}

/// Rewrites the helper predicates of a selection into SQL:
/// `has_key('pat')` (LIKE), `key_regex('re')` and `info('field')`.
pub fn rewrite_selection(selection: &str) -> String {
    static PATTERNS: std::sync::OnceLock<[Regex; 3]> = std::sync::OnceLock::new();
    let [has_key, key_regex, info] = PATTERNS.get_or_init(|| {
        let arg = r"\(\s*('(?:[^']|'')*')\s*\)";
        [
            Regex::new(&format!(r"\bhas_key\s*{arg}")).unwrap(),
            Regex::new(&format!(r"\bkey_regex\s*{arg}")).unwrap(),
            Regex::new(&format!(r"\binfo\s*{arg}")).unwrap(),
        ]
    });
    let s = has_key.replace_all(
        selection,
        "EXISTS (SELECT 1 FROM run_keys k WHERE k.run_id = runs.run_id AND k.key LIKE $1)",
    );
    let s = key_regex.replace_all(
        &s,
        "EXISTS (SELECT 1 FROM run_keys k WHERE k.run_id = runs.run_id AND k.key REGEXP $1)",
    );
    let s = info.replace_all(
        &s,
        "(SELECT COALESCE(i.num, i.value) FROM run_info i WHERE i.run_id = runs.run_id AND i.field = $1)",
    );
    s.into_owned()
}

pub struct Store {
    conn: Connection,
    path: PathBuf,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.path).finish()
    }
}

fn register_regexp(conn: &Connection) -> rusqlite::Result<()> {
    let cache: Mutex<HashMap<String, Option<Regex>>> = Mutex::new(HashMap::new());
    conn.create_scalar_function(
        "regexp",
        2,
        FunctionFlags::SQLITE_UTF8 | FunctionFlags::SQLITE_DETERMINISTIC,
        move |ctx| {
            let pattern: String = ctx.get(0)?;
            let Some(text) = ctx.get::<Option<String>>(1)? else {
                return Ok(false);
            };
            let mut cache = cache.lock().unwrap();
            let re = cache
                .entry(pattern.clone())
                .or_insert_with(|| Regex::new(&format!("^(?:{pattern})$")).ok());
            match re {
                Some(re) => Ok(re.is_match(&text)),
                None => Err(rusqlite::Error::UserFunctionError(
                    format!("invalid regular expression `{pattern}`").into(),
                )),
            }
        },
    )
}

impl Store {
    /// Opens or creates the database, creating the schema on a fresh file.
    pub fn open(path: &Path) -> Result<Store, StoreError> {
        let conn = Connection::open(path)?;
        conn.busy_timeout(std::time::Duration::from_secs(30))?;
        let _: String = conn.query_row("PRAGMA journal_mode = WAL", [], |r| r.get(0))?;
        conn.execute_batch("PRAGMA foreign_keys = ON; PRAGMA synchronous = NORMAL;")?;
        register_regexp(&conn)?;
        let version: i64 = conn.query_row("PRAGMA user_version", [], |r| r.get(0))?;
        let tables: i64 = conn.query_row(
            "SELECT count(*) FROM sqlite_master WHERE type = 'table'",
            [],
            |r| r.get(0),
        )?;
        match (version, tables) {
            (0, 0) => {
                conn.execute_batch(&format!(
                    "BEGIN; {SCHEMA} PRAGMA user_version = {SCHEMA_VERSION}; COMMIT;"
                ))?;
            }
            (SCHEMA_VERSION, _) => {
                let cols: Vec<String> = conn
                    .prepare("SELECT name FROM pragma_table_info('runs')")?
                    .query_map([], |r| r.get(0))?
                    .collect::<Result<_, _>>()?;
                if cols != RUN_FIELDS {
                    return Err(StoreError::SchemaMismatch("the runs table has unexpected columns".into()));
                }
            }
            (0, n) => {
                return Err(StoreError::SchemaMismatch(format!(
                    "{n} foreign table(s) present without a version stamp"
                )))
            }
            (v, _) => {
                return Err(StoreError::SchemaMismatch(format!(
                    "schema version {v}, expected {SCHEMA_VERSION}"
                )))
            }
        }
        Ok(Store {
            conn,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Raw connection, for ad-hoc inspection.
    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    /// Inserts or replaces a record together with its keys and info rows,
    /// in one transaction.
    pub fn upsert_run(
        &mut self,
        r: &RunRecord,
        keys: &BTreeSet<String>,
        info: &[(String, InfoValue)],
    ) -> Result<(), StoreError> {
        let tx = self.conn.transaction()?;
        write_record(&tx, r)?;
        tx.execute("DELETE FROM run_keys WHERE run_id = ?1", [&r.run_id])?;
        tx.execute("DELETE FROM run_info WHERE run_id = ?1", [&r.run_id])?;
        {
            let mut k = tx.prepare_cached("INSERT INTO run_keys (run_id, key) VALUES (?1, ?2)")?;
            for key in keys {
                k.execute(params![r.run_id, key])?;
            }
            let mut i = tx.prepare_cached(
                "INSERT OR REPLACE INTO run_info (run_id, field, value, is_numeric, num) VALUES (?1, ?2, ?3, ?4, ?5)",
            )?;
            for (field, v) in info {
                i.execute(params![r.run_id, field, v.text, v.number.is_some(), v.number])?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    /// Writes many records with their keys in one transaction, dropping any
    /// info rows they had.
    pub fn insert_pending(&mut self, runs: &[(RunRecord, BTreeSet<String>)]) -> Result<(), StoreError> {
        let tx = self.conn.transaction()?;
        {
            let mut dk = tx.prepare_cached("DELETE FROM run_keys WHERE run_id = ?1")?;
            let mut di = tx.prepare_cached("DELETE FROM run_info WHERE run_id = ?1")?;
            let mut k = tx.prepare_cached("INSERT INTO run_keys (run_id, key) VALUES (?1, ?2)")?;
            for (r, keys) in runs {
                write_record(&tx, r)?;
                dk.execute([&r.run_id])?;
                di.execute([&r.run_id])?;
                for key in keys {
                    k.execute(params![r.run_id, key])?;
                }
            }
        }
        tx.commit()?;
        Ok(())
    }

    /// Replaces the `runs` row only, keeping keys and info.
    pub fn update_run(&mut self, r: &RunRecord) -> Result<(), StoreError> {
        let tx = self.conn.transaction()?;
        write_record(&tx, r)?;
        tx.commit()?;
        Ok(())
    }

    /// Adds or replaces info rows of an existing run.
    pub fn merge_info(&mut self, run_id: &str, info: &[(String, InfoValue)]) -> Result<(), StoreError> {
        let tx = self.conn.transaction()?;
        {
            let mut i = tx.prepare_cached(
                "INSERT OR REPLACE INTO run_info (run_id, field, value, is_numeric, num) VALUES (?1, ?2, ?3, ?4, ?5)",
            )?;
            for (field, v) in info {
                i.execute(params![run_id, field, v.text, v.number.is_some(), v.number])?;
            }
        }
        tx.commit()?;
        Ok(())
    }

    pub fn get_run(&self, run_id: &str) -> Result<Option<RunRecord>, StoreError> {
        let mut stmt = self
            .conn
            .prepare_cached(&format!("SELECT {RUN_COLUMNS} FROM runs WHERE run_id = ?1"))?;
        match stmt.query_row([run_id], record_from_row).optional()? {
            Some(r) => Ok(Some(r?)),
            None => Ok(None),
        }
    }

    /// Records matching a boolean selection over `runs` columns, ordered by
    /// `run_id`.
    pub fn query_runs(&self, selection: &str) -> Result<Vec<RunRecord>, StoreError> {
        let selection = selection.trim();
        let selection = if selection.is_empty() { "1=1" } else { selection };
        let sql = format!(
            "SELECT {RUN_COLUMNS} FROM runs WHERE ({}) ORDER BY run_id",
            rewrite_selection(selection)
        );
        let syntax = |e: rusqlite::Error| StoreError::QuerySyntaxError {
            query: selection.to_string(),
            message: e.to_string(),
        };
        let mut stmt = self.conn.prepare(&sql).map_err(syntax)?;
        let rows = stmt.query_map([], record_from_row).map_err(syntax)?;
        let mut out = Vec::new();
        for r in rows {
            out.push(r.map_err(syntax)??);
        }
        Ok(out)
    }

    pub fn run_keys(&self, run_id: &str) -> Result<BTreeSet<String>, StoreError> {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT key FROM run_keys WHERE run_id = ?1 ORDER BY key")?;
        let keys = stmt.query_map([run_id], |r| r.get(0))?.collect::<Result<_, _>>()?;
        Ok(keys)
    }

    pub fn run_info(&self, run_id: &str) -> Result<BTreeMap<String, InfoValue>, StoreError> {
        let mut stmt = self
            .conn
            .prepare_cached("SELECT field, value, num FROM run_info WHERE run_id = ?1 ORDER BY field")?;
        let rows = stmt.query_map([run_id], |r| {
            Ok((
                r.get::<_, String>(0)?,
                InfoValue {
                    text: r.get(1)?,
                    number: r.get(2)?,
                },
            ))
        })?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    pub fn count(&self) -> Result<usize, StoreError> {
        let n: i64 = self.conn.query_row("SELECT count(*) FROM runs", [], |r| r.get(0))?;
        Ok(n as usize)
    }

    pub fn status_counts(&self) -> Result<BTreeMap<RunStatus, usize>, StoreError> {
        let mut out: BTreeMap<RunStatus, usize> = RunStatus::ALL.into_iter().map(|s| (s, 0)).collect();
        let mut stmt = self.conn.prepare("SELECT status, count(*) FROM runs GROUP BY status")?;
        for row in stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, i64>(1)?)))? {
            let (s, n) = row?;
            let status = s.parse::<RunStatus>().map_err(|m| StoreError::Corrupt {
                run_id: "<status>".into(),
                message: m,
            })?;
            out.insert(status, n as usize);
        }
        Ok(out)
    }

    /// Most recently finished failures, newest first.
    pub fn recent_failures(&self, limit: usize) -> Result<Vec<RunRecord>, StoreError> {
        let mut stmt = self.conn.prepare(&format!(
            "SELECT {RUN_COLUMNS} FROM runs WHERE status = 'failed' \
             ORDER BY finished_at DESC, run_id LIMIT ?1"
        ))?;
        let rows = stmt.query_map([limit as i64], record_from_row)?;
        let mut out = Vec::new();
        for r in rows {
            out.push(r??);
        }
        Ok(out)
    }
}

fn write_record(conn: &Connection, r: &RunRecord) -> Result<(), StoreError> {
    let ind = r.indicators.as_ref();
    if ind.is_some() != (r.status == RunStatus::Done) {
        return Err(StoreError::Corrupt {
            run_id: r.run_id.clone(),
            message: "indicators must be present exactly when the run is done".into(),
        });
    }
    // An upsert rather than REPLACE: REPLACE deletes the row, and the
    // cascade would drop its keys and info.
    let updates: Vec<String> = RUN_FIELDS[1..].iter().map(|c| format!("{c} = excluded.{c}")).collect();
    let mut stmt = conn.prepare_cached(&format!(
        "INSERT INTO runs ({RUN_COLUMNS}) VALUES \
         (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13, ?14, ?15, ?16, ?17, ?18, ?19, ?20, ?21, ?22, ?23, ?24, ?25) \
         ON CONFLICT(run_id) DO UPDATE SET {}",
        updates.join(", ")
    ))?;
    stmt.execute(params![
        r.run_id,
        r.pipeline_hash,
        r.label,
        r.mult_index as i64,
        r.status.as_str(),
        r.epochs as i64,
        r.nb_params.map(|n| n as i64),
        ind.map(|i| i.runtime_s),
        ind.map(|i| i.final_train_loss),
        ind.map(|i| i.final_test_loss),
        ind.map(|i| i.overfitting),
        ind.map(|i| i.slope_mean),
        ind.map(|i| i.slope_sigma_plus),
        ind.map(|i| i.slope_sigma_minus),
        ind.map(|i| i.trainability),
        r.pipeline_json,
        path_str(&r.curve_path),
        path_str(&r.checkpoint_path),
        path_str(&r.log_path),
        r.started_at,
        r.finished_at,
        r.failure_reason,
        r.seed.to_string(),
        r.data_seed.to_string(),
        r.resource_token,
    ])?;
    Ok(())
}
