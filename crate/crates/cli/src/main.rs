use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gridrun_core::analysis::{parse_plot_config, write_lossplots, write_metaplots};
use gridrun_core::config::{parse_config, MonitorParams};
use gridrun_core::indicators::SlopeConvention;
use gridrun_core::pipeline::{generate_pipelines, load_pipelines, persist_pipelines};
use gridrun_core::protocol::{FaultInjection, FaultKind};
use gridrun_core::runner::{rerun, schedule, Launcher, RunContext};
use gridrun_core::store::{RunStatus, Store};
use gridrun_core::worker::serve_stdio;

/// Sweep parameters saved next to the generated pipelines.
const MONITOR_FILE: &str = "monitor.json";

#[derive(Parser, Debug)]
#[command(name = "gridrun", version, about = "Generate, run and analyse hyperparameter sweeps")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Overlapping inclusive slope windows instead of two disjoint windows
    /// of equal length.
    #[arg(long, global = true)]
    literal_slope_windows: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Expand an experiment file into pipeline JSON files.
    Gen {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Execute every generated pipeline `multiplicity` times.
    Run(RunArgs),
    /// Print run counts by status and the most recent failures.
    Monitor {
        #[arg(long)]
        db: PathBuf,
        /// How many recent failures to list.
        #[arg(long, default_value_t = 10)]
        failures: usize,
        #[arg(long)]
        json: bool,
    },
    /// Continue the done runs matched by a selection for more epochs.
    Rerun {
        #[arg(long)]
        db: PathBuf,
        /// SQL condition over the runs table; `has_key('p')`,
        /// `key_regex('r')` and `info('field')` are also available.
        #[arg(long = "where")]
        selection: String,
        #[arg(long)]
        epochs: u32,
        /// Directory written by `gen`, for its saved pool and cache settings.
        #[arg(short = 'd', long)]
        pipelines: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// One loss plot per done run matched by a selection.
    Lossplot {
        #[arg(long)]
        db: PathBuf,
        #[arg(long = "where", default_value = "1 = 1")]
        selection: String,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Grouped comparison plots described by a plot configuration.
    Metaplot {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Serve one run over stdin/stdout.
    #[command(hide = true)]
    Worker,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Directory written by `gen`.
    #[arg(short = 'd', long)]
    pipelines: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides nb_processus.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides multiplicity.
    #[arg(long)]
    multiplicity: Option<usize>,
    /// Replaces every pipeline's run_files_path.
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// `RUN_ID=nan@EPOCH` or `RUN_ID=crash@EPOCH`; for exercising failure
    /// handling.
    #[arg(long = "inject-fault", hide = true)]
    faults: Vec<String>,
    #[arg(long)]
    json: bool,
}

fn parse_fault(spec: &str) -> Result<(String, FaultInjection)> {
    let parse = || -> Option<(String, FaultInjection)> {
        let (run_id, rest) = spec.rsplit_once('=')?;
        let (kind, epoch) = rest.split_once('@')?;
        let kind = match kind {
            "nan" => FaultKind::Nan,
            "crash" => FaultKind::Crash,
            _ => return None,
        };
        Some((run_id.to_string(), FaultInjection { kind, epoch: epoch.parse().ok()? }))
    };
    parse().with_context(|| format!("invalid fault `{spec}`, expected RUN_ID=nan@EPOCH or RUN_ID=crash@EPOCH"))
}

fn context(seed: u64, literal: bool) -> Result<RunContext> {
    let exe = std::env::current_exe().context("locating the gridrun executable")?;
    let mut ctx = RunContext::new(
        seed,
        Launcher {
            program: exe,
            args: vec!["worker".into()],
        },
    );
    if literal {
        ctx.slope_convention = SlopeConvention::Literal;
    }
    Ok(ctx)
}

fn load_monitor(dir: &Path) -> Result<MonitorParams> {
    let path = dir.join(MONITOR_FILE);
    if !path.is_file() {
        log::warn!("{} not found; using default pool settings", path.display());
        return Ok(MonitorParams::default());
    }
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn open_existing(db: &Path) -> Result<Store> {
    if !db.is_file() {
        bail!("database {} does not exist", db.display());
    }
    Store::open(db).with_context(|| format!("opening {}", db.display()))
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("summaries serialize"));
}

fn gen(config: &Path, output: &Path) -> Result<ExitCode> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = parse_config(&text).with_context(|| format!("in {}", config.display()))?;
    let ps = generate_pipelines(&cfg)?;
    persist_pipelines(output, &ps)?;
    let monitor = serde_json::to_string_pretty(&cfg.monitor).expect("monitor params serialize");
    let path = output.join(MONITOR_FILE);
    std::fs::write(&path, monitor + "\n").with_context(|| format!("writing {}", path.display()))?;
    println!("{} pipelines written to {}", ps.len(), output.display());
    Ok(ExitCode::SUCCESS)
}

fn run(args: RunArgs, literal: bool) -> Result<ExitCode> {
    let ps = load_pipelines(&args.pipelines)?;
    let mut monitor = load_monitor(&args.pipelines)?;
    if let Some(j) = args.jobs {
        monitor.nb_processus = j.max(1);
    }
    if let Some(m) = args.multiplicity {
        monitor.multiplicity = m.max(1);
    }
    let mut ctx = context(args.seed, literal)?;
    ctx.run_root = args.run_root;
    ctx.faults = args.faults.iter().map(|f| parse_fault(f)).collect::<Result<HashMap<_, _>>>()?;
    let mut store = Store::open(&args.db).with_context(|| format!("opening {}", args.db.display()))?;
    let summary = schedule(&ps, &monitor, &mut store, &ctx)?;
    if args.json {
        print_json(&summary);
    } else {
        println!(
            "done {} (skipped {}), failed {}, peak concurrency {}",
            summary.done, summary.skipped, summary.failed, summary.max_concurrency
        );
        for (id, reason) in &summary.failures {
            println!("failed {id}: {reason}");
        }
    }
    Ok(if summary.failed > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn monitor(db: &Path, failures: usize, json: bool) -> Result<ExitCode> {
    let store = open_existing(db)?;
    let counts = store.status_counts()?;
    let recent = store.recent_failures(failures)?;
    if json {
        let counts: serde_json::Map<String, serde_json::Value> = RunStatus::ALL
            .iter()
            .map(|s| (s.as_str().to_string(), counts.get(s).copied().unwrap_or(0).into()))
            .collect();
        let recent: Vec<serde_json::Value> = recent
            .iter()
            .map(|r| {
                serde_json::json!({
                    "run_id": r.run_id,
                    "label": r.label,
                    "reason": r.failure_reason,
                    "finished_at": r.finished_at,
                })
            })
            .collect();
        print_json(&serde_json::json!({
            "total": store.count()?,
            "status": counts,
            "recent_failures": recent,
        }));
    } else {
        println!("total {}", store.count()?);
        for s in RunStatus::ALL {
            println!("{:<8} {}", s.as_str(), counts.get(&s).copied().unwrap_or(0));
        }
        for r in &recent {
            println!("failed {} {}: {}", r.run_id, r.label, r.failure_reason.as_deref().unwrap_or(""));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn rerun_cmd(
    db: &Path,
    selection: &str,
    epochs: u32,
    pipelines: Option<&Path>,
    jobs: Option<usize>,
    json: bool,
    literal: bool,
) -> Result<ExitCode> {
    let mut store = open_existing(db)?;
    let mut monitor = match pipelines {
        Some(dir) => load_monitor(dir)?,
        None => MonitorParams::default(),
    };
    if let Some(j) = jobs {
        monitor.nb_processus = j.max(1);
    }
    // Seeds are stored per run; the global seed is unused when resuming.
    let ctx = context(0, literal)?;
    let summary = rerun(&mut store, selection, epochs, &monitor, &ctx)?;
    if json {
        print_json(&summary);
    } else {
        println!(
            "selected {}, resumed {}, touched {}, not done {}, failed {}",
            summary.selected,
            summary.resumed,
            summary.touched,
            summary.not_done.len(),
            summary.failures.len()
        );
        for (id, reason) in &summary.failures {
            println!("failed {id}: {reason}");
        }
    }
    Ok(if summary.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let literal = cli.literal_slope_windows;
    match cli.command {
        Command::Gen { config, output } => gen(&config, &output),
        Command::Run(args) => run(args, literal),
        Command::Monitor { db, failures, json } => monitor(&db, failures, json),
        Command::Rerun {
            db,
            selection,
            epochs,
            pipelines,
            jobs,
            json,
        } => rerun_cmd(&db, &selection, epochs, pipelines.as_deref(), jobs, json, literal),
        Command::Lossplot { db, selection, output } => {
            let store = open_existing(&db)?;
            let m = write_lossplots(&store, &selection, &output)?;
            println!("{} loss plots written to {}", m.plots.len(), output.display());
            for (id, reason) in &m.skipped {
                log::warn!("no plot for {id}: {reason}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Metaplot { config, db, output } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = parse_plot_config(&text).with_context(|| format!("in {}", config.display()))?;
            let store = open_existing(&db)?;
            let m = write_metaplots(&store, &cfg, &output)?;
            for p in &m.plots {
                println!("{}: {} series, {} runs -> {}", p.section, p.series.len(), p.runs, p.svg);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Worker => Ok(ExitCode::from(serve_stdio() as u8)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
