//! Command-line front end. Exit codes: 0 success, 1 usage, 2 input error,
//! 3 runtime abort. Failures print one JSON line on stderr.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::{FragmentPattern, MmPolicy};
use crate::engine::{self, load_config, run_batch, EngineError};
use crate::faultsvc::{serve, serve_tcp, FaultCosts, ServeOptions, PROTO};
use crate::memmgr::Buddy;
use crate::trace::{gen_synthetic, render, validate_stream, SyntheticSpec, TraceReader};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "vmsim", version, about = "Trace-driven virtual memory simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate a trace, or every config in a directory with --batch.
    Run {
        #[arg(short = 'c', long = "config", required_unless_present = "batch", conflicts_with = "batch")]
        config: Option<PathBuf>,
        /// Trace file; defaults to the config's `trace` entry.
        #[arg(short = 't', long = "trace")]
        trace: Option<PathBuf>,
        /// Report path (stdout when omitted). With --batch, the output directory.
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
        /// Override a config value, e.g. `tlb.l1d.entries=64`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Write the time series CSV here.
        #[arg(long)]
        timeseries: Option<PathBuf>,
        /// Write one JSON cost line per event here.
        #[arg(long = "debug-log")]
        debug_log: Option<PathBuf>,
        #[arg(long)]
        batch: Option<PathBuf>,
        /// Concurrent simulations in batch mode (default: available cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write a synthetic trace.
    GenTrace {
        /// JSON spec, inline or as a file path.
        #[arg(long)]
        spec: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
    },
    /// Write a fragmented allocator snapshot.
    GenFragmentation {
        #[arg(long)]
        frames: u64,
        #[arg(long)]
        target: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long = "max-order", default_value_t = 10)]
        max_order: u32,
        #[arg(long, value_parser = parse_pattern, default_value = "random")]
        pattern: FragmentPattern,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Tabulate reports as CSV, one row per report.
    Compare {
        #[arg(required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
    },
    /// Check a trace for syntax and VMA consistency.
    ValidateTrace {
        trace: PathBuf,
        /// Reject accesses outside every allocated region.
        #[arg(long)]
        strict: bool,
    },
    /// Reference external fault handler speaking vfault/1 on stdio or TCP.
    #[command(hide = true)]
    Handler {
        #[arg(long, value_parser = parse_policy, default_value = "demand4k")]
        policy: MmPolicy,
        #[arg(long)]
        tcp: Option<String>,
        #[arg(long, default_value = PROTO)]
        proto: String,
        #[arg(long = "base-cycles", default_value_t = 1000)]
        base_cycles: u64,
        #[arg(long = "per-action-cycles", default_value_t = 200)]
        per_action_cycles: u64,
        #[arg(long = "promote-threshold", default_value_t = 1.0)]
        promote_threshold: f64,
    },
}

fn parse_policy(s: &str) -> Result<MmPolicy, String> {
    MmPolicy::from_label(s).ok_or_else(|| format!("unknown policy `{s}`"))
}

fn parse_pattern(s: &str) -> Result<FragmentPattern, String> {
    match s {
        "random" => Ok(FragmentPattern::Random),
        "checkerboard" => Ok(FragmentPattern::Checkerboard),
        _ => Err(format!("unknown pattern `{s}`")),
    }
}

/// A failure with its exit code and error kind.
struct Failure {
    code: i32,
    kind: &'static str,
    message: String,
    event: Option<u64>,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure { code: EXIT_INPUT, kind: "input", message: message.into(), event: None }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure { code: EXIT_RUNTIME, kind: "runtime", message: message.into(), event: None }
    }

    fn to_json(&self) -> String {
        let mut v = json!({"error": self.kind, "exit_code": self.code, "message": self.message});
        if let Some(e) = self.event {
            v["event"] = json!(e);
        }
        v.to_string()
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        Failure { code: e.exit_code(), kind: e.kind(), message: e.to_string(), event: e.ordinal() }
    }
}

fn read_file(p: &Path) -> Result<String, Failure> {
    fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))
}

fn write_file(p: &Path, data: &[u8]) -> Result<(), Failure> {
    fs::write(p, data).map_err(|e| Failure::input(format!("{}: {e}", p.display())))
}

fn emit(output: Option<&Path>, data: &[u8]) -> Result<(), Failure> {
    match output {
        Some(p) => write_file(p, data),
        None => io::stdout().write_all(data).map_err(|e| Failure::runtime(format!("stdout: {e}"))),
    }
}

fn open(p: &Path) -> Result<BufReader<fs::File>, Failure> {
    fs::File::open(p).map(BufReader::new).map_err(|e| Failure::input(format!("{}: {e}", p.display())))
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.to_json());
            f.code
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Run { config, trace, output, set, timeseries, debug_log, batch, jobs } => match batch {
            Some(dir) => cmd_batch(&dir, output, jobs, &set),
            None => cmd_run(&config.expect("required by clap"), trace, output, &set, timeseries, debug_log),
        },
        Cmd::GenTrace { spec, seed, output } => {
            let text = if spec.trim_start().starts_with('{') { spec } else { read_file(Path::new(&spec))? };
            let s: SyntheticSpec = serde_json::from_str(&text).map_err(|e| Failure::input(format!("trace spec: {e}")))?;
            s.validate().map_err(|e| Failure::input(format!("trace spec: {e}")))?;
            emit(output.as_deref(), render(&gen_synthetic(&s, seed)).as_bytes())
        }
        Cmd::GenFragmentation { frames, target, seed, max_order, pattern, output } => {
            if max_order > 20 || frames == 0 || !frames.is_multiple_of(1 << max_order) {
                return Err(Failure::input("--frames must be a positive multiple of 2^max-order (max-order <= 20)"));
            }
            if !(0.0..=1.0).contains(&target) {
                return Err(Failure::input("--target must be in [0, 1]"));
            }
            let mut b = Buddy::new(frames, max_order);
            match pattern {
                FragmentPattern::Random => {
                    b.fragment_to(target, seed).map_err(|e| Failure::runtime(e.to_string()))?;
                }
                FragmentPattern::Checkerboard => {
                    b.fragment_checkerboard();
                }
            }
            write_file(&output, &b.snapshot_bytes())
        }
        Cmd::Compare { reports, output } => {
            let mut rows = Vec::new();
            for p in &reports {
                let v: Value = serde_json::from_str(&read_file(p)?).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
                rows.push((p.display().to_string(), v));
            }
            let csv = engine::compare(&rows).map_err(|e| Failure::runtime(e.to_string()))?;
            emit(output.as_deref(), csv.as_bytes())
        }
        Cmd::ValidateTrace { trace, strict } => {
            let n = validate_stream(TraceReader::new(open(&trace)?), strict).map_err(|e| Failure::from(EngineError::Trace(e)))?;
            println!("{}", json!({"events": n, "valid": true}));
            Ok(())
        }
        Cmd::Handler { policy, tcp, proto, base_cycles, per_action_cycles, promote_threshold } => {
            let opts = ServeOptions {
                policy,
                costs: FaultCosts { base: base_cycles, per_action: per_action_cycles },
                promote_threshold,
                proto,
            };
            let r = match tcp {
                Some(addr) => serve_tcp(&addr, &opts),
                None => serve(io::stdin().lock(), io::stdout().lock(), &opts),
            };
            r.map_err(|e| Failure::runtime(e.to_string()))
        }
    }
}

fn cmd_run(
    config: &Path,
    trace: Option<PathBuf>,
    output: Option<PathBuf>,
    set: &[String],
    timeseries: Option<PathBuf>,
    debug_log: Option<PathBuf>,
) -> Result<(), Failure> {
    let (cfg, dir) = load_config(config, set)?;
    let trace_path = match (trace, &cfg.trace) {
        (Some(t), _) => t,
        (None, Some(t)) => dir.join(t),
        (None, None) => return Err(Failure::input("no trace: pass -t or set `trace` in the config")),
    };
    let reader = open(&trace_path)?;
    let log: Option<Box<dyn Write>> = match &debug_log {
        Some(p) => Some(Box::new(io::BufWriter::new(
            fs::File::create(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?,
        ))),
        None => None,
    };
    let report = engine::run(cfg, &dir, reader, log)?;
    if let Some(p) = timeseries {
        write_file(&p, report.timeseries_csv().as_bytes())?;
    }
    emit(output.as_deref(), report.to_json().as_bytes())
}

fn cmd_batch(dir: &Path, output: Option<PathBuf>, jobs: Option<usize>, set: &[String]) -> Result<(), Failure> {
    let out = output.unwrap_or_else(|| dir.join("reports"));
    let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let outcomes = run_batch(dir, &out, jobs, set)?;
    let mut worst: Option<Failure> = None;
    for o in outcomes {
        match o.report {
            Ok(p) => println!("{}", json!({"config": o.config.display().to_string(), "report": p.display().to_string()})),
            Err(e) => {
                let f = Failure::from(e);
                eprintln!("{}", json!({"config": o.config.display().to_string(), "error": f.kind, "message": f.message}));
                if worst.as_ref().is_none_or(|w| f.code > w.code) {
                    worst = Some(f);
                }
            }
        }
    }
    match worst {
        Some(f) => Err(f),
        None => Ok(()),
    }
}
