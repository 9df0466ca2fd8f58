//! Runs every config in a directory, several at a time. Each simulation
//! owns all of its state; only the input files are shared.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use super::{run, EngineError};
use crate::config::SimConfig;

#[derive(Debug)]
pub struct BatchOutcome {
    pub config: PathBuf,
    pub report: Result<PathBuf, EngineError>,
}

/// Loads `path` and resolves its trace relative to the config's directory.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<(SimConfig, PathBuf), EngineError> {
    let text = fs::read_to_string(path).map_err(|e| EngineError::Input(format!("{}: {e}", path.display())))?;
    let cfg = SimConfig::from_json_str(&text, overrides)?;
    Ok((cfg, path.parent().unwrap_or(Path::new(".")).to_path_buf()))
}

fn run_one(path: &Path, out_dir: &Path, overrides: &[String]) -> Result<PathBuf, EngineError> {
    let (cfg, dir) = load_config(path, overrides)?;
    let trace = cfg
        .trace
        .clone()
        .ok_or_else(|| EngineError::Input(format!("{}: batch configs must name a trace", path.display())))?;
    let trace_path = dir.join(trace);
    let f = fs::File::open(&trace_path).map_err(|e| EngineError::Input(format!("{}: {e}", trace_path.display())))?;
    let report = run(cfg, &dir, BufReader::new(f), None)?;
    let stem = path.file_stem().map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    let out = out_dir.join(format!("{stem}.report.json"));
    fs::write(&out, report.to_json()).map_err(|e| EngineError::Input(format!("{}: {e}", out.display())))?;
    Ok(out)
}

/// The `*.json` files directly inside `dir`, sorted by name.
pub fn batch_configs(dir: &Path) -> Result<Vec<PathBuf>, EngineError> {
    let rd = fs::read_dir(dir).map_err(|e| EngineError::Input(format!("{}: {e}", dir.display())))?;
    let mut v: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    v.sort();
    Ok(v)
}

/// Runs every config in `dir` on up to `jobs` threads and writes
/// `<stem>.report.json` files into `out_dir`. Outcomes come back in config
/// name order.
pub fn run_batch(dir: &Path, out_dir: &Path, jobs: usize, overrides: &[String]) -> Result<Vec<BatchOutcome>, EngineError> {
    let configs = batch_configs(dir)?;
    fs::create_dir_all(out_dir).map_err(|e| EngineError::Input(format!("{}: {e}", out_dir.display())))?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<PathBuf, EngineError>>>> =
        Mutex::new((0..configs.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..jobs.max(1).min(configs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(path) = configs.get(i) else { break };
                let r = run_one(path, out_dir, overrides);
                results.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("workers joined");
    Ok(configs
        .into_iter()
        .zip(results)
        .map(|(config, r)| BatchOutcome { config, report: r.expect("every config ran") })
        .collect())
}
