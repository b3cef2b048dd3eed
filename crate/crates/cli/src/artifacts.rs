//! Versioned, hash-stamped artifact files inside a run directory.
//!
//! Every emitted file carries the experiment's config hash and a format
//! version: CSVs as leading `#` comment lines, JSON files as fields of a
//! wrapper object. Nothing here writes timestamps, so artifact bytes are
//! a pure function of the config.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mialab_core::Model64;

use crate::CliError;

/// Version stamped into every artifact this binary writes.
pub const FORMAT_VERSION: u32 = 1;

fn stage_err(stage: &str) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::stage(stage, e)
}

pub fn create_dir(path: &Path, stage: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(stage_err(stage))
}

/// Write a CSV body under `# format_version` / `# config_hash` headers.
pub fn write_csv(path: &Path, config_hash: &str, body: &str) -> Result<(), CliError> {
    let stamped =
        format!("# format_version: {FORMAT_VERSION}\n# config_hash: {config_hash}\n{body}");
    std::fs::write(path, stamped).map_err(stage_err("write-csv"))
}

/// Split a stamped CSV back into (format_version, config_hash, body).
pub fn read_csv(path: &Path) -> Result<(u32, String, String), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let mut version = None;
    let mut hash = None;
    let mut body = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# format_version:") {
            version = rest.trim().parse::<u32>().ok();
        } else if let Some(rest) = line.strip_prefix("# config_hash:") {
            hash = Some(rest.trim().to_string());
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    match (version, hash) {
        (Some(v), Some(h)) => Ok((v, h, body)),
        _ => Err(CliError::config(format!(
            "{} lacks format_version/config_hash headers",
            path.display()
        ))),
    }
}

/// JSON wrapper carrying the stamp alongside the payload.
#[derive(Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub format_version: u32,
    pub config_hash: String,
    pub payload: T,
}

pub fn write_json<T: Serialize>(
    path: &Path,
    config_hash: &str,
    payload: &T,
) -> Result<(), CliError> {
    let wrapped = Stamped {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        payload,
    };
    let mut out = BufWriter::new(File::create(path).map_err(stage_err("write-json"))?);
    serde_json::to_writer(&mut out, &wrapped).map_err(|e| CliError::stage("write-json", e))?;
    out.write_all(b"\n").map_err(stage_err("write-json"))?;
    out.flush().map_err(stage_err("write-json"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>, CliError> {
    let file = BufReader::new(File::open(path).map_err(|e| {
        CliError::config(format!("cannot read {}: {e}", path.display()))
    })?);
    serde_json::from_reader(file)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub fn write_model(path: &Path, config_hash: &str, model: &Model64) -> Result<(), CliError> {
    write_json(path, config_hash, model)
}

pub fn read_model(path: &Path) -> Result<Model64, CliError> {
    Ok(read_json::<Model64>(path)?.payload)
}

/// Progress of a run: which stages finished under which config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub format_version: u32,
    pub config_hash: String,
    pub completed: Vec<String>,
    pub finished: bool,
}

impl RunState {
    pub fn fresh(config_hash: &str) -> RunState {
        RunState {
            format_version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            completed: Vec::new(),
            finished: false,
        }
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.completed.iter().any(|s| s == stage)
    }
}

pub fn state_path(run_dir: &Path) -> PathBuf {
    run_dir.join("state.json")
}

pub fn load_state(run_dir: &Path) -> Result<Option<RunState>, CliError> {
    let path = state_path(run_dir);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::stage("load-state", e))?;
    let state: RunState = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    Ok(Some(state))
}

/// Atomic state save (write-then-rename).
pub fn save_state(run_dir: &Path, state: &RunState) -> Result<(), CliError> {
    let tmp = run_dir.join("state.json.tmp");
    let text = serde_json::to_string_pretty(state).map_err(|e| CliError::stage("save-state", e))?;
    std::fs::write(&tmp, text).map_err(stage_err("save-state"))?;
    std::fs::rename(&tmp, state_path(run_dir)).map_err(stage_err("save-state"))
}

/// Exclusive ownership of a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<RunLock, CliError> {
        let path = run_dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::stage(
                    "lock",
                    format!(
                        "run directory is locked by another process ({}); remove the file if that process is gone",
                        path.display()
                    ),
                ))
            }
            Err(e) => Err(CliError::stage("lock", e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Append a line to the run log. Lines are `stage<TAB>message` with no
/// timestamps, keeping logs byte-reproducible too.
pub fn log_line(run_dir: &Path, stage: &str, message: &str) {
    if let Ok(mut file) = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(run_dir.join("run.log"))
    {
        let _ = writeln!(file, "{stage}\t{message}");
    }
}
