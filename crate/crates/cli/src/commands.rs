//! One function per CLI subcommand, returning printable summaries so the
//! binary and the tests share the same entry points.

use std::path::{Path, PathBuf};

use mialab_core::corpus::TokenSequence;
use mialab_core::defense::{export_exchange, import_paraphrased, read_exchange};

use crate::artifacts::{read_model, write_csv, RunLock};
use crate::config::ExperimentConfig;
use crate::report::{merge_runs, render_heatmap};
use crate::runner::{RunOutcome, Runner};
use crate::CliError;

/// Build the membership split and write its dataset files.
pub fn cmd_split(config: ExperimentConfig, force: bool) -> Result<RunOutcome, CliError> {
    Runner::new(config).run_until(Some("split"), force)
}

/// Execute the configured preset end-to-end.
pub fn cmd_run(config: ExperimentConfig, force: bool) -> Result<RunOutcome, CliError> {
    Runner::new(config).run(force)
}

/// Merge run directories into a comparison CSV plus an SVG heatmap.
/// Returns the two written paths.
pub fn cmd_report(
    runs: &[PathBuf],
    out: &Path,
    metric: &str,
) -> Result<(PathBuf, PathBuf), CliError> {
    let labeled: Vec<(String, PathBuf)> = runs
        .iter()
        .map(|dir| (run_label(dir), dir.clone()))
        .collect();
    let merged = merge_runs(&labeled)?;
    let svg = render_heatmap(&merged, metric)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::stage("report", e))?;
    let csv_path = out.join("report.csv");
    let svg_path = out.join("report.svg");
    write_csv(&csv_path, &merged.combined_hash, &merged.to_csv())?;
    std::fs::write(&svg_path, svg).map_err(|e| CliError::stage("report", e))?;
    Ok((csv_path, svg_path))
}

/// Human-readable label of a run directory: its final path component.
fn run_label(dir: &Path) -> String {
    dir.components()
        .next_back()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Score an existing model file with the attack suite against the
/// configured split. Returns the metric-report path.
pub fn cmd_attack(
    config: ExperimentConfig,
    target_path: &Path,
    reference_path: Option<&Path>,
    name: Option<String>,
) -> Result<PathBuf, CliError> {
    let mut runner = Runner::new(config);
    runner.run_until(Some("split"), false)?;
    let _lock = RunLock::acquire(runner.dir())?;

    let target = read_model(target_path)?;
    let reference = reference_path.map(read_model).transpose()?;
    let split_vocab = runner.vocabulary()?.clone();
    if target.vocab != split_vocab {
        return Err(CliError::config(format!(
            "model {} was built over a different vocabulary than this split",
            target_path.display()
        )));
    }
    if let Some(reference) = &reference {
        if reference.vocab != split_vocab {
            return Err(CliError::config(format!(
                "reference model {} was built over a different vocabulary than this split",
                reference_path.expect("reference path present").display()
            )));
        }
    }

    let dataset = runner.dataset()?.clone();
    let label = name.unwrap_or_else(|| {
        format!(
            "attack_{}",
            target_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into())
        )
    });
    let suite = runner.evaluate(&target, reference.as_ref(), &dataset)?;
    runner.write_suite(&label, &suite)?;
    Ok(runner.dir().join(format!("reports/{label}.csv")))
}

/// Train the obfuscation defense on the split (creating split and
/// pretrained model if needed) and save the defended model plus its
/// selection reports and final dataset. No attack is run.
pub fn cmd_defend(config: ExperimentConfig) -> Result<PathBuf, CliError> {
    Runner::new(config).defend()
}

/// Write the paraphrase-exchange skeleton for every member sample, ready
/// for an external tool to fill in. Returns the path and sample count.
pub fn cmd_paraphrase_export(
    config: ExperimentConfig,
    out: Option<PathBuf>,
) -> Result<(PathBuf, usize), CliError> {
    let alpha = config.defense.alpha;
    let mut runner = Runner::new(config);
    runner.run_until(Some("split"), false)?;
    let _lock = RunLock::acquire(runner.dir())?;
    let path = out.unwrap_or_else(|| runner.dir().join("exchange.jsonl"));
    let dataset = runner.dataset()?;
    let members: Vec<&TokenSequence> = dataset.members.iter().collect();
    let records = export_exchange(&path, &members, alpha)
        .map_err(|e| CliError::stage("paraphrase-export", e))?;
    Ok((path, records.len()))
}

/// Validate an externally filled exchange file against the split's
/// member roster and install it as `<run dir>/exchange.jsonl`. Returns
/// the installed path and the number of paraphrases.
pub fn cmd_paraphrase_import(
    config: ExperimentConfig,
    exchange: &Path,
) -> Result<(PathBuf, usize), CliError> {
    let mut runner = Runner::new(config);
    runner.run_until(Some("split"), false)?;
    let _lock = RunLock::acquire(runner.dir())?;
    let records = read_exchange(exchange)
        .map_err(|e| CliError::config(format!("{}: {e}", exchange.display())))?;
    let expected: Vec<String> =
        runner.dataset()?.members.iter().map(|x| x.id.clone()).collect();
    let filled = import_paraphrased(&records, &expected)
        .map_err(|e| CliError::config(format!("{}: {e}", exchange.display())))?;
    let installed = runner.dir().join("exchange.jsonl");
    if installed != exchange {
        std::fs::copy(exchange, &installed)
            .map_err(|e| CliError::stage("paraphrase-import", e))?;
    }
    Ok((installed, filled.len()))
}
