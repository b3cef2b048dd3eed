//! Cross-run comparison artifacts: a merged metric CSV and an SVG
//! heatmap whose cell labels are the very strings the CSV carries.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::artifacts::{self, read_csv};
use crate::CliError;

/// One (run, arm, attack) row of the merged table. Metric values are kept
/// as the exact strings of the per-run reports so that every downstream
/// rendering shows identical digits.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedRow {
    pub run: String,
    pub arm: String,
    pub attack: String,
    pub orientation: String,
    pub auc: String,
    pub auc_boot_mean: String,
    pub auc_boot_std: String,
    /// Keyed by full column name (`tpr_at_fpr_<level>`).
    pub tpr: BTreeMap<String, String>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedReport {
    pub schema_version: i64,
    /// SHA-256 over the newline-joined config hashes of the merged runs.
    pub combined_hash: String,
    /// Union of per-run false-positive-rate columns, first-seen order.
    pub tpr_columns: Vec<String>,
    pub rows: Vec<MergedRow>,
}

impl MergedReport {
    /// Metric columns a heatmap can render.
    pub fn metric_columns(&self) -> Vec<String> {
        let mut cols = vec![
            "auc".to_string(),
            "auc_boot_mean".to_string(),
            "auc_boot_std".to_string(),
        ];
        cols.extend(self.tpr_columns.iter().cloned());
        cols
    }

    pub fn value_of(&self, row: &MergedRow, metric: &str) -> Option<String> {
        let v = match metric {
            "auc" => row.auc.clone(),
            "auc_boot_mean" => row.auc_boot_mean.clone(),
            "auc_boot_std" => row.auc_boot_std.clone(),
            other => row.tpr.get(other).cloned().unwrap_or_default(),
        };
        if v.is_empty() {
            None
        } else {
            Some(v)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header = vec![
            "run".to_string(),
            "arm".to_string(),
            "attack".to_string(),
            "orientation".to_string(),
            "auc".to_string(),
            "auc_boot_mean".to_string(),
            "auc_boot_std".to_string(),
        ];
        header.extend(self.tpr_columns.iter().cloned());
        header.push("note".to_string());
        wtr.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![
                row.run.clone(),
                row.arm.clone(),
                row.attack.clone(),
                row.orientation.clone(),
                row.auc.clone(),
                row.auc_boot_mean.clone(),
                row.auc_boot_std.clone(),
            ];
            for col in &self.tpr_columns {
                rec.push(row.tpr.get(col).cloned().unwrap_or_default());
            }
            rec.push(row.note.clone());
            wtr.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }
}

/// Merge the metric reports of several run directories. Every run must
/// speak the same config schema version and artifact format version.
pub fn merge_runs(runs: &[(String, PathBuf)]) -> Result<MergedReport, CliError> {
    if runs.is_empty() {
        return Err(CliError::config("no run directories given"));
    }
    let mut schema_version: Option<(i64, String)> = None;
    let mut run_hashes = Vec::new();
    let mut tpr_columns: Vec<String> = Vec::new();
    let mut rows = Vec::new();

    for (label, dir) in runs {
        let manifest_path = dir.join("manifest.toml");
        let manifest = std::fs::read_to_string(&manifest_path).map_err(|e| {
            CliError::config(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let value: toml::Value = manifest.parse().map_err(|e| {
            CliError::config(format!("{}: {e}", manifest_path.display()))
        })?;
        let version = value
            .get("schema_version")
            .and_then(toml::Value::as_integer)
            .ok_or_else(|| {
                CliError::config(format!(
                    "{} lacks a schema_version",
                    manifest_path.display()
                ))
            })?;
        match &schema_version {
            None => schema_version = Some((version, label.clone())),
            Some((first, first_label)) if *first != version => {
                return Err(CliError::config(format!(
                    "schema-version mismatch: run `{first_label}` has {first}, run `{label}` has {version}"
                )));
            }
            Some(_) => {}
        }

        let mut run_hash: Option<String> = None;
        for path in report_files(dir)? {
            let arm = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let (format_version, hash, body) = read_csv(&path)?;
            if format_version != artifacts::FORMAT_VERSION {
                return Err(CliError::config(format!(
                    "{} has format version {format_version}; this binary reads {}",
                    path.display(),
                    artifacts::FORMAT_VERSION
                )));
            }
            match &run_hash {
                None => run_hash = Some(hash.clone()),
                Some(first) if *first != hash => {
                    return Err(CliError::config(format!(
                        "run `{label}` mixes config hashes ({first} vs {hash} in {})",
                        path.display()
                    )));
                }
                Some(_) => {}
            }
            parse_report_rows(label, &arm, &body, &path, &mut tpr_columns, &mut rows)?;
        }
        run_hashes.push(run_hash.unwrap_or_default());
    }

    if rows.is_empty() {
        return Err(CliError::config(
            "the given run directories contain no metric reports",
        ));
    }
    let digest = Sha256::digest(run_hashes.join("\n").as_bytes());
    let mut combined_hash = String::with_capacity(64);
    for byte in digest {
        combined_hash.push_str(&format!("{byte:02x}"));
    }
    Ok(MergedReport {
        schema_version: schema_version.expect("at least one run").0,
        combined_hash,
        tpr_columns,
        rows,
    })
}

/// The metric-report CSVs of one run directory, in file-name order.
fn report_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let reports = dir.join("reports");
    let entries = std::fs::read_dir(&reports).map_err(|e| {
        CliError::config(format!("{} has no reports directory: {e}", dir.display()))
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn parse_report_rows(
    run: &str,
    arm: &str,
    body: &str,
    path: &Path,
    tpr_columns: &mut Vec<String>,
    rows: &mut Vec<MergedRow>,
) -> Result<(), CliError> {
    let bad = |e: csv::Error| CliError::config(format!("{}: {e}", path.display()));
    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let headers = rdr.headers().map_err(bad)?.clone();
    let index = |name: &str| headers.iter().position(|h| h == name);
    let col = |rec: &csv::StringRecord, name: &str| -> String {
        index(name)
            .and_then(|i| rec.get(i))
            .unwrap_or_default()
            .to_string()
    };
    let file_tpr: Vec<String> = headers
        .iter()
        .filter(|h| h.starts_with("tpr_at_fpr_"))
        .map(str::to_string)
        .collect();
    for name in &file_tpr {
        if !tpr_columns.contains(name) {
            tpr_columns.push(name.clone());
        }
    }
    for record in rdr.records() {
        let record = record.map_err(bad)?;
        let mut tpr = BTreeMap::new();
        for name in &file_tpr {
            tpr.insert(name.clone(), col(&record, name));
        }
        rows.push(MergedRow {
            run: run.to_string(),
            arm: arm.to_string(),
            attack: col(&record, "attack"),
            orientation: col(&record, "orientation"),
            auc: col(&record, "auc"),
            auc_boot_mean: col(&record, "auc_boot_mean"),
            auc_boot_std: col(&record, "auc_boot_std"),
            tpr,
            note: col(&record, "note"),
        });
    }
    Ok(())
}

/// Render one metric as an SVG heatmap: one row per (run, arm), one
/// column per attack. Cell labels are exactly the merged-CSV strings.
pub fn render_heatmap(report: &MergedReport, metric: &str) -> Result<String, CliError> {
    if !report.metric_columns().iter().any(|m| m == metric) {
        return Err(CliError::config(format!(
            "unknown metric `{metric}`; available: {}",
            report.metric_columns().join(", ")
        )));
    }
    let mut row_keys: Vec<(String, String)> = Vec::new();
    let mut col_keys: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), String> = BTreeMap::new();
    for row in &report.rows {
        let rk = (row.run.clone(), row.arm.clone());
        let ri = match row_keys.iter().position(|k| *k == rk) {
            Some(i) => i,
            None => {
                row_keys.push(rk);
                row_keys.len() - 1
            }
        };
        let ci = match col_keys.iter().position(|k| *k == row.attack) {
            Some(i) => i,
            None => {
                col_keys.push(row.attack.clone());
                col_keys.len() - 1
            }
        };
        if let Some(v) = report.value_of(row, metric) {
            cells.insert((ri, ci), v);
        }
    }

    let values: Vec<f64> = cells
        .values()
        .filter_map(|v| v.parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .collect();
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });

    let cell_w = 92.0;
    let cell_h = 26.0;
    let label_w = 16.0
        + 7.0
            * row_keys
                .iter()
                .map(|(run, arm)| run.chars().count() + arm.chars().count() + 1)
                .max()
                .unwrap_or(4) as f64;
    let header_h = 24.0;
    let title_h = 20.0;
    let width = label_w + cell_w * col_keys.len() as f64 + 8.0;
    let height = title_h + header_h + cell_h * row_keys.len() as f64 + 8.0;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<!-- format_version: {} -->\n<!-- config_hash: {} -->\n",
        artifacts::FORMAT_VERSION,
        report.combined_hash
    ));
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         font-family=\"monospace\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{label_w:.1}\" y=\"14\" font-size=\"13\">{}</text>\n",
        xml_escape(metric)
    ));
    for (ci, name) in col_keys.iter().enumerate() {
        let x = label_w + cell_w * (ci as f64 + 0.5);
        let y = title_h + header_h - 8.0;
        svg.push_str(&format!(
            "  <text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"middle\">{}</text>\n",
            xml_escape(name)
        ));
    }
    for (ri, (run, arm)) in row_keys.iter().enumerate() {
        let y = title_h + header_h + cell_h * (ri as f64 + 0.5) + 4.0;
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{y:.1}\" text-anchor=\"end\">{}</text>\n",
            label_w - 6.0,
            xml_escape(&format!("{run}/{arm}"))
        ));
        for ci in 0..col_keys.len() {
            let x = label_w + cell_w * ci as f64;
            let rect_y = title_h + header_h + cell_h * ri as f64;
            match cells.get(&(ri, ci)) {
                Some(value) => {
                    let parsed = value.parse::<f64>().ok().filter(|v| v.is_finite());
                    let t = match parsed {
                        Some(v) if hi > lo => (v - lo) / (hi - lo),
                        Some(_) => 0.5,
                        None => 0.5,
                    };
                    let (r, g, b) = lerp_color((247, 251, 255), (8, 81, 156), t);
                    let text_fill = if t > 0.6 { "#ffffff" } else { "#111111" };
                    svg.push_str(&format!(
                        "  <rect x=\"{x:.1}\" y=\"{rect_y:.1}\" width=\"{cell_w:.1}\" \
                         height=\"{cell_h:.1}\" fill=\"rgb({r},{g},{b})\" stroke=\"#ffffff\"/>\n"
                    ));
                    svg.push_str(&format!(
                        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"{text_fill}\">{}</text>\n",
                        x + cell_w / 2.0,
                        rect_y + cell_h / 2.0 + 4.0,
                        xml_escape(value)
                    ));
                }
                None => {
                    svg.push_str(&format!(
                        "  <rect x=\"{x:.1}\" y=\"{rect_y:.1}\" width=\"{cell_w:.1}\" \
                         height=\"{cell_h:.1}\" fill=\"#e8e8e8\" stroke=\"#ffffff\"/>\n"
                    ));
                }
            }
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn lerp_color(a: (u8, u8, u8), b: (u8, u8, u8), t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let mix = |x: u8, y: u8| (x as f64 + (y as f64 - x as f64) * t).round() as u8;
    (mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
