//! Line-delimited file formats for corpora and membership datasets.
//!
//! Datasets are stored as one JSON record per line with the raw text
//! verbatim; tokenization happens at load time against an explicit
//! vocabulary so files stay model-independent.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{MembershipDataset, Role, SplitConfig, SplitStats, Vocabulary};
use crate::error::{Error, Result};

/// Version stamped into dataset and manifest files.
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One dataset line: `{id, text, role}` plus an optional provenance tag
/// (`original` or `paraphrased@<epoch>`) for defended training sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub text: String,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
}

/// Sidecar manifest describing how a dataset file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub split: SplitConfig,
    pub stats: SplitStats,
    pub members: usize,
    pub nonmembers: usize,
    pub validation: usize,
}

impl SplitManifest {
    pub fn describe(dataset: &MembershipDataset, config_hash: impl Into<String>) -> Self {
        SplitManifest {
            format_version: DATASET_FORMAT_VERSION,
            config_hash: config_hash.into(),
            split: dataset.config.clone(),
            stats: dataset.stats.clone(),
            members: dataset.members.len(),
            nonmembers: dataset.nonmembers.len(),
            validation: dataset.validation.len(),
        }
    }
}

/// Write dataset records (members, then nonmembers, then validation).
pub fn write_dataset(path: &Path, dataset: &MembershipDataset) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (role, seq) in dataset.iter_roles() {
        let rec = DatasetRecord {
            id: seq.id.clone(),
            text: seq.raw_text.clone(),
            role,
            provenance: None,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reassemble a dataset from records, tokenizing against `vocab`.
pub fn dataset_from_records(
    records: &[DatasetRecord],
    vocab: &Vocabulary,
    config: SplitConfig,
    stats: SplitStats,
) -> Result<MembershipDataset> {
    let mut dataset = MembershipDataset {
        members: Vec::new(),
        nonmembers: Vec::new(),
        validation: Vec::new(),
        config,
        stats,
    };
    for rec in records {
        let seq = vocab.tokenize(rec.id.clone(), &rec.text)?;
        match rec.role {
            Role::Member => dataset.members.push(seq),
            Role::Nonmember => dataset.nonmembers.push(seq),
            Role::Validation => dataset.validation.push(seq),
        }
    }
    Ok(dataset)
}

/// A corpus document line: `{id, text}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
}

/// Load corpus documents. `.jsonl` files carry one `{id, text}` record
/// per line; any other file is one whole document named after its stem.
pub fn load_corpus_documents(path: &Path) -> Result<Vec<(String, String)>> {
    let is_jsonl = path.extension().is_some_and(|e| e == "jsonl");
    if !is_jsonl {
        let text = std::fs::read_to_string(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "doc".to_string());
        return Ok(vec![(id, text)]);
    }
    let file = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        docs.push((rec.id, rec.text));
    }
    Ok(docs)
}

pub fn write_corpus_documents(path: &Path, docs: &[(String, String)]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (id, text) in docs {
        let rec = CorpusRecord { id: id.clone(), text: text.clone() };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
