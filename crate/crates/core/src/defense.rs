//! Selection-and-obfuscation fine-tuning defense.
//!
//! The pipeline warms the model up with one pass over the fine-tuning
//! set, then repeats for a fixed number of epochs: measure a loss
//! threshold on held-out validation text, flag fine-tuning samples the
//! model already fits below that threshold, rebuild the training set
//! with flagged samples partially regenerated from the pre-trained
//! model, and train one epoch on the rebuilt set. Keeping a prefix of
//! each flagged sample and regenerating the rest trades verbatim
//! memorization for in-distribution text.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::train::{train_epoch, warmup_epoch, TrainMode};
use crate::model::LanguageModel;
use crate::scalar::{s, Scalar};
use crate::seeds;

/// How flagged samples get their replacement text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Paraphraser {
    /// Regenerate the non-kept suffix from the pre-trained model.
    Builtin { temperature: f64, seed: u64 },
    /// Look suffixes up in a pre-filled exchange file.
    External { exchange: std::path::PathBuf },
}

/// Defense configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftConfig {
    /// Fraction of each flagged sample kept verbatim (prefix length
    /// ⌈alpha·n⌉ tokens).
    pub alpha: f64,
    /// Number of select-obfuscate-train rounds after warm-up.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seed for warm-up and per-epoch training shuffles.
    pub seed: u64,
    pub paraphraser: Paraphraser,
}

impl Default for SoftConfig {
    fn default() -> Self {
        SoftConfig {
            alpha: 0.5,
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 12,
            seed: 23,
            paraphraser: Paraphraser::Builtin { temperature: 5.0, seed: 1 },
        }
    }
}

impl SoftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive and finite".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if let Paraphraser::Builtin { temperature, .. } = &self.paraphraser {
            if !(*temperature >= 0.0) {
                return Err(Error::InvalidConfig(
                    "paraphrase temperature must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One flagged sample with the loss that flagged it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedSample {
    pub id: String,
    pub loss: f64,
}

/// Outcome of one epoch's influence selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub epoch: usize,
    /// Mean summed negative log-likelihood over the validation set.
    pub threshold: f64,
    /// Samples whose loss fell strictly below the threshold.
    pub flagged: Vec<FlaggedSample>,
    /// Ids of samples at or above the threshold, passed through verbatim.
    pub safe: Vec<String>,
}

/// Where a final-dataset sample's text came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Paraphrased { epoch: usize },
}

/// Everything the defense run produces.
#[derive(Debug, Clone)]
pub struct SoftOutcome<S> {
    pub model: LanguageModel<S>,
    pub reports: Vec<SelectionReport>,
    /// The training set of the final epoch with per-sample provenance.
    pub dataset: Vec<(TokenSequence, Provenance)>,
}

/// One pass over the fine-tuning set, used to expose which samples the
/// model fits quickly before any obfuscation decision is made.
pub fn warmup<S: Scalar>(
    model_pt: &LanguageModel<S>,
    fine_tune: &[TokenSequence],
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<LanguageModel<S>> {
    if fine_tune.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning data is empty".into()));
    }
    warmup_epoch(model_pt, fine_tune, learning_rate, batch_size, seed)
}

/// Flag fine-tuning samples the model already fits better than held-out
/// text: the threshold is the mean summed negative log-likelihood over
/// the validation set, and samples strictly below it are flagged.
pub fn select_influential<S: Scalar>(
    model: &LanguageModel<S>,
    fine_tune: &[TokenSequence],
    validation: &[TokenSequence],
    epoch: usize,
) -> Result<SelectionReport> {
    if validation.is_empty() {
        return Err(Error::InvalidConfig("validation data is empty".into()));
    }
    let to_f = |v: S| num_traits::ToPrimitive::to_f64(&v).expect("finite loss");
    let total: f64 = validation.iter().map(|x| to_f(model.sequence_nll(x))).sum();
    let threshold = total / validation.len() as f64;
    let mut flagged = Vec::new();
    let mut safe = Vec::new();
    for x in fine_tune {
        let loss = to_f(model.sequence_nll(x));
        if loss < threshold {
            flagged.push(FlaggedSample { id: x.id.clone(), loss });
        } else {
            safe.push(x.id.clone());
        }
    }
    Ok(SelectionReport { epoch, threshold, flagged, safe })
}

/// Keep the first ⌈alpha·n⌉ tokens of `x` and regenerate the remaining
/// tokens from `model_pt` conditioned on the kept prefix. The output
/// keeps the input's id and token length. `alpha == 1` returns the
/// input unchanged.
pub fn paraphrase<S: Scalar>(
    model_pt: &LanguageModel<S>,
    x: &TokenSequence,
    alpha: f64,
    temperature: f64,
    seed: u64,
) -> TokenSequence {
    let keep = kept_len(x.tokens.len(), alpha);
    if keep == x.tokens.len() {
        return x.clone();
    }
    let tokens = model_pt.generate(&x.tokens[..keep], x.tokens.len() - keep, temperature, seed);
    TokenSequence {
        id: x.id.clone(),
        raw_text: model_pt.render_tokens(&tokens),
        tokens,
    }
}

/// Prefix length kept verbatim: ⌈alpha·n⌉.
pub fn kept_len(n: usize, alpha: f64) -> usize {
    ((alpha * n as f64).ceil() as usize).min(n)
}

/// One line of the external-paraphrase exchange file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub id: String,
    pub alpha: f64,
    pub kept_prefix_text: String,
    pub original_suffix_text: String,
    /// Left empty on export; the external tool fills it.
    pub paraphrased_suffix_text: String,
}

/// Write one exchange record per sample, splitting each text at the
/// kept-prefix boundary, with the paraphrase slot left empty.
pub fn export_exchange(
    path: &Path,
    samples: &[&TokenSequence],
    alpha: f64,
) -> Result<Vec<ExchangeRecord>> {
    let mut records = Vec::with_capacity(samples.len());
    for x in samples {
        let keep = kept_len(x.tokens.len(), alpha);
        let boundary = char_boundary(&x.raw_text, keep);
        records.push(ExchangeRecord {
            id: x.id.clone(),
            alpha,
            kept_prefix_text: x.raw_text[..boundary].to_string(),
            original_suffix_text: x.raw_text[boundary..].to_string(),
            paraphrased_suffix_text: String::new(),
        });
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records)
}

fn char_boundary(text: &str, chars: usize) -> usize {
    text.char_indices()
        .nth(chars)
        .map(|(i, _)| i)
        .unwrap_or(text.len())
}

/// Parse an exchange file without cross-checking ids.
pub fn read_exchange(path: &Path) -> Result<Vec<ExchangeRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Validate a filled exchange against the ids that were exported:
/// every expected id must be present with a non-empty paraphrase, and
/// no unexpected ids may appear. Returns id → paraphrased suffix.
pub fn import_paraphrased(
    records: &[ExchangeRecord],
    expected_ids: &[String],
) -> Result<BTreeMap<String, String>> {
    let provided: BTreeMap<&str, &ExchangeRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut missing = Vec::new();
    let mut empty = Vec::new();
    for id in expected_ids {
        match provided.get(id.as_str()) {
            None => missing.push(id.clone()),
            Some(r) if r.paraphrased_suffix_text.is_empty() => empty.push(id.clone()),
            Some(_) => {}
        }
    }
    let unknown: Vec<String> = records
        .iter()
        .map(|r| r.id.clone())
        .filter(|id| !expected_ids.contains(id))
        .collect();
    if !missing.is_empty() || !empty.is_empty() || !unknown.is_empty() {
        return Err(Error::ExchangeInvalid { missing, empty, unknown });
    }
    Ok(records
        .iter()
        .map(|r| (r.id.clone(), r.paraphrased_suffix_text.clone()))
        .collect())
}

/// Replacement text supplier for one epoch's flagged samples.
enum Obfuscator {
    Builtin { temperature: f64, seed: u64 },
    External { suffixes: BTreeMap<String, String> },
}

impl Obfuscator {
    fn obfuscate<S: Scalar>(
        &self,
        model_pt: &LanguageModel<S>,
        x: &TokenSequence,
        alpha: f64,
        epoch: usize,
    ) -> Result<TokenSequence> {
        match self {
            Obfuscator::Builtin { temperature, seed } => {
                let sample_seed =
                    seeds::derive(*seed, &format!("paraphrase-{epoch}-{}", x.id));
                Ok(paraphrase(model_pt, x, alpha, *temperature, sample_seed))
            }
            Obfuscator::External { suffixes } => {
                let keep = kept_len(x.tokens.len(), alpha);
                if keep == x.tokens.len() {
                    return Ok(x.clone());
                }
                let suffix = suffixes
                    .get(&x.id)
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| Error::MissingParaphrase { id: x.id.clone() })?;
                let boundary = char_boundary(&x.raw_text, keep);
                let text = format!("{}{}", &x.raw_text[..boundary], suffix);
                model_pt.vocab.tokenize(x.id.clone(), &text)
            }
        }
    }
}

/// Run the full defense: warm-up, then per epoch select → obfuscate →
/// train. Each epoch's training set is rebuilt from the original
/// fine-tuning samples with exactly that epoch's flagged ids replaced,
/// so never-flagged samples always pass through verbatim. The returned
/// dataset is the final epoch's training set.
pub fn soft_fine_tune<S: Scalar>(
    model_pt: &LanguageModel<S>,
    fine_tune: &[TokenSequence],
    validation: &[TokenSequence],
    cfg: &SoftConfig,
) -> Result<SoftOutcome<S>> {
    cfg.validate()?;
    if fine_tune.is_empty() {
        return Err(Error::InvalidConfig("fine-tuning data is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::InvalidConfig("validation data is empty".into()));
    }

    let obfuscator = match &cfg.paraphraser {
        Paraphraser::Builtin { temperature, seed } => Obfuscator::Builtin {
            temperature: *temperature,
            seed: *seed,
        },
        Paraphraser::External { exchange } => Obfuscator::External {
            suffixes: read_exchange(exchange)?
                .into_iter()
                .map(|r| (r.id, r.paraphrased_suffix_text))
                .collect(),
        },
    };

    let mut model =
        warmup_epoch(model_pt, fine_tune, cfg.learning_rate, cfg.batch_size, cfg.seed)?;
    // The warm-up consumed its own steps; epochs continue the counter so
    // a divergence step number is globally unambiguous.
    let mut step = fine_tune.len().div_ceil(cfg.batch_size);
    let lr = s::<S>(cfg.learning_rate);

    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut dataset: Vec<(TokenSequence, Provenance)> = Vec::new();
    for epoch in 0..cfg.epochs {
        let report = select_influential(&model, fine_tune, validation, epoch)?;
        let flagged: BTreeMap<&str, ()> =
            report.flagged.iter().map(|f| (f.id.as_str(), ())).collect();
        dataset = fine_tune
            .iter()
            .map(|x| {
                if flagged.contains_key(x.id.as_str()) {
                    let replaced = obfuscator.obfuscate(model_pt, x, cfg.alpha, epoch)?;
                    let provenance = if replaced.tokens == x.tokens {
                        Provenance::Original
                    } else {
                        Provenance::Paraphrased { epoch }
                    };
                    Ok((replaced, provenance))
                } else {
                    Ok((x.clone(), Provenance::Original))
                }
            })
            .collect::<Result<_>>()?;
        reports.push(report);

        let texts: Vec<TokenSequence> = dataset.iter().map(|(x, _)| x.clone()).collect();
        train_epoch(
            &mut model,
            &texts,
            lr,
            cfg.batch_size,
            TrainMode::Full,
            seeds::derive_indexed(cfg.seed, "epoch-shuffle", epoch as u64),
            &mut step,
        )?;
    }

    Ok(SoftOutcome { model, reports, dataset })
}

/// Write per-epoch selection reports as line-delimited JSON.
pub fn write_selection_reports(path: &Path, reports: &[SelectionReport]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read selection reports written by [`write_selection_reports`].
pub fn read_selection_reports(path: &Path) -> Result<Vec<SelectionReport>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut reports = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        reports.push(serde_json::from_str(&line)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kept_prefix_length_uses_the_ceiling_rule() {
        assert_eq!(kept_len(10, 0.5), 5);
        assert_eq!(kept_len(11, 0.5), 6); // odd length keeps the longer half
        assert_eq!(kept_len(10, 0.0), 0);
        assert_eq!(kept_len(10, 1.0), 10);
        assert_eq!(kept_len(10, 0.01), 1);
        assert_eq!(kept_len(0, 0.5), 0);
    }

    #[test]
    fn config_domains_are_enforced() {
        let ok = SoftConfig::default();
        assert!(ok.validate().is_ok());
        assert!(SoftConfig { alpha: -0.1, ..ok.clone() }.validate().is_err());
        assert!(SoftConfig { alpha: 1.1, ..ok.clone() }.validate().is_err());
        assert!(SoftConfig { epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(SoftConfig { learning_rate: 0.0, ..ok.clone() }.validate().is_err());
        assert!(SoftConfig { batch_size: 0, ..ok }.validate().is_err());
    }
}
