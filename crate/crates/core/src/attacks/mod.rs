//! Membership scoring functions.
//!
//! Each attack maps a candidate sequence to a real score together with an
//! orientation flag saying whether members are expected to score higher
//! or lower. Metrics consume scores only through (score, orientation)
//! pairs, so every attack can implement its defining formula verbatim.

pub mod logistic;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Role, TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, LogProbTrace};
use crate::scalar::{s, Scalar};
pub use logistic::{fit_logistic, Logistic};

/// Zlib compression level used by the zlib score (the format's default).
pub const ZLIB_LEVEL: u32 = 6;

/// Standard-deviation floor for the standardized per-token score.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// The seven k thresholds feeding the ensemble's standardized-min-k
/// feature block.
pub const ENSEMBLE_K_VALUES: [usize; 7] = [10, 20, 30, 40, 50, 60, 70];

/// Number of ensemble features.
pub const ENSEMBLE_DIM: usize = 12;

/// Which direction of a raw score indicates membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsMember,
    LowerIsMember,
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Orientation::HigherIsMember => "higher_is_member",
            Orientation::LowerIsMember => "lower_is_member",
        })
    }
}

/// The attack roster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    Loss,
    Zlib,
    Lowercase,
    MinK,
    MinKpp,
    Ratio,
    Recall,
    ConRecall,
    BagOfWords,
    Ensemble,
}

impl Attack {
    pub const ALL: [Attack; 10] = [
        Attack::Loss,
        Attack::Zlib,
        Attack::Lowercase,
        Attack::MinK,
        Attack::MinKpp,
        Attack::Ratio,
        Attack::Recall,
        Attack::ConRecall,
        Attack::BagOfWords,
        Attack::Ensemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attack::Loss => "loss",
            Attack::Zlib => "zlib",
            Attack::Lowercase => "lowercase",
            Attack::MinK => "min_k",
            Attack::MinKpp => "min_kpp",
            Attack::Ratio => "ratio",
            Attack::Recall => "recall",
            Attack::ConRecall => "con_recall",
            Attack::BagOfWords => "bag_of_words",
            Attack::Ensemble => "ensemble",
        }
    }

    /// The per-attack orientation ledger. Scores implement each formula
    /// as written; this flag records the membership direction that
    /// metrics must apply.
    pub fn orientation(self) -> Orientation {
        match self {
            Attack::Loss | Attack::Zlib => Orientation::HigherIsMember,
            // The standardized min-k score rises with memorization (its
            // per-token score is centered log-probability, not loss).
            Attack::MinKpp => Orientation::HigherIsMember,
            Attack::BagOfWords | Attack::Ensemble => Orientation::HigherIsMember,
            Attack::Lowercase | Attack::MinK | Attack::Ratio => Orientation::LowerIsMember,
            Attack::Recall | Attack::ConRecall => Orientation::LowerIsMember,
        }
    }

    /// Whether the attack needs a fitted classifier rather than a closed
    /// formula.
    pub fn is_trainable(self) -> bool {
        matches!(self, Attack::BagOfWords | Attack::Ensemble)
    }
}

impl std::fmt::Display for Attack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Attack {
    type Err = Error;
    fn from_str(name: &str) -> Result<Attack> {
        Attack::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attack `{name}`")))
    }
}

/// Everything the scorers need about the models under attack.
#[derive(Debug, Clone)]
pub struct AttackContext<'a, S> {
    pub target: &'a LanguageModel<S>,
    /// Calibration model for the ratio score and the ensemble feature.
    pub reference: Option<&'a LanguageModel<S>>,
    /// Conditioning shots drawn from known nonmembers.
    pub nonmember_prefix: Option<TokenSequence>,
    /// Conditioning shots drawn from suspected members.
    pub member_prefix: Option<TokenSequence>,
    /// Contrast strength of the two-prefix score.
    pub gamma: f64,
    /// Selection percentage for the minimum-probability scores.
    pub k_percent: usize,
}

impl<'a, S: Scalar> AttackContext<'a, S> {
    pub fn new(target: &'a LanguageModel<S>) -> Self {
        AttackContext {
            target,
            reference: None,
            nonmember_prefix: None,
            member_prefix: None,
            gamma: 1.0,
            k_percent: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidConfig("gamma must be >= 0".into()));
        }
        if self.k_percent == 0 || self.k_percent > 100 {
            return Err(Error::InvalidConfig("k_percent must be in 1..=100".into()));
        }
        Ok(())
    }

    /// Check that the inputs a specific attack relies on are present.
    pub fn validate_for(&self, attack: Attack) -> Result<()> {
        self.validate()?;
        match attack {
            Attack::Ratio | Attack::Ensemble if self.reference.is_none() => {
                Err(Error::MissingReference { attack: attack.name() })
            }
            Attack::Recall | Attack::ConRecall if self.nonmember_prefix.is_none() => {
                Err(Error::MissingPrefix { attack: attack.name() })
            }
            Attack::ConRecall if self.member_prefix.is_none() => {
                Err(Error::MissingPrefix { attack: attack.name() })
            }
            _ => Ok(()),
        }
    }

    /// Compute every trace the given roster can consume for one sample.
    /// Trace computation is infallible; attacks whose inputs are absent
    /// simply find the corresponding slot empty and report their own
    /// errors.
    pub fn prepare(&self, x: &TokenSequence, roster: &[Attack]) -> SampleTraces<S> {
        let has = |a: Attack| roster.contains(&a);
        let target = self.target.trace(x);
        let lowercase = (has(Attack::Lowercase) || has(Attack::Ensemble)).then(|| {
            let lowered = self.target.vocab.lowercase_sequence(x);
            self.target.trace(&lowered)
        });
        let reference = match self.reference {
            Some(r) if has(Attack::Ratio) || has(Attack::Ensemble) => Some(r.trace(x)),
            _ => None,
        };
        let cond_nonmember = match &self.nonmember_prefix {
            Some(p) if has(Attack::Recall) || has(Attack::ConRecall) => {
                Some(self.target.conditional_trace(&p.tokens, x))
            }
            _ => None,
        };
        let cond_member = match &self.member_prefix {
            Some(p) if has(Attack::ConRecall) => Some(self.target.conditional_trace(&p.tokens, x)),
            _ => None,
        };
        SampleTraces {
            raw_text: x.raw_text.clone(),
            target,
            lowercase,
            reference,
            cond_nonmember,
            cond_member,
        }
    }

    /// Score one sample under one closed-formula attack, computing the
    /// traces it needs on the fly. Trainable attacks need a fitted
    /// classifier and are not served here.
    pub fn score(&self, attack: Attack, x: &TokenSequence) -> Result<S> {
        self.validate_for(attack)?;
        let traces = self.prepare(x, &[attack]);
        score_from_traces(attack, &traces, self.gamma, self.k_percent)
    }
}

/// Precomputed traces for one sample, shared across the roster.
#[derive(Debug, Clone)]
pub struct SampleTraces<S> {
    pub raw_text: String,
    pub target: LogProbTrace<S>,
    pub lowercase: Option<LogProbTrace<S>>,
    pub reference: Option<LogProbTrace<S>>,
    pub cond_nonmember: Option<LogProbTrace<S>>,
    pub cond_member: Option<LogProbTrace<S>>,
}

/// Dispatch a closed-formula attack over prepared traces.
pub fn score_from_traces<S: Scalar>(
    attack: Attack,
    traces: &SampleTraces<S>,
    gamma: f64,
    k_percent: usize,
) -> Result<S> {
    match attack {
        Attack::Loss => Ok(score_loss(&traces.target)),
        Attack::Zlib => score_zlib(&traces.target, &traces.raw_text),
        Attack::Lowercase => {
            let lower = traces
                .lowercase
                .as_ref()
                .ok_or(Error::MissingPrefix { attack: "lowercase" })?;
            score_lowercase(&traces.target, lower)
        }
        Attack::MinK => score_min_k(&traces.target, k_percent),
        Attack::MinKpp => score_min_kpp(&traces.target, k_percent),
        Attack::Ratio => {
            let r = traces
                .reference
                .as_ref()
                .ok_or(Error::MissingReference { attack: "ratio" })?;
            score_ratio(&traces.target, r)
        }
        Attack::Recall => {
            let c = traces
                .cond_nonmember
                .as_ref()
                .ok_or(Error::MissingPrefix { attack: "recall" })?;
            score_recall(&traces.target, c)
        }
        Attack::ConRecall => {
            let cn = traces
                .cond_nonmember
                .as_ref()
                .ok_or(Error::MissingPrefix { attack: "con_recall" })?;
            let cm = traces
                .cond_member
                .as_ref()
                .ok_or(Error::MissingPrefix { attack: "con_recall" })?;
            score_con_recall(&traces.target, cn, cm, gamma)
        }
        Attack::BagOfWords | Attack::Ensemble => Err(Error::InvalidConfig(format!(
            "{} needs a fitted classifier",
            attack.name()
        ))),
    }
}

/// Negated summed negative log-likelihood: members (memorized text)
/// score closer to zero from below.
pub fn score_loss<S: Scalar>(trace: &LogProbTrace<S>) -> S {
    -trace.nll_sum()
}

/// Bit length of the zlib-format compression of `text` at the fixed
/// level, used to normalize loss by compressibility.
pub fn zlib_bits(text: &str) -> Result<u64> {
    use flate2::write::ZlibEncoder;
    use flate2::Compression;
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::new(ZLIB_LEVEL));
    enc.write_all(text.as_bytes())?;
    let compressed = enc.finish()?;
    Ok(8 * compressed.len() as u64)
}

/// Summed log-likelihood divided by the compressed bit length.
pub fn score_zlib<S: Scalar>(trace: &LogProbTrace<S>, raw_text: &str) -> Result<S> {
    if raw_text.is_empty() {
        return Err(Error::EmptyText);
    }
    let bits = zlib_bits(raw_text)?;
    Ok(-trace.nll_sum() / s::<S>(bits as f64))
}

/// Loss of the sample divided by the loss of its lowercased form.
pub fn score_lowercase<S: Scalar>(
    trace: &LogProbTrace<S>,
    lowercase_trace: &LogProbTrace<S>,
) -> Result<S> {
    let denom = lowercase_trace.nll_sum();
    if denom == S::zero() {
        return Err(Error::DegenerateDenominator { attack: "lowercase" });
    }
    Ok(trace.nll_sum() / denom)
}

/// Number of positions the k-percent rules select from an `n`-token
/// sequence: ⌈k·n/100⌉.
fn k_count(n: usize, k_percent: usize) -> usize {
    (k_percent * n).div_ceil(100)
}

fn validate_k(trace_len: usize, k_percent: usize) -> Result<()> {
    if k_percent == 0 || k_percent > 100 {
        return Err(Error::InvalidConfig("k_percent must be in 1..=100".into()));
    }
    if trace_len == 0 {
        return Err(Error::EmptyText);
    }
    Ok(())
}

/// Indices of the `count` smallest values, by (value, index) order;
/// returned sorted by index so downstream sums are position-ordered.
fn lowest_indices<S: Scalar>(values: &[S], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected = idx[..count].to_vec();
    selected.sort_unstable();
    selected
}

/// Mean negative log-probability over the ⌈k%·n⌉ least likely positions.
/// At k = 100 this is exactly the mean NLL of the sequence.
pub fn score_min_k<S: Scalar>(trace: &LogProbTrace<S>, k_percent: usize) -> Result<S> {
    validate_k(trace.len(), k_percent)?;
    let count = k_count(trace.len(), k_percent);
    let selected = lowest_indices(&trace.logp, count);
    let sum: S = selected.iter().map(|&i| trace.logp[i]).sum();
    Ok(-(sum / s::<S>(count as f64)))
}

/// Mean of the standardized per-token scores `(logp − μ)/max(σ, floor)`
/// over the ⌈k%·n⌉ lowest-scoring positions. Memorized text pushes the
/// realized log-probability above the distribution mean, so members
/// score higher.
pub fn score_min_kpp<S: Scalar>(trace: &LogProbTrace<S>, k_percent: usize) -> Result<S> {
    validate_k(trace.len(), k_percent)?;
    let floor = s::<S>(SIGMA_FLOOR);
    let token_scores: Vec<S> = trace
        .logp
        .iter()
        .zip(&trace.mu)
        .zip(&trace.sigma)
        .map(|((&lp, &mu), &sd)| (lp - mu) / sd.max(floor))
        .collect();
    let count = k_count(token_scores.len(), k_percent);
    let selected = lowest_indices(&token_scores, count);
    let sum: S = selected.iter().map(|&i| token_scores[i]).sum();
    Ok(sum / s::<S>(count as f64))
}

/// Target loss divided by reference loss.
pub fn score_ratio<S: Scalar>(
    target_trace: &LogProbTrace<S>,
    reference_trace: &LogProbTrace<S>,
) -> Result<S> {
    let denom = reference_trace.nll_sum();
    if denom == S::zero() {
        return Err(Error::DegenerateDenominator { attack: "ratio" });
    }
    Ok(target_trace.nll_sum() / denom)
}

/// Prefix-conditioned log-likelihood divided by the unconditional one.
pub fn score_recall<S: Scalar>(
    trace: &LogProbTrace<S>,
    conditional: &LogProbTrace<S>,
) -> Result<S> {
    let denom = -trace.nll_sum();
    if denom == S::zero() {
        return Err(Error::DegenerateDenominator { attack: "recall" });
    }
    Ok(-conditional.nll_sum() / denom)
}

/// Contrast of nonmember- and member-prefixed log-likelihoods over the
/// unconditional one; `gamma` scales the member-prefix term, and zero
/// gamma reduces to the single-prefix score exactly.
pub fn score_con_recall<S: Scalar>(
    trace: &LogProbTrace<S>,
    cond_nonmember: &LogProbTrace<S>,
    cond_member: &LogProbTrace<S>,
    gamma: f64,
) -> Result<S> {
    let denom = -trace.nll_sum();
    if denom == S::zero() {
        return Err(Error::DegenerateDenominator { attack: "con_recall" });
    }
    let numer = -cond_nonmember.nll_sum() - s::<S>(gamma) * -cond_member.nll_sum();
    Ok(numer / denom)
}

/// Concatenate conditioning shots and truncate to `max_tokens`, keeping
/// raw text and tokens in lockstep.
pub fn assemble_prefix(
    id: impl Into<String>,
    shots: &[&TokenSequence],
    max_tokens: usize,
) -> TokenSequence {
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut raw = String::new();
    for shot in shots {
        for (tok, ch) in shot.tokens.iter().zip(shot.raw_text.chars()) {
            if tokens.len() == max_tokens {
                break;
            }
            tokens.push(*tok);
            raw.push(ch);
        }
    }
    TokenSequence { id: id.into(), raw_text: raw, tokens }
}

/// Token-count classifier over the most frequent training tokens; it
/// never consults a model, so it measures pure distribution shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowClassifier {
    pub top_tokens: Vec<TokenId>,
    pub model: Logistic,
}

/// The `top_v` most frequent tokens over the rows, ties broken by id.
pub fn top_tokens<'a>(
    rows: impl IntoIterator<Item = &'a TokenSequence>,
    top_v: usize,
) -> Vec<TokenId> {
    let mut counts: HashMap<TokenId, u64> = HashMap::new();
    for row in rows {
        for &t in &row.tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(TokenId, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_v);
    ranked.into_iter().map(|(t, _)| t).collect()
}

/// Occurrence counts of each vocabulary token of interest.
pub fn count_features(top: &[TokenId], x: &TokenSequence) -> Vec<f64> {
    let mut feat = vec![0.0; top.len()];
    for &t in &x.tokens {
        if let Some(pos) = top.iter().position(|&c| c == t) {
            feat[pos] += 1.0;
        }
    }
    feat
}

/// Fit the token-count classifier. `seed` is accepted for interface
/// stability; the deterministic trainer draws nothing from it.
pub fn bow_fit(
    rows: &[(&TokenSequence, bool)],
    top_v: usize,
    _seed: u64,
) -> Result<BowClassifier> {
    if top_v == 0 {
        return Err(Error::InvalidConfig("top_v must be positive".into()));
    }
    let top = top_tokens(rows.iter().map(|(x, _)| *x), top_v);
    let features: Vec<Vec<f64>> = rows.iter().map(|(x, _)| count_features(&top, x)).collect();
    let labels: Vec<bool> = rows.iter().map(|(_, y)| *y).collect();
    let model = fit_logistic(&features, &labels)?;
    Ok(BowClassifier { top_tokens: top, model })
}

/// Membership probability of a sequence under the token-count classifier.
pub fn bow_score(clf: &BowClassifier, x: &TokenSequence) -> f64 {
    clf.model.probability(&count_features(&clf.top_tokens, x))
}

/// Logistic classifier over the fixed 12-feature bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleClassifier {
    pub model: Logistic,
}

/// The 12-feature bundle: negated loss, per-sequence perplexity,
/// lowercase ratio, zlib score, the standardized-min-k score at the
/// seven fixed thresholds, and the reference ratio.
pub fn ensemble_features<S: Scalar>(traces: &SampleTraces<S>) -> Result<Vec<f64>> {
    let lower = traces
        .lowercase
        .as_ref()
        .ok_or(Error::MissingPrefix { attack: "ensemble" })?;
    let reference = traces
        .reference
        .as_ref()
        .ok_or(Error::MissingReference { attack: "ensemble" })?;

    let to_f = |v: S| num_traits::ToPrimitive::to_f64(&v).expect("finite feature");
    let mut feats = Vec::with_capacity(ENSEMBLE_DIM);
    feats.push(to_f(score_loss(&traces.target)));
    feats.push(to_f(traces.target.nll_mean()).exp());
    feats.push(to_f(score_lowercase(&traces.target, lower)?));
    feats.push(to_f(score_zlib(&traces.target, &traces.raw_text)?));
    for k in ENSEMBLE_K_VALUES {
        feats.push(to_f(score_min_kpp(&traces.target, k)?));
    }
    feats.push(to_f(score_ratio(&traces.target, reference)?));
    debug_assert_eq!(feats.len(), ENSEMBLE_DIM);
    Ok(feats)
}

/// Fit the 12-feature classifier on labeled feature rows.
pub fn ensemble_fit(rows: &[(Vec<f64>, bool)], _seed: u64) -> Result<EnsembleClassifier> {
    let features: Vec<Vec<f64>> = rows.iter().map(|(f, _)| f.clone()).collect();
    let labels: Vec<bool> = rows.iter().map(|(_, y)| *y).collect();
    if features.iter().any(|f| f.len() != ENSEMBLE_DIM) {
        return Err(Error::InvalidConfig(format!(
            "ensemble features must have width {ENSEMBLE_DIM}"
        )));
    }
    Ok(EnsembleClassifier { model: fit_logistic(&features, &labels)? })
}

/// Membership probability of a feature row under the fitted classifier.
pub fn ensemble_score(clf: &EnsembleClassifier, features: &[f64]) -> f64 {
    clf.model.probability(features)
}

/// One scored sample: per-attack cells are absent when that attack was
/// unavailable or failed for the sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRow {
    pub seq_id: String,
    pub label: Role,
    /// Rows reserved for fitting the trainable attacks; metrics exclude
    /// them for every attack so all attacks face the same evaluation set.
    pub calibration: bool,
    pub scores: BTreeMap<String, Option<f64>>,
}

/// All scores of one run, with the orientation ledger attached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreTable {
    pub attacks: Vec<Attack>,
    pub rows: Vec<ScoreRow>,
    /// First error message per attack that produced empty cells.
    pub notes: BTreeMap<String, String>,
}

impl ScoreTable {
    pub fn orientations(&self) -> BTreeMap<String, Orientation> {
        self.attacks
            .iter()
            .map(|a| (a.name().to_string(), a.orientation()))
            .collect()
    }

    /// Member and nonmember scores of one attack over evaluation rows
    /// (calibration rows excluded), skipping empty cells.
    pub fn eval_scores(&self, attack: Attack) -> (Vec<f64>, Vec<f64>) {
        let mut members = Vec::new();
        let mut nonmembers = Vec::new();
        for row in &self.rows {
            if row.calibration {
                continue;
            }
            let Some(Some(v)) = row.scores.get(attack.name()) else { continue };
            match row.label {
                Role::Member => members.push(*v),
                Role::Nonmember => nonmembers.push(*v),
                Role::Validation => {}
            }
        }
        (members, nonmembers)
    }

    /// Deterministic CSV rendering: header, then rows in stored order.
    /// Scores print in shortest round-trip form; empty cells stay empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seq_id,label,calibration");
        for a in &self.attacks {
            out.push(',');
            out.push_str(a.name());
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.seq_id);
            out.push(',');
            out.push_str(&row.label.to_string());
            out.push(',');
            out.push_str(if row.calibration { "1" } else { "0" });
            for a in &self.attacks {
                out.push(',');
                if let Some(Some(v)) = row.scores.get(a.name()) {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}
