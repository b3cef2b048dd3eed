//! Attack-suite evaluation: run a roster of membership scores over a
//! labeled candidate set, fit the trainable classifiers on a held-out
//! calibration split, and reduce the scores to ranking metrics.

pub mod adaptive;
pub mod metrics;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    count_features, ensemble_features, fit_logistic, score_from_traces, top_tokens, Attack,
    AttackContext, Orientation, ScoreRow, ScoreTable,
};
use crate::corpus::{MembershipDataset, Role, TokenSequence};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeds;

/// How per-variant scores of one candidate combine into its cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

impl Aggregation {
    fn combine(self, values: &[f64]) -> f64 {
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Max => values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
        }
    }
}

/// Suite-level knobs. Per-attack inputs (reference model, prefixes,
/// gamma, k) live on the [`AttackContext`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub attacks: Vec<Attack>,
    /// Fraction of each class reserved for fitting trainable attacks.
    pub calibration_fraction: f64,
    /// Vocabulary-count features kept by the token-count classifier.
    pub top_v: usize,
    pub n_bootstrap: usize,
    pub fpr_levels: Vec<f64>,
    /// Reduction over per-variant scores; irrelevant for single-variant
    /// candidates. Classifier fitting always uses mean features.
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            attacks: Attack::ALL.to_vec(),
            calibration_fraction: 0.2,
            top_v: 64,
            n_bootstrap: 1000,
            fpr_levels: vec![0.01],
            aggregation: Aggregation::Mean,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attacks.is_empty() {
            return Err(Error::InvalidConfig("attack roster is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for a in &self.attacks {
            if !seen.insert(a) {
                return Err(Error::InvalidConfig(format!("duplicate attack `{a}`")));
            }
        }
        if !(0.0..1.0).contains(&self.calibration_fraction) {
            return Err(Error::InvalidConfig(
                "calibration_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.top_v == 0 {
            return Err(Error::InvalidConfig("top_v must be positive".into()));
        }
        if self.n_bootstrap == 0 {
            return Err(Error::InvalidConfig("n_bootstrap must be at least 1".into()));
        }
        for &f in &self.fpr_levels {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "fpr level must lie in (0, 1), got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// One labeled unit of evaluation. A plain run has one variant per
/// candidate; adaptive attackers may score several paraphrase variants
/// whose scores are averaged.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub id: String,
    pub label: Role,
    pub variants: Vec<TokenSequence>,
}

impl Candidate {
    pub fn single(label: Role, seq: TokenSequence) -> Candidate {
        Candidate { id: seq.id.clone(), label, variants: vec![seq] }
    }
}

/// Point metrics of one attack over the evaluation rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub auc: f64,
    pub auc_boot_mean: f64,
    pub auc_boot_std: f64,
    /// Keyed by the budget level rendered in shortest round-trip form.
    pub tpr_at_fpr: BTreeMap<String, f64>,
}

/// Metric row of one attack, or the reason it produced none.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: Attack,
    pub orientation: Orientation,
    pub n_member: usize,
    pub n_nonmember: usize,
    pub values: Option<MetricValues>,
    pub note: Option<String>,
}

/// Metrics for every attack in the roster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_bootstrap: usize,
    pub seed: u64,
    pub fpr_levels: Vec<f64>,
    pub attacks: Vec<AttackReport>,
}

impl MetricReport {
    pub fn attack(&self, attack: Attack) -> Option<&AttackReport> {
        self.attacks.iter().find(|r| r.attack == attack)
    }

    pub fn auc_of(&self, attack: Attack) -> Option<f64> {
        self.attack(attack)?.values.as_ref().map(|v| v.auc)
    }

    pub fn tpr_of(&self, attack: Attack, fpr: f64) -> Option<f64> {
        self.attack(attack)?
            .values
            .as_ref()?
            .tpr_at_fpr
            .get(&format!("{fpr}"))
            .copied()
    }

    /// Deterministic CSV: one row per attack, fixed column order,
    /// six-decimal metric formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("attack,orientation,n_member,n_nonmember,auc,auc_boot_mean,auc_boot_std");
        for f in &self.fpr_levels {
            out.push_str(&format!(",tpr_at_fpr_{f}"));
        }
        out.push_str(",note\n");
        for row in &self.attacks {
            out.push_str(row.attack.name());
            out.push(',');
            out.push_str(&row.orientation.to_string());
            out.push_str(&format!(",{},{}", row.n_member, row.n_nonmember));
            match &row.values {
                Some(v) => {
                    out.push_str(&format!(
                        ",{:.6},{:.6},{:.6}",
                        v.auc, v.auc_boot_mean, v.auc_boot_std
                    ));
                    for f in &self.fpr_levels {
                        match v.tpr_at_fpr.get(&format!("{f}")) {
                            Some(t) => out.push_str(&format!(",{t:.6}")),
                            None => out.push(','),
                        }
                    }
                }
                None => {
                    for _ in 0..3 + self.fpr_levels.len() {
                        out.push(',');
                    }
                }
            }
            out.push(',');
            if let Some(note) = &row.note {
                out.push_str(&csv_quote(note));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Scores plus metrics of one suite run.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub table: ScoreTable,
    pub report: MetricReport,
}

/// Run the roster over a membership dataset: members and nonmembers are
/// scored one variant each, validation sequences are not scored.
pub fn run_attack_suite<S: Scalar>(
    ctx: &AttackContext<'_, S>,
    dataset: &MembershipDataset,
    cfg: &SuiteConfig,
) -> Result<SuiteOutcome> {
    let candidates: Vec<Candidate> = dataset
        .members
        .iter()
        .map(|x| Candidate::single(Role::Member, x.clone()))
        .chain(
            dataset
                .nonmembers
                .iter()
                .map(|x| Candidate::single(Role::Nonmember, x.clone())),
        )
        .collect();
    run_candidate_suite(ctx, &candidates, cfg)
}

/// Run the roster over explicit candidates (the adaptive entry point).
pub fn run_candidate_suite<S: Scalar>(
    ctx: &AttackContext<'_, S>,
    candidates: &[Candidate],
    cfg: &SuiteConfig,
) -> Result<SuiteOutcome> {
    cfg.validate()?;
    ctx.validate()?;
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("candidate set is empty".into()));
    }
    for c in candidates {
        if c.variants.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "candidate `{}` has no variants",
                c.id
            )));
        }
        if c.label == Role::Validation {
            return Err(Error::InvalidConfig(format!(
                "candidate `{}` carries the validation role",
                c.id
            )));
        }
    }

    let calibration = calibration_flags(candidates, cfg);
    let mut notes: BTreeMap<String, String> = BTreeMap::new();
    let note_once = |attack: Attack, msg: String, notes: &mut BTreeMap<String, String>| {
        notes.entry(attack.name().to_string()).or_insert(msg);
    };

    // Closed-formula scores and ensemble feature vectors per candidate.
    let formula: Vec<Attack> = cfg
        .attacks
        .iter()
        .copied()
        .filter(|a| !a.is_trainable())
        .collect();
    let want_ensemble = cfg.attacks.contains(&Attack::Ensemble);
    let want_bow = cfg.attacks.contains(&Attack::BagOfWords);

    // Column-level input checks: a missing model or prefix disables the
    // whole attack up front rather than failing per sample.
    let mut disabled: BTreeMap<Attack, String> = BTreeMap::new();
    for &a in &cfg.attacks {
        if let Err(e) = ctx.validate_for(a) {
            disabled.insert(a, e.to_string());
        }
    }

    let roster_for_traces: Vec<Attack> = cfg
        .attacks
        .iter()
        .copied()
        .filter(|a| !disabled.contains_key(a))
        .collect();

    let mut score_cells: Vec<BTreeMap<String, Option<f64>>> =
        vec![BTreeMap::new(); candidates.len()];
    // Per-candidate, per-variant ensemble feature vectors.
    let mut ensemble_rows: Vec<Option<Vec<Vec<f64>>>> = vec![None; candidates.len()];

    for (ci, cand) in candidates.iter().enumerate() {
        let mut variant_scores: BTreeMap<Attack, Vec<f64>> = BTreeMap::new();
        let mut variant_features: Vec<Vec<f64>> = Vec::new();
        let mut ensemble_ok = want_ensemble && !disabled.contains_key(&Attack::Ensemble);
        for variant in &cand.variants {
            let traces = ctx.prepare(variant, &roster_for_traces);
            for &a in &formula {
                if disabled.contains_key(&a) {
                    continue;
                }
                match score_from_traces(a, &traces, ctx.gamma, ctx.k_percent) {
                    Ok(v) => match num_traits::ToPrimitive::to_f64(&v) {
                        Some(v) if v.is_finite() => {
                            variant_scores.entry(a).or_default().push(v)
                        }
                        _ => note_once(
                            a,
                            format!("non-finite score for `{}`", cand.id),
                            &mut notes,
                        ),
                    },
                    Err(e) => {
                        note_once(a, format!("{} (sample `{}`)", e, cand.id), &mut notes)
                    }
                }
            }
            if ensemble_ok {
                match ensemble_features(&traces) {
                    Ok(f) if f.iter().all(|v| v.is_finite()) => variant_features.push(f),
                    Ok(_) => {
                        note_once(
                            Attack::Ensemble,
                            format!("non-finite features for `{}`", cand.id),
                            &mut notes,
                        );
                        ensemble_ok = false;
                    }
                    Err(e) => {
                        note_once(
                            Attack::Ensemble,
                            format!("{} (sample `{}`)", e, cand.id),
                            &mut notes,
                        );
                        ensemble_ok = false;
                    }
                }
            }
        }
        for &a in &formula {
            let cell = variant_scores
                .get(&a)
                .filter(|vs| vs.len() == cand.variants.len())
                .map(|vs| cfg.aggregation.combine(vs));
            score_cells[ci].insert(a.name().to_string(), cell);
        }
        if ensemble_ok && variant_features.len() == cand.variants.len() {
            ensemble_rows[ci] = Some(variant_features);
        }
    }

    // Token-count classifier: top tokens and fit from calibration rows
    // (mean count features per candidate); per-variant probabilities are
    // then reduced by the configured aggregation.
    let mut bow_scores: Vec<Option<f64>> = vec![None; candidates.len()];
    if want_bow && !disabled.contains_key(&Attack::BagOfWords) {
        match fit_bow_over_candidates(candidates, &calibration, cfg.top_v) {
            Ok((top, model)) => {
                for (ci, cand) in candidates.iter().enumerate() {
                    let probs: Vec<f64> = cand
                        .variants
                        .iter()
                        .map(|v| model.probability(&count_features(&top, v)))
                        .collect();
                    bow_scores[ci] = Some(cfg.aggregation.combine(&probs));
                }
            }
            Err(e) => note_once(Attack::BagOfWords, e.to_string(), &mut notes),
        }
    }

    // Ensemble classifier: fit on mean features per calibration
    // candidate, score per variant, reduce by the aggregation.
    let mut ensemble_scores: Vec<Option<f64>> = vec![None; candidates.len()];
    if want_ensemble && !disabled.contains_key(&Attack::Ensemble) {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (ci, cand) in candidates.iter().enumerate() {
            if !calibration.contains(&ci) {
                continue;
            }
            if let Some(rows) = &ensemble_rows[ci] {
                features.push(mean_rows(rows));
                labels.push(cand.label == Role::Member);
            }
        }
        match fit_logistic(&features, &labels) {
            Ok(model) => {
                for ci in 0..candidates.len() {
                    if let Some(rows) = &ensemble_rows[ci] {
                        let probs: Vec<f64> =
                            rows.iter().map(|f| model.probability(f)).collect();
                        ensemble_scores[ci] = Some(cfg.aggregation.combine(&probs));
                    }
                }
            }
            Err(e) => note_once(Attack::Ensemble, e.to_string(), &mut notes),
        }
    }

    // Assemble the table.
    let mut rows = Vec::with_capacity(candidates.len());
    for (ci, cand) in candidates.iter().enumerate() {
        let mut scores = std::mem::take(&mut score_cells[ci]);
        if want_bow {
            scores.insert(Attack::BagOfWords.name().to_string(), bow_scores[ci]);
        }
        if want_ensemble {
            scores.insert(Attack::Ensemble.name().to_string(), ensemble_scores[ci]);
        }
        for (&a, reason) in &disabled {
            scores.insert(a.name().to_string(), None);
            notes.entry(a.name().to_string()).or_insert_with(|| reason.clone());
        }
        rows.push(ScoreRow {
            seq_id: cand.id.clone(),
            label: cand.label,
            calibration: calibration.contains(&ci),
            scores,
        });
    }
    let table = ScoreTable { attacks: cfg.attacks.clone(), rows, notes };
    let report = metric_report(&table, cfg);
    Ok(SuiteOutcome { table, report })
}

/// Indices reserved for classifier fitting: ⌈fraction·n⌉ per class,
/// chosen by a seeded shuffle of each class's candidate order.
fn calibration_flags(candidates: &[Candidate], cfg: &SuiteConfig) -> BTreeSet<usize> {
    let mut flags = BTreeSet::new();
    for (role, label) in [
        (Role::Member, "calibration-member"),
        (Role::Nonmember, "calibration-nonmember"),
    ] {
        let mut idx: Vec<usize> = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.label == role)
            .map(|(i, _)| i)
            .collect();
        let take = (cfg.calibration_fraction * idx.len() as f64).ceil() as usize;
        let mut rng = seeds::rng(seeds::derive(cfg.seed, label));
        idx.shuffle(&mut rng);
        flags.extend(idx.into_iter().take(take.min(candidates.len())));
    }
    flags
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = vec![0.0; dim];
    for row in rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

fn fit_bow_over_candidates(
    candidates: &[Candidate],
    calibration: &BTreeSet<usize>,
    top_v: usize,
) -> Result<(Vec<crate::corpus::TokenId>, crate::attacks::Logistic)> {
    let fit_variants: Vec<&TokenSequence> = candidates
        .iter()
        .enumerate()
        .filter(|(ci, _)| calibration.contains(ci))
        .flat_map(|(_, c)| c.variants.iter())
        .collect();
    let top = top_tokens(fit_variants.iter().copied(), top_v);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (ci, cand) in candidates.iter().enumerate() {
        if !calibration.contains(&ci) {
            continue;
        }
        features.push(mean_rows(
            &cand
                .variants
                .iter()
                .map(|v| count_features(&top, v))
                .collect::<Vec<_>>(),
        ));
        labels.push(cand.label == Role::Member);
    }
    let model = fit_logistic(&features, &labels)?;
    Ok((top, model))
}

/// Reduce a score table to per-attack metrics over evaluation rows.
pub fn metric_report(table: &ScoreTable, cfg: &SuiteConfig) -> MetricReport {
    let mut reports = Vec::with_capacity(table.attacks.len());
    for &attack in &table.attacks {
        let (members, nonmembers) = table.eval_scores(attack);
        let orientation = attack.orientation();
        let note = table.notes.get(attack.name()).cloned();
        let values = compute_values(&members, &nonmembers, orientation, attack, cfg);
        let (values, note) = match values {
            Ok(v) => (Some(v), note),
            Err(e) => (None, note.or_else(|| Some(e.to_string()))),
        };
        reports.push(AttackReport {
            attack,
            orientation,
            n_member: members.len(),
            n_nonmember: nonmembers.len(),
            values,
            note,
        });
    }
    MetricReport {
        n_bootstrap: cfg.n_bootstrap,
        seed: cfg.seed,
        fpr_levels: cfg.fpr_levels.clone(),
        attacks: reports,
    }
}

fn compute_values(
    members: &[f64],
    nonmembers: &[f64],
    orientation: Orientation,
    attack: Attack,
    cfg: &SuiteConfig,
) -> Result<MetricValues> {
    let m = metrics::oriented(members, orientation);
    let n = metrics::oriented(nonmembers, orientation);
    let auc = metrics::auc(&m, &n)?;
    let boot_seed = seeds::derive(cfg.seed, &format!("bootstrap-{}", attack.name()));
    let (auc_boot_mean, auc_boot_std) =
        metrics::bootstrap(&m, &n, cfg.n_bootstrap, boot_seed, metrics::auc)?;
    let mut tpr = BTreeMap::new();
    for &f in &cfg.fpr_levels {
        tpr.insert(format!("{f}"), metrics::tpr_at_fpr(&m, &n, f)?);
    }
    Ok(MetricValues { auc, auc_boot_mean, auc_boot_std, tpr_at_fpr: tpr })
}
