//! Attacker counter-strategies against the obfuscation defense.
//!
//! Each scenario models a different slice of attacker knowledge about
//! the defense and reduces to a candidate set fed through the ordinary
//! suite runner against the defended model.

use serde::{Deserialize, Serialize};

use crate::attacks::AttackContext;
use crate::corpus::{MembershipDataset, Role, TokenSequence};
use crate::defense::{paraphrase, Paraphraser, SelectionReport, SoftConfig};
use crate::error::{Error, Result};
use crate::eval::{run_candidate_suite, Candidate, SuiteConfig, SuiteOutcome};
use crate::model::LanguageModel;
use crate::scalar::Scalar;
use crate::seeds;

/// Attacker knowledge model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// The attacker knows the paraphrase mechanism and hedges against
    /// selection by scoring several fresh paraphrases per candidate.
    ParaphraseAndSelection,
    /// The attacker knows the exact paraphrase parameters (including
    /// seeds) and scores the replica paraphrase of each candidate.
    ParaphraseOnly,
    /// The attacker knows which samples were never flagged and scores
    /// only their untouched originals.
    SelectionOnly,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [
        Scenario::ParaphraseAndSelection,
        Scenario::ParaphraseOnly,
        Scenario::SelectionOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ParaphraseAndSelection => "paraphrase_and_selection",
            Scenario::ParaphraseOnly => "paraphrase_only",
            Scenario::SelectionOnly => "selection_only",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(name: &str) -> Result<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario `{name}`")))
    }
}

/// Adaptive-attacker knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    /// Paraphrase variants per candidate in the multi-variant scenario.
    pub variants: usize,
    /// Seed for the attacker's own paraphrase draws.
    pub attacker_seed: u64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig { variants: 4, attacker_seed: 0 }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants == 0 {
            return Err(Error::InvalidConfig(
                "adaptive variants must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn builtin_paraphraser(defense: &SoftConfig, scenario: Scenario) -> Result<(f64, u64)> {
    match &defense.paraphraser {
        Paraphraser::Builtin { temperature, seed } => Ok((*temperature, *seed)),
        Paraphraser::External { .. } => Err(Error::InvalidConfig(format!(
            "scenario `{scenario}` needs the builtin paraphraser to replay obfuscation"
        ))),
    }
}

/// Run one adaptive scenario against a defended model. `ctx` targets
/// the defended model; `pretrained` is the paraphrasing model the
/// defense used; `reports` are the defense's per-epoch selections.
pub fn adaptive_scenario<S: Scalar>(
    ctx: &AttackContext<'_, S>,
    pretrained: &LanguageModel<S>,
    dataset: &MembershipDataset,
    reports: &[SelectionReport],
    defense: &SoftConfig,
    scenario: Scenario,
    adaptive: &AdaptiveConfig,
    suite: &SuiteConfig,
) -> Result<SuiteOutcome> {
    adaptive.validate()?;
    let candidates = match scenario {
        Scenario::ParaphraseAndSelection => {
            let (temperature, _) = builtin_paraphraser(defense, scenario)?;
            paraphrased_candidates(
                pretrained,
                dataset,
                defense.alpha,
                temperature,
                adaptive.variants,
                |id, v| {
                    seeds::derive(
                        adaptive.attacker_seed,
                        &format!("adaptive-paraphrase-{id}-{v}"),
                    )
                },
            )
        }
        Scenario::ParaphraseOnly => {
            // Replica paraphrases: the defense's own per-sample seeds at
            // the final epoch's salt.
            let (temperature, defense_seed) = builtin_paraphraser(defense, scenario)?;
            let last_epoch = reports
                .last()
                .ok_or_else(|| {
                    Error::InvalidConfig(
                        "scenario `paraphrase_only` needs the defense's selection reports"
                            .into(),
                    )
                })?
                .epoch;
            paraphrased_candidates(
                pretrained,
                dataset,
                defense.alpha,
                temperature,
                1,
                |id, _| seeds::derive(defense_seed, &format!("paraphrase-{last_epoch}-{id}")),
            )
        }
        Scenario::SelectionOnly => {
            if reports.is_empty() {
                return Err(Error::InvalidConfig(
                    "scenario `selection_only` needs the defense's selection reports".into(),
                ));
            }
            let mut ever_flagged: std::collections::BTreeSet<&str> =
                std::collections::BTreeSet::new();
            for r in reports {
                ever_flagged.extend(r.flagged.iter().map(|f| f.id.as_str()));
            }
            dataset
                .members
                .iter()
                .filter(|x| !ever_flagged.contains(x.id.as_str()))
                .map(|x| Candidate::single(Role::Member, x.clone()))
                .chain(
                    dataset
                        .nonmembers
                        .iter()
                        .map(|x| Candidate::single(Role::Nonmember, x.clone())),
                )
                .collect()
        }
    };
    if !candidates.iter().any(|c| c.label == Role::Member) {
        return Err(Error::InvalidConfig(format!(
            "scenario `{scenario}` left no member candidates to score"
        )));
    }
    run_candidate_suite(ctx, &candidates, suite)
}

fn paraphrased_candidates<S: Scalar>(
    pretrained: &LanguageModel<S>,
    dataset: &MembershipDataset,
    alpha: f64,
    temperature: f64,
    variants: usize,
    seed_of: impl Fn(&str, usize) -> u64,
) -> Vec<Candidate> {
    let rewrite = |x: &TokenSequence, label: Role| {
        let versions: Vec<TokenSequence> = (0..variants)
            .map(|v| paraphrase(pretrained, x, alpha, temperature, seed_of(&x.id, v)))
            .collect();
        Candidate { id: x.id.clone(), label, variants: versions }
    };
    dataset
        .members
        .iter()
        .map(|x| rewrite(x, Role::Member))
        .chain(dataset.nonmembers.iter().map(|x| rewrite(x, Role::Nonmember)))
        .collect()
}
