//! Experiment configuration: a versioned TOML schema with dotted-path
//! overrides, full-default materialization, and a content hash that every
//! emitted artifact carries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mialab_core::attacks::Attack;
use mialab_core::corpus::synth::SynthConfig;
use mialab_core::corpus::SplitConfig;
use mialab_core::defense::{Paraphraser, SoftConfig};
use mialab_core::eval::adaptive::AdaptiveConfig;
use mialab_core::eval::{Aggregation, SuiteConfig};
use mialab_core::model::ModelConfig;

use crate::CliError;

/// Schema version accepted by this binary.
pub const SCHEMA_VERSION: u32 = 1;

fn schema_version_default() -> u32 {
    SCHEMA_VERSION
}

/// Which experiment family a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// One arm, defined by `[training]` and `[defense]`.
    Single,
    /// Pretrained baseline, plain fine-tune, and defended fine-tune.
    FtVsSoft,
    /// Full fine-tune plus one low-rank arm per configured rank.
    LoraGrid,
    /// One noisy-training arm per configured noise multiplier.
    DpSweep,
    /// Defended run plus the three attacker counter-scenarios.
    Adaptive,
    /// Defended arms across the retention grid.
    AblationAlpha,
    /// Defended arm vs paraphrase-everything vs no defense.
    AblationSelection,
    /// Defended arms across the paraphrase temperature grid.
    AblationParaphraser,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Single => "single",
            Preset::FtVsSoft => "ft-vs-soft",
            Preset::LoraGrid => "lora-grid",
            Preset::DpSweep => "dp-sweep",
            Preset::Adaptive => "adaptive",
            Preset::AblationAlpha => "ablation-alpha",
            Preset::AblationSelection => "ablation-selection",
            Preset::AblationParaphraser => "ablation-paraphraser",
        }
    }
}

/// Corpus source and windowing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Document files: `.jsonl` record files or plain-text documents.
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    /// Seeded generator used when no paths are given.
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    /// Fixed sample length in characters.
    pub window_len: usize,
    /// Seed of the pooled-window shuffle.
    pub window_seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            paths: Vec::new(),
            synth: Some(SynthConfig::default()),
            window_len: 32,
            window_seed: 13,
        }
    }
}

/// Language competence training on the non-split remainder windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { epochs: 4, learning_rate: 0.06, batch_size: 32, seed: 19 }
    }
}

/// How the target model is produced from the pretrained one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingKind {
    Full,
    Lora,
    Dp,
    DpLora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub mode: TrainingKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Low-rank adapter rank (lora and dp_lora modes).
    pub rank: usize,
    /// Per-sample gradient norm bound (dp modes).
    pub clip_norm: f64,
    /// Gradient noise multiplier (dp modes).
    pub noise_multiplier: f64,
    /// Samples per noisy step (dp modes).
    pub lot_size: usize,
    /// Noisy steps (dp modes).
    pub steps: usize,
    /// Rank grid of the lora-grid preset.
    pub lora_ranks: Vec<usize>,
    /// Noise grid of the dp-sweep preset.
    pub dp_noise_multipliers: Vec<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            mode: TrainingKind::Full,
            epochs: 3,
            learning_rate: 0.07,
            batch_size: 8,
            seed: 3,
            rank: 8,
            clip_norm: 1.0,
            noise_multiplier: 0.5,
            lot_size: 32,
            steps: 100,
            lora_ranks: vec![2, 8, 32],
            dp_noise_multipliers: vec![0.0, 0.5, 2.0],
        }
    }
}

/// Whether and how training data is defended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    pub kind: DefenseKind,
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub paraphraser: Paraphraser,
    /// Retention grid of the ablation-alpha preset.
    pub alphas: Vec<f64>,
    /// Temperature grid of the ablation-paraphraser preset.
    pub temperatures: Vec<f64>,
}

impl Default for DefenseSection {
    fn default() -> Self {
        let soft = SoftConfig::default();
        DefenseSection {
            kind: DefenseKind::None,
            alpha: soft.alpha,
            epochs: soft.epochs,
            learning_rate: soft.learning_rate,
            batch_size: soft.batch_size,
            seed: soft.seed,
            paraphraser: soft.paraphraser,
            alphas: vec![0.25, 0.5, 0.75, 1.0],
            temperatures: vec![1.0, 3.0, 5.0],
        }
    }
}

impl DefenseSection {
    pub fn soft_config(&self) -> SoftConfig {
        SoftConfig {
            alpha: self.alpha,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            paraphraser: self.paraphraser.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttacksSection {
    pub roster: Vec<Attack>,
    /// Known-member weight of the contrastive conditional score.
    pub gamma: f64,
    /// Percentile of lowest-probability positions kept by min-k scores.
    pub k_percent: usize,
    /// Samples concatenated into each conditioning prefix.
    pub prefix_shots: usize,
    /// Token cap of each conditioning prefix.
    pub prefix_max_tokens: usize,
    /// Seed of the prefix-shot draws.
    pub prefix_seed: u64,
}

impl Default for AttacksSection {
    fn default() -> Self {
        AttacksSection {
            roster: Attack::ALL.to_vec(),
            gamma: 1.0,
            k_percent: 20,
            prefix_shots: 2,
            prefix_max_tokens: 64,
            prefix_seed: 31,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub calibration_fraction: f64,
    pub top_v: usize,
    pub n_bootstrap: usize,
    pub fpr_levels: Vec<f64>,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let suite = SuiteConfig::default();
        MetricsSection {
            calibration_fraction: suite.calibration_fraction,
            top_v: suite.top_v,
            n_bootstrap: suite.n_bootstrap,
            fpr_levels: suite.fpr_levels,
            aggregation: suite.aggregation,
            seed: suite.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSection {
    pub variants: usize,
    pub attacker_seed: u64,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        let a = AdaptiveConfig::default();
        AdaptiveSection { variants: a.variants, attacker_seed: a.attacker_seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

/// The whole experiment description. Loading materializes every default,
/// so the emitted manifest is self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version_default")]
    pub schema_version: u32,
    pub preset: Preset,
    pub output: OutputSection,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub defense: DefenseSection,
    #[serde(default)]
    pub attacks: AttacksSection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub adaptive: AdaptiveSection,
}

impl ExperimentConfig {
    /// Parse a TOML string, apply dotted-path overrides, and validate.
    /// The file is merged over a fully populated defaults skeleton, so
    /// both config files and overrides may give partial sections.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
        let file: toml::Value = text
            .parse()
            .map_err(|e| CliError::config(format!("config parse error: {e}")))?;
        let mut value = toml::Value::try_from(SectionDefaults::default())
            .expect("defaults serialize");
        deep_merge(&mut value, file);
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        let config: ExperimentConfig = value
            .try_into()
            .map_err(|e| CliError::config(format!("config schema error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "unsupported schema_version {} (this binary speaks {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for path in &self.corpus.paths {
            if !path.exists() {
                return Err(CliError::config(format!(
                    "corpus path does not exist: {}",
                    path.display()
                )));
            }
        }
        if self.corpus.paths.is_empty() && self.corpus.synth.is_none() {
            return Err(CliError::config(
                "corpus needs either `paths` or a `synth` generator",
            ));
        }
        if self.corpus.window_len == 0 {
            return Err(CliError::config("corpus.window_len must be positive"));
        }
        if let mialab_core::defense::Paraphraser::External { exchange } =
            &self.defense.paraphraser
        {
            if self.defense.kind == DefenseKind::Soft && !exchange.exists() {
                return Err(CliError::config(format!(
                    "external paraphrase exchange does not exist: {}",
                    exchange.display()
                )));
            }
        }
        self.suite_config()
            .validate()
            .map_err(|e| CliError::config(format!("metrics section: {e}")))?;
        self.defense
            .soft_config()
            .validate()
            .map_err(|e| CliError::config(format!("defense section: {e}")))?;
        match self.preset {
            Preset::LoraGrid if self.training.lora_ranks.is_empty() => {
                return Err(CliError::config("training.lora_ranks is empty"))
            }
            Preset::DpSweep if self.training.dp_noise_multipliers.is_empty() => {
                return Err(CliError::config("training.dp_noise_multipliers is empty"))
            }
            Preset::AblationAlpha if self.defense.alphas.is_empty() => {
                return Err(CliError::config("defense.alphas is empty"))
            }
            Preset::AblationParaphraser if self.defense.temperatures.is_empty() => {
                return Err(CliError::config("defense.temperatures is empty"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Canonical serialized form: what `manifest.toml` contains and what
    /// the config hash is computed over.
    pub fn manifest(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 over the canonical form with the output location
    /// blanked: the hash identifies the experiment's content, so moving
    /// a run directory does not orphan its artifacts.
    pub fn hash(&self) -> String {
        let mut content = self.clone();
        content.output.dir = PathBuf::new();
        let digest = Sha256::digest(content.manifest().as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            attacks: self.attacks.roster.clone(),
            calibration_fraction: self.metrics.calibration_fraction,
            top_v: self.metrics.top_v,
            n_bootstrap: self.metrics.n_bootstrap,
            fpr_levels: self.metrics.fpr_levels.clone(),
            aggregation: self.metrics.aggregation,
            seed: self.metrics.seed,
        }
    }

    pub fn adaptive_config(&self) -> AdaptiveConfig {
        AdaptiveConfig {
            variants: self.adaptive.variants,
            attacker_seed: self.adaptive.attacker_seed,
        }
    }
}

/// Every section that has defaults, used to pre-populate the config tree
/// before the file and the overrides are merged in.
#[derive(Default, Serialize)]
struct SectionDefaults {
    corpus: CorpusSection,
    split: SplitConfig,
    model: ModelConfig,
    pretrain: PretrainSection,
    training: TrainingSection,
    defense: DefenseSection,
    attacks: AttacksSection,
    metrics: MetricsSection,
    adaptive: AdaptiveSection,
}

/// Recursively overlay `over` onto `base`: tables merge key-wise, any
/// other value (including arrays) replaces the base wholesale.
fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(base), toml::Value::Table(over)) => {
            for (key, value) in over {
                match base.get_mut(&key) {
                    Some(slot) => deep_merge(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Apply one `section.key=value` override. The value is parsed as a TOML
/// literal; anything that does not parse is taken as a bare string.
fn apply_override(root: &mut toml::Value, entry: &str) -> Result<(), CliError> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{entry}` is not `path=value`")))?;
    let parsed: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::config(format!("override path `{path}` has an empty segment")));
    }
    let mut cursor = root;
    for key in &keys[..keys.len() - 1] {
        let table = cursor.as_table_mut().ok_or_else(|| {
            CliError::config(format!("override path `{path}`: `{key}` is not a table"))
        })?;
        cursor = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cursor.as_table_mut().ok_or_else(|| {
        CliError::config(format!("override path `{path}` does not end in a table"))
    })?;
    table.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}
