//! The run-directory pipeline: corpus → split → pretrain → per-arm
//! training → attack suites → summary, with stage-level resume.
//!
//! A run directory is owned by one process at a time (lock file) and is
//! laid out as:
//!
//! ```text
//! <dir>/manifest.toml       materialized config (hash source)
//! <dir>/state.json          completed stages
//! <dir>/run.log             stage log, no timestamps
//! <dir>/split/              dataset.jsonl, remainder.jsonl, vocab.json, manifest.json
//! <dir>/models/             pretrain.json plus one model per arm
//! <dir>/scores/             per-arm score tables (CSV)
//! <dir>/reports/            per-arm metric reports (CSV)
//! <dir>/stats/              per-arm model statistics (JSON)
//! <dir>/selection/          per-epoch selection reports of defended arms
//! <dir>/datasets/           final training sets of defended arms
//! <dir>/models.csv          summary across arms
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mialab_core::attacks::{assemble_prefix, AttackContext};
use mialab_core::corpus::io::{
    load_corpus_documents, CorpusRecord, DatasetRecord, SplitManifest,
};
use mialab_core::corpus::{
    build_split, cut_windows, synth, MembershipDataset, TokenSequence, Vocabulary,
};
use mialab_core::defense::{
    paraphrase, soft_fine_tune, Paraphraser, Provenance, SelectionReport, SoftConfig,
};
use mialab_core::dp::{dp_fit, DpConfig};
use mialab_core::eval::adaptive::{adaptive_scenario, Scenario};
use mialab_core::eval::{run_attack_suite, SuiteOutcome};
use mialab_core::model::train::{fit, warmup_epoch, TrainConfig, TrainMode};
use mialab_core::model::trainable_param_count;
use mialab_core::seeds;
use mialab_core::Model64;

use crate::artifacts::{
    self, create_dir, load_state, log_line, read_model, write_csv, write_model, RunLock,
    RunState,
};
use crate::config::{DefenseKind, ExperimentConfig, Preset, TrainingKind};
use crate::CliError;

/// One trained-and-attacked model variant inside a run.
#[derive(Debug, Clone)]
pub struct ArmSpec {
    pub name: String,
    pub kind: ArmKind,
}

#[derive(Debug, Clone)]
pub enum ArmKind {
    /// Evaluate the pretrained model as-is.
    Pretrained,
    /// Plain fine-tuning on the member set.
    FineTune { mode: TrainMode },
    /// Noisy clipped-gradient training on the member set.
    DpTrain { mode: TrainMode, noise_multiplier: f64 },
    /// Selective-obfuscation fine-tuning.
    Soft { soft: SoftConfig },
    /// Ablation: obfuscate every sample every epoch (no selection).
    ParaphraseAll { soft: SoftConfig },
}

impl ArmKind {
    fn mode_label(&self) -> String {
        match self {
            ArmKind::Pretrained => "pretrained".into(),
            ArmKind::FineTune { mode } => train_mode_label(*mode),
            ArmKind::DpTrain { mode, noise_multiplier } => {
                format!("dp({}, sigma={noise_multiplier})", train_mode_label(*mode))
            }
            ArmKind::Soft { soft } => format!("soft(alpha={})", soft.alpha),
            ArmKind::ParaphraseAll { soft } => {
                format!("paraphrase_all(alpha={})", soft.alpha)
            }
        }
    }
}

fn train_mode_label(mode: TrainMode) -> String {
    match mode {
        TrainMode::Full => "full".into(),
        TrainMode::Lora { rank } => format!("lora(r={rank})"),
    }
}

/// Per-arm statistics merged into `models.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmStats {
    pub arm: String,
    pub mode: String,
    pub val_perplexity: f64,
    pub trainable_params: usize,
}

/// What a completed `run` invocation did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Completed,
    /// The directory already held a finished run under the same config.
    AlreadyComplete,
}

pub struct Runner {
    config: ExperimentConfig,
    hash: String,
    dir: PathBuf,
    dataset: Option<MembershipDataset>,
    remainder: Option<Vec<TokenSequence>>,
    vocab: Option<Vocabulary>,
    pretrained: Option<Model64>,
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Runner {
        let hash = config.hash();
        let dir = config.output.dir.clone();
        Runner { config, hash, dir, dataset: None, remainder: None, vocab: None, pretrained: None }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// The arm list the configured preset trains and attacks, in order.
    pub fn arms(&self) -> Vec<ArmSpec> {
        let t = &self.config.training;
        let d = &self.config.defense;
        let full = TrainMode::Full;
        let arm = |name: &str, kind: ArmKind| ArmSpec { name: name.to_string(), kind };
        let ft_mode = match t.mode {
            TrainingKind::Full | TrainingKind::Dp => full,
            TrainingKind::Lora | TrainingKind::DpLora => TrainMode::Lora { rank: t.rank },
        };
        match self.config.preset {
            Preset::Single => match (t.mode, d.kind) {
                (_, DefenseKind::Soft) => vec![arm("soft", ArmKind::Soft { soft: d.soft_config() })],
                (TrainingKind::Full, _) => vec![arm("ft", ArmKind::FineTune { mode: full })],
                (TrainingKind::Lora, _) => {
                    vec![arm("lora", ArmKind::FineTune { mode: ft_mode })]
                }
                (TrainingKind::Dp, _) => vec![arm(
                    "dp",
                    ArmKind::DpTrain { mode: full, noise_multiplier: t.noise_multiplier },
                )],
                (TrainingKind::DpLora, _) => vec![arm(
                    "dp_lora",
                    ArmKind::DpTrain { mode: ft_mode, noise_multiplier: t.noise_multiplier },
                )],
            },
            Preset::FtVsSoft => vec![
                arm("pretrain", ArmKind::Pretrained),
                arm("ft", ArmKind::FineTune { mode: ft_mode }),
                arm("soft", ArmKind::Soft { soft: d.soft_config() }),
            ],
            Preset::LoraGrid => {
                let mut arms = vec![arm("ft_full", ArmKind::FineTune { mode: full })];
                for &rank in &t.lora_ranks {
                    arms.push(arm(
                        &format!("lora_r{rank}"),
                        ArmKind::FineTune { mode: TrainMode::Lora { rank } },
                    ));
                }
                arms
            }
            Preset::DpSweep => {
                let mode = match t.mode {
                    TrainingKind::Lora | TrainingKind::DpLora => {
                        TrainMode::Lora { rank: t.rank }
                    }
                    _ => full,
                };
                t.dp_noise_multipliers
                    .iter()
                    .map(|&sigma| {
                        arm(
                            &format!("dp_sigma{sigma}"),
                            ArmKind::DpTrain { mode, noise_multiplier: sigma },
                        )
                    })
                    .collect()
            }
            Preset::Adaptive => vec![
                arm("ft", ArmKind::FineTune { mode: ft_mode }),
                arm("soft", ArmKind::Soft { soft: d.soft_config() }),
            ],
            Preset::AblationAlpha => d
                .alphas
                .iter()
                .map(|&alpha| {
                    let soft = SoftConfig { alpha, ..d.soft_config() };
                    arm(&format!("soft_alpha{alpha}"), ArmKind::Soft { soft })
                })
                .collect(),
            Preset::AblationSelection => vec![
                arm("soft_influential", ArmKind::Soft { soft: d.soft_config() }),
                arm("soft_all", ArmKind::ParaphraseAll { soft: d.soft_config() }),
                arm("ft_none", ArmKind::FineTune { mode: full }),
            ],
            Preset::AblationParaphraser => d
                .temperatures
                .iter()
                .map(|&temperature| {
                    let mut soft = d.soft_config();
                    if let Paraphraser::Builtin { seed, .. } = soft.paraphraser {
                        soft.paraphraser = Paraphraser::Builtin { temperature, seed };
                    }
                    arm(&format!("soft_temp{temperature}"), ArmKind::Soft { soft })
                })
                .collect(),
        }
    }

    /// Stage names in execution order.
    pub fn stages(&self) -> Vec<String> {
        let mut stages = vec!["split".to_string(), "pretrain".to_string()];
        stages.extend(self.arms().iter().map(|a| format!("arm:{}", a.name)));
        if self.config.preset == Preset::Adaptive {
            stages.extend(
                Scenario::ALL.iter().map(|s| format!("adaptive:{}", s.name())),
            );
        }
        stages.push("summary".to_string());
        stages
    }

    /// Execute the whole pipeline, resuming over completed stages. With
    /// `force`, existing artifacts are discarded first.
    pub fn run(&mut self, force: bool) -> Result<RunOutcome, CliError> {
        self.run_until(None, force)
    }

    /// Execute stages in order up to `last` (inclusive; `None` = all),
    /// resuming over completed ones.
    pub fn run_until(&mut self, last: Option<&str>, force: bool) -> Result<RunOutcome, CliError> {
        let all = self.stages();
        let mut wanted = Vec::new();
        for stage in &all {
            wanted.push(stage.clone());
            if Some(stage.as_str()) == last {
                break;
            }
        }
        if let Some(last) = last {
            if wanted.last().map(String::as_str) != Some(last) {
                return Err(CliError::config(format!("unknown stage `{last}`")));
            }
        }

        create_dir(&self.dir, "init")?;
        if !force {
            match load_state(&self.dir)? {
                Some(state) if state.config_hash != self.hash => {
                    return Err(CliError::config(format!(
                        "run directory {} belongs to a different config (state hash {}, config hash {}); pass --force to reset it",
                        self.dir.display(),
                        state.config_hash,
                        self.hash
                    )));
                }
                Some(state) if wanted.iter().all(|s| state.is_done(s)) => {
                    return Ok(RunOutcome::AlreadyComplete)
                }
                _ => {}
            }
        }

        let _lock = RunLock::acquire(&self.dir)?;
        if force {
            self.reset()?;
        }
        let mut state = load_state(&self.dir)?.unwrap_or_else(|| RunState::fresh(&self.hash));
        std::fs::write(self.dir.join("manifest.toml"), self.config.manifest())
            .map_err(|e| CliError::stage("init", e))?;

        for stage in wanted {
            if state.is_done(&stage) {
                continue;
            }
            self.execute(&stage).map_err(|e| {
                log_line(&self.dir, &stage, &format!("failed: {e}"));
                e
            })?;
            log_line(&self.dir, &stage, "done");
            state.completed.push(stage);
            artifacts::save_state(&self.dir, &state)?;
        }
        if all.iter().all(|s| state.is_done(s)) {
            state.finished = true;
            artifacts::save_state(&self.dir, &state)?;
            log_line(&self.dir, "run", "complete");
        }
        Ok(RunOutcome::Completed)
    }

    /// Empty the run directory, keeping only the lock held by the caller.
    fn reset(&self) -> Result<(), CliError> {
        for entry in std::fs::read_dir(&self.dir).map_err(|e| CliError::stage("reset", e))? {
            let entry = entry.map_err(|e| CliError::stage("reset", e))?;
            let path = entry.path();
            if path.file_name().is_some_and(|n| n == ".lock") {
                continue;
            }
            let result = if path.is_dir() {
                std::fs::remove_dir_all(&path)
            } else {
                std::fs::remove_file(&path)
            };
            result.map_err(|e| CliError::stage("reset", e))?;
        }
        Ok(())
    }

    fn execute(&mut self, stage: &str) -> Result<(), CliError> {
        if stage == "split" {
            return self.stage_split();
        }
        if stage == "pretrain" {
            return self.stage_pretrain();
        }
        if let Some(arm_name) = stage.strip_prefix("arm:") {
            let arm = self
                .arms()
                .into_iter()
                .find(|a| a.name == arm_name)
                .expect("stage list and arm list agree");
            return self.stage_arm(&arm);
        }
        if let Some(name) = stage.strip_prefix("adaptive:") {
            let scenario: Scenario = name
                .parse()
                .map_err(|e| CliError::stage(stage, e))?;
            return self.stage_adaptive(scenario);
        }
        if stage == "summary" {
            return self.stage_summary();
        }
        Err(CliError::stage(stage, "unknown stage"))
    }

    // ------------------------------------------------------------------
    //

    /// Corpus documents from the configured source.
    pub fn corpus_documents(&self) -> Result<Vec<(String, String)>, CliError> {
        if !self.config.corpus.paths.is_empty() {
            let mut docs = Vec::new();
            for path in &self.config.corpus.paths {
                docs.extend(
                    load_corpus_documents(path)
                        .map_err(|e| CliError::stage("split", e))?,
                );
            }
            return Ok(docs);
        }
        let synth_cfg = self
            .config
            .corpus
            .synth
            .as_ref()
            .expect("config validation requires a corpus source");
        Ok(synth::generate(synth_cfg))
    }

    pub fn stage_split(&mut self) -> Result<(), CliError> {
        let stage = "split";
        let docs = self.corpus_documents()?;
        let vocab =
            Vocabulary::from_texts(docs.iter().map(|(_, text)| text.as_str()));
        let windows = cut_windows(
            &docs,
            self.config.corpus.window_len,
            self.config.corpus.window_seed,
        );
        let pool: Vec<TokenSequence> = windows
            .iter()
            .map(|(id, text)| vocab.tokenize(id.clone(), text))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::stage(stage, e))?;
        let outcome =
            build_split(&pool, &self.config.split).map_err(|e| CliError::stage(stage, e))?;

        let split_dir = self.dir.join("split");
        create_dir(&split_dir, stage)?;
        let records: Vec<DatasetRecord> = outcome
            .dataset
            .iter_roles()
            .map(|(role, seq)| DatasetRecord {
                id: seq.id.clone(),
                text: seq.raw_text.clone(),
                role,
                provenance: None,
            })
            .collect();
        write_stamped_jsonl(&split_dir.join("dataset.jsonl"), &self.hash, &records)?;
        let leftover: Vec<CorpusRecord> = outcome
            .remainder
            .iter()
            .map(|seq| CorpusRecord { id: seq.id.clone(), text: seq.raw_text.clone() })
            .collect();
        write_stamped_jsonl(&split_dir.join("remainder.jsonl"), &self.hash, &leftover)?;
        artifacts::write_json(&split_dir.join("vocab.json"), &self.hash, &vocab)?;
        let manifest = SplitManifest::describe(&outcome.dataset, &self.hash);
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::stage(stage, e))?;
        std::fs::write(split_dir.join("manifest.json"), text)
            .map_err(|e| CliError::stage(stage, e))?;

        self.vocab = Some(vocab);
        self.dataset = Some(outcome.dataset);
        self.remainder = Some(outcome.remainder);
        Ok(())
    }

    pub fn vocabulary(&mut self) -> Result<&Vocabulary, CliError> {
        if self.vocab.is_none() {
            let path = self.dir.join("split/vocab.json");
            self.vocab = Some(artifacts::read_json::<Vocabulary>(&path)?.payload);
        }
        Ok(self.vocab.as_ref().expect("just loaded"))
    }

    pub fn dataset(&mut self) -> Result<&MembershipDataset, CliError> {
        if self.dataset.is_none() {
            let manifest_text =
                std::fs::read_to_string(self.dir.join("split/manifest.json"))
                    .map_err(|e| CliError::config(format!("split stage incomplete: {e}")))?;
            let manifest: SplitManifest = serde_json::from_str(&manifest_text)
                .map_err(|e| CliError::config(format!("split manifest: {e}")))?;
            let records: Vec<DatasetRecord> =
                read_stamped_jsonl(&self.dir.join("split/dataset.jsonl"))?;
            let vocab = self.vocabulary()?.clone();
            let dataset = mialab_core::corpus::io::dataset_from_records(
                &records,
                &vocab,
                manifest.split,
                manifest.stats,
            )
            .map_err(|e| CliError::config(format!("split dataset: {e}")))?;
            self.dataset = Some(dataset);
        }
        Ok(self.dataset.as_ref().expect("just loaded"))
    }

    fn remainder(&mut self) -> Result<&[TokenSequence], CliError> {
        if self.remainder.is_none() {
            let records: Vec<CorpusRecord> =
                read_stamped_jsonl(&self.dir.join("split/remainder.jsonl"))?;
            let vocab = self.vocabulary()?.clone();
            let seqs: Vec<TokenSequence> = records
                .iter()
                .map(|r| vocab.tokenize(r.id.clone(), &r.text))
                .collect::<Result<_, _>>()
                .map_err(|e| CliError::config(format!("split remainder: {e}")))?;
            self.remainder = Some(seqs);
        }
        Ok(self.remainder.as_ref().expect("just loaded"))
    }

    pub fn stage_pretrain(&mut self) -> Result<(), CliError> {
        let stage = "pretrain";
        let vocab = self.vocabulary()?.clone();
        let init = Model64::new(vocab, &self.config.model);
        let p = self.config.pretrain.clone();
        let model = if p.epochs == 0 {
            init
        } else {
            let remainder = self.remainder()?.to_vec();
            fit(
                &init,
                &remainder,
                &TrainConfig {
                    epochs: p.epochs,
                    learning_rate: p.learning_rate,
                    batch_size: p.batch_size,
                    seed: p.seed,
                    mode: TrainMode::Full,
                },
            )
            .map_err(|e| CliError::stage(stage, e))?
        };
        create_dir(&self.dir.join("models"), stage)?;
        write_model(&self.dir.join("models/pretrain.json"), &self.hash, &model)?;
        self.pretrained = Some(model);
        Ok(())
    }

    pub fn pretrained(&mut self) -> Result<&Model64, CliError> {
        if self.pretrained.is_none() {
            let path = self.dir.join("models/pretrain.json");
            if !path.exists() {
                return Err(CliError::config(
                    "pretrain stage incomplete: models/pretrain.json missing",
                ));
            }
            self.pretrained = Some(read_model(&path)?);
        }
        Ok(self.pretrained.as_ref().expect("just loaded"))
    }

    fn stage_arm(&mut self, arm: &ArmSpec) -> Result<(), CliError> {
        let stage = format!("arm:{}", arm.name);
        let dataset = self.dataset()?.clone();
        let pretrained = self.pretrained()?.clone();
        let t = &self.config.training;

        let (model, counted_mode) = match &arm.kind {
            ArmKind::Pretrained => (pretrained.clone(), TrainMode::Full),
            ArmKind::FineTune { mode } => {
                let model = fit(
                    &pretrained,
                    &dataset.members,
                    &TrainConfig {
                        epochs: t.epochs,
                        learning_rate: t.learning_rate,
                        batch_size: t.batch_size,
                        seed: t.seed,
                        mode: *mode,
                    },
                )
                .map_err(|e| CliError::stage(&stage, e))?;
                (model, *mode)
            }
            ArmKind::DpTrain { mode, noise_multiplier } => {
                let model = dp_fit(
                    &pretrained,
                    &dataset.members,
                    &DpConfig {
                        clip_norm: t.clip_norm,
                        noise_multiplier: *noise_multiplier,
                        lot_size: t.lot_size,
                        steps: t.steps,
                        learning_rate: t.learning_rate,
                        seed: t.seed,
                        mode: *mode,
                    },
                )
                .map_err(|e| CliError::stage(&stage, e))?;
                (model, *mode)
            }
            ArmKind::Soft { soft } => {
                let outcome = soft_fine_tune(
                    &pretrained,
                    &dataset.members,
                    &dataset.validation,
                    soft,
                )
                .map_err(|e| CliError::stage(&stage, e))?;
                self.write_defense_artifacts(&arm.name, &outcome.reports, &outcome.dataset)?;
                (outcome.model, TrainMode::Full)
            }
            ArmKind::ParaphraseAll { soft } => {
                let model = self
                    .paraphrase_all_arm(&pretrained, &dataset, soft)
                    .map_err(|e| CliError::stage(&stage, e))?;
                (model, TrainMode::Full)
            }
        };

        create_dir(&self.dir.join("models"), &stage)?;
        write_model(
            &self.dir.join(format!("models/{}.json", arm.name)),
            &self.hash,
            &model,
        )?;

        let suite = self.evaluate(&model, Some(&pretrained), &dataset)?;
        self.write_suite(&arm.name, &suite)?;

        let stats = ArmStats {
            arm: arm.name.clone(),
            mode: arm.kind.mode_label(),
            val_perplexity: model.perplexity(&dataset.validation),
            trainable_params: trainable_param_count(&model, counted_mode),
        };
        create_dir(&self.dir.join("stats"), &stage)?;
        artifacts::write_json(
            &self.dir.join(format!("stats/{}.json", arm.name)),
            &self.hash,
            &stats,
        )?;
        Ok(())
    }

    /// No-selection ablation: warm up, then each epoch paraphrases every
    /// member before one training pass.
    fn paraphrase_all_arm(
        &self,
        pretrained: &Model64,
        dataset: &MembershipDataset,
        soft: &SoftConfig,
    ) -> Result<Model64, mialab_core::Error> {
        let (temperature, p_seed) = match &soft.paraphraser {
            Paraphraser::Builtin { temperature, seed } => (*temperature, *seed),
            Paraphraser::External { .. } => {
                return Err(mialab_core::Error::InvalidConfig(
                    "the paraphrase-everything ablation needs the builtin paraphraser".into(),
                ))
            }
        };
        let mut model = warmup_epoch(
            pretrained,
            &dataset.members,
            soft.learning_rate,
            soft.batch_size,
            soft.seed,
        )?;
        for epoch in 0..soft.epochs {
            let rewritten: Vec<TokenSequence> = dataset
                .members
                .iter()
                .map(|x| {
                    let seed =
                        seeds::derive(p_seed, &format!("paraphrase-{epoch}-{}", x.id));
                    paraphrase(pretrained, x, soft.alpha, temperature, seed)
                })
                .collect();
            model = fit(
                &model,
                &rewritten,
                &TrainConfig {
                    epochs: 1,
                    learning_rate: soft.learning_rate,
                    batch_size: soft.batch_size,
                    seed: seeds::derive_indexed(soft.seed, "paraphrase-all-epoch", epoch as u64),
                    mode: TrainMode::Full,
                },
            )?;
        }
        Ok(model)
    }

    fn write_defense_artifacts(
        &self,
        arm: &str,
        reports: &[SelectionReport],
        defended: &[(TokenSequence, Provenance)],
    ) -> Result<(), CliError> {
        let stage = format!("arm:{arm}");
        create_dir(&self.dir.join("selection"), &stage)?;
        write_stamped_jsonl(
            &self.dir.join(format!("selection/{arm}.jsonl")),
            &self.hash,
            reports,
        )?;
        create_dir(&self.dir.join("datasets"), &stage)?;
        let records: Vec<DatasetRecord> = defended
            .iter()
            .map(|(seq, provenance)| DatasetRecord {
                id: seq.id.clone(),
                text: seq.raw_text.clone(),
                role: mialab_core::corpus::Role::Member,
                provenance: Some(match provenance {
                    Provenance::Original => "original".to_string(),
                    Provenance::Paraphrased { epoch } => format!("paraphrased@{epoch}"),
                }),
            })
            .collect();
        write_stamped_jsonl(
            &self.dir.join(format!("datasets/{arm}.jsonl")),
            &self.hash,
            &records,
        )
    }

    /// Attack context over a target model, with an optional reference
    /// model and conditioning prefixes drawn from the dataset.
    pub fn build_context<'a>(
        &self,
        target: &'a Model64,
        reference: Option<&'a Model64>,
        dataset: &MembershipDataset,
    ) -> AttackContext<'a, f64> {
        let a = &self.config.attacks;
        let mut ctx = AttackContext::new(target);
        ctx.reference = reference;
        ctx.gamma = a.gamma;
        ctx.k_percent = a.k_percent;
        ctx.nonmember_prefix = prefix_from(
            "nonmember-prefix",
            &dataset.validation,
            a.prefix_shots,
            a.prefix_max_tokens,
            seeds::derive(a.prefix_seed, "nonmember-prefix"),
        );
        ctx.member_prefix = prefix_from(
            "member-prefix",
            &dataset.members,
            a.prefix_shots,
            a.prefix_max_tokens,
            seeds::derive(a.prefix_seed, "member-prefix"),
        );
        ctx
    }

    pub fn evaluate(
        &self,
        target: &Model64,
        reference: Option<&Model64>,
        dataset: &MembershipDataset,
    ) -> Result<SuiteOutcome, CliError> {
        let ctx = self.build_context(target, reference, dataset);
        run_attack_suite(&ctx, dataset, &self.config.suite_config())
            .map_err(|e| CliError::stage("attack-suite", e))
    }

    pub fn write_suite(&self, name: &str, suite: &SuiteOutcome) -> Result<(), CliError> {
        create_dir(&self.dir.join("scores"), "write-suite")?;
        create_dir(&self.dir.join("reports"), "write-suite")?;
        write_csv(
            &self.dir.join(format!("scores/{name}.csv")),
            &self.hash,
            &suite.table.to_csv(),
        )?;
        write_csv(
            &self.dir.join(format!("reports/{name}.csv")),
            &self.hash,
            &suite.report.to_csv(),
        )
    }

    /// Standalone defense training: ensures the split and pretrained
    /// model exist, then trains the defended model and writes its
    /// artifacts under the `defend` name — without running any attack.
    pub fn defend(&mut self) -> Result<PathBuf, CliError> {
        self.run_until(Some("pretrain"), false)?;
        let _lock = RunLock::acquire(&self.dir)?;
        let stage = "defend";
        let dataset = self.dataset()?.clone();
        let pretrained = self.pretrained()?.clone();
        let soft = self.config.defense.soft_config();
        let outcome = soft_fine_tune(&pretrained, &dataset.members, &dataset.validation, &soft)
            .map_err(|e| CliError::stage(stage, e))?;
        self.write_defense_artifacts("defend", &outcome.reports, &outcome.dataset)?;
        create_dir(&self.dir.join("models"), stage)?;
        let path = self.dir.join("models/defend.json");
        write_model(&path, &self.hash, &outcome.model)?;
        let stats = ArmStats {
            arm: "defend".into(),
            mode: ArmKind::Soft { soft }.mode_label(),
            val_perplexity: outcome.model.perplexity(&dataset.validation),
            trainable_params: trainable_param_count(&outcome.model, TrainMode::Full),
        };
        create_dir(&self.dir.join("stats"), stage)?;
        artifacts::write_json(&self.dir.join("stats/defend.json"), &self.hash, &stats)?;
        log_line(&self.dir, stage, "done");
        Ok(path)
    }

    fn stage_adaptive(&mut self, scenario: Scenario) -> Result<(), CliError> {
        let stage = format!("adaptive:{}", scenario.name());
        let dataset = self.dataset()?.clone();
        let pretrained = self.pretrained()?.clone();
        let soft_model = read_model(&self.dir.join("models/soft.json")).map_err(|e| {
            CliError::config(format!("adaptive scenarios need the completed `soft` arm: {e}"))
        })?;
        let reports = self.read_selection("soft")?;
        let ctx = self.build_context(&soft_model, Some(&pretrained), &dataset);
        let suite = adaptive_scenario(
            &ctx,
            &pretrained,
            &dataset,
            &reports,
            &self.config.defense.soft_config(),
            scenario,
            &self.config.adaptive_config(),
            &self.config.suite_config(),
        )
        .map_err(|e| CliError::stage(&stage, e))?;
        self.write_suite(&format!("adaptive_{}", scenario.name()), &suite)
    }

    pub fn read_selection(&self, arm: &str) -> Result<Vec<SelectionReport>, CliError> {
        read_stamped_jsonl(&self.dir.join(format!("selection/{arm}.jsonl")))
    }

    fn stage_summary(&mut self) -> Result<(), CliError> {
        let mut body = String::from("arm,mode,val_perplexity,trainable_params\n");
        for arm in self.arms() {
            let stats: ArmStats = artifacts::read_json::<ArmStats>(
                &self.dir.join(format!("stats/{}.json", arm.name)),
            )?
            .payload;
            body.push_str(&format!(
                "{},{},{:.6},{}\n",
                stats.arm, stats.mode, stats.val_perplexity, stats.trainable_params
            ));
        }
        write_csv(&self.dir.join("models.csv"), &self.hash, &body)
    }
}

/// Concatenate a seeded draw of shots into one conditioning prefix.
fn prefix_from(
    id: &str,
    pool: &[TokenSequence],
    shots: usize,
    max_tokens: usize,
    seed: u64,
) -> Option<TokenSequence> {
    if pool.is_empty() || shots == 0 || max_tokens == 0 {
        return None;
    }
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seeds::rng(seed));
    let chosen: Vec<&TokenSequence> =
        order.iter().take(shots).map(|&i| &pool[i]).collect();
    Some(assemble_prefix(id, &chosen, max_tokens))
}

/// JSONL whose first line is a `{format_version, config_hash}` stamp.
pub fn write_stamped_jsonl<T: Serialize>(
    path: &Path,
    config_hash: &str,
    items: &[T],
) -> Result<(), CliError> {
    use std::io::Write;
    let stage = "write-jsonl";
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| CliError::stage(stage, e))?,
    );
    let stamp = serde_json::json!({
        "format_version": artifacts::FORMAT_VERSION,
        "config_hash": config_hash,
    });
    writeln!(out, "{stamp}").map_err(|e| CliError::stage(stage, e))?;
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| CliError::stage(stage, e))?;
        writeln!(out).map_err(|e| CliError::stage(stage, e))?;
    }
    out.flush().map_err(|e| CliError::stage(stage, e))
}

pub fn read_stamped_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let stamp = lines
        .next()
        .ok_or_else(|| CliError::config(format!("{} is empty", path.display())))?;
    let stamp: serde_json::Value = serde_json::from_str(stamp)
        .map_err(|e| CliError::config(format!("{} stamp line: {e}", path.display())))?;
    if stamp.get("format_version").and_then(|v| v.as_u64())
        != Some(artifacts::FORMAT_VERSION as u64)
    {
        return Err(CliError::config(format!(
            "{} has an unsupported format version",
            path.display()
        )));
    }
    let mut items = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let item: T = serde_json::from_str(line).map_err(|e| {
            CliError::config(format!("{}:{}: {e}", path.display(), lineno + 2))
        })?;
        items.push(item);
    }
    Ok(items)
}
