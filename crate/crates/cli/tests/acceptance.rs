//! Release gate for the laboratory as a whole: ten checks combining
//! directional expectations on the shipped experiment presets (baseline
//! fairness, fine-tuning leakage, the curation defense, low-rank and
//! noisy-training trade-offs, adaptive attackers) with exact oracles for
//! the metric, gradient, and score-formula layers, plus byte-level run
//! determinism. Every check prints one PASS/FAIL line; the test fails if
//! any check fails.
//!
//! The whole gate runs inside a single `#[test]` so the preset runs execute
//! sequentially on one thread.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use tempfile::TempDir;

use mialab_cli::artifacts::{read_csv, read_json};
use mialab_cli::commands::cmd_run;
use mialab_cli::config::ExperimentConfig;
use mialab_cli::runner::Runner;
use mialab_core::attacks::{
    score_con_recall, score_loss, score_lowercase, score_min_k, score_min_kpp, score_ratio,
    score_recall, score_zlib, zlib_bits,
};
use mialab_core::corpus::{TokenSequence, Vocabulary};
use mialab_core::defense::{soft_fine_tune, Paraphraser, SoftConfig};
use mialab_core::eval::metrics::{auc, tpr_at_fpr};
use mialab_core::model::train::{
    finite_difference_max_rel_err, fit, warmup_epoch, TrainConfig, TrainMode,
};
use mialab_core::model::{trainable_param_count, LanguageModel, LogProbTrace, ModelConfig};
use mialab_core::seeds;

// ---------------------------------------------------------------------------
// Gate tolerances. These are release pins: loosening them weakens the gate.
// ---------------------------------------------------------------------------

/// Attack AUC band against the pre-trained model (no membership signal).
const BASELINE_AUC_LO: f64 = 0.40;
const BASELINE_AUC_HI: f64 = 0.60;
/// Wall-clock budget for split + pretraining + the baseline attack suite.
const BASELINE_TIME_LIMIT_SECS: f64 = 300.0;
/// Floor for the headline attacks against the undefended fine-tune.
const LEAK_MIN_AUC: f64 = 0.70;
/// The fine-tuned ratio attack must beat the pre-trained one by this factor
/// at the 1% false-positive operating point.
const LEAK_TPR_FACTOR: f64 = 5.0;
/// Defended arm: ceiling on the attack-averaged AUC and TPR@1%FPR.
const DEFENDED_MAX_MEAN_AUC: f64 = 0.60;
const DEFENDED_MAX_MEAN_TPR: f64 = 0.05;
/// Defended arm: allowed validation-perplexity overhead vs the plain
/// fine-tune (1.15 = +15%).
const DEFENDED_MAX_PPL_RATIO: f64 = 1.15;
/// Noise band for the rank-capacity ordering checks.
const RANK_AUC_BAND: f64 = 0.03;
/// Noise bands for the noisy-training shape checks (AUC; relative ppl).
const NOISE_AUC_BAND: f64 = 0.03;
const NOISE_PPL_BAND: f64 = 0.03;
/// Exact-formula comparisons.
const EXACT_TOL: f64 = 1e-12;
/// Analytic vs central-finite-difference gradient agreement.
const GRAD_MAX_REL_ERR: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;
/// Probability-vector normalization.
const SOFTMAX_TOL: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

#[derive(Default)]
struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn check(&mut self, label: &str, pass: bool, detail: &str) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("acceptance {label}: {verdict} ({detail})");
        if !pass {
            self.failures.push(format!("{label}: {detail}"));
        }
    }
}

/// One attack row of a metric report.
struct AttackRow {
    auc: f64,
    tpr: f64,
}

/// Parse a stamped metric CSV into attack-name → (auc, tpr@1%fpr).
fn report(path: &Path) -> BTreeMap<String, AttackRow> {
    let (_, _, body) =
        read_csv(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let headers = rdr.headers().expect("csv header").clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .unwrap_or_else(|| panic!("column {name} missing in {}", path.display()))
    };
    let (attack, auc_col, tpr_col) = (col("attack"), col("auc"), col("tpr_at_fpr_0.01"));
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.expect("csv record");
        out.insert(
            rec[attack].to_string(),
            AttackRow {
                auc: rec[auc_col].parse().expect("auc value"),
                tpr: rec[tpr_col].parse().expect("tpr value"),
            },
        );
    }
    out
}

fn val_perplexity(path: &Path) -> f64 {
    read_json::<serde_json::Value>(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
        .payload["val_perplexity"]
        .as_f64()
        .expect("val_perplexity")
}

/// Materialize a preset config rooted at `dir` with dotted-path overrides.
fn gate_config(preset: &str, dir: &Path, overrides: &[&str]) -> ExperimentConfig {
    let text = format!("preset = \"{preset}\"\n[output]\ndir = \"{}\"\n", dir.display());
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml(&text, &overrides).expect("gate config")
}

fn fmt_aucs(rows: &BTreeMap<String, AttackRow>) -> String {
    let lo = rows.values().map(|r| r.auc).fold(f64::INFINITY, f64::min);
    let hi = rows.values().map(|r| r.auc).fold(f64::NEG_INFINITY, f64::max);
    format!("auc range [{lo:.4}, {hi:.4}]")
}

// ---------------------------------------------------------------------------
// Exact oracles used by the metric checks
// ---------------------------------------------------------------------------

/// O(n·m) pair counting: wins count 1, ties count 1/2.
fn pair_count_auc(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut score = 0.0;
    for &m in members {
        for &n in nonmembers {
            if m > n {
                score += 1.0;
            } else if m == n {
                score += 0.5;
            }
        }
    }
    score / (members.len() as f64 * nonmembers.len() as f64)
}

/// Highest true-positive rate over every score threshold whose
/// false-positive rate (strictly-greater rule) stays within `level`.
fn enumerated_tpr(members: &[f64], nonmembers: &[f64], level: f64) -> f64 {
    let mut best = 0.0f64;
    for &t in members.iter().chain(nonmembers) {
        let fpr = nonmembers.iter().filter(|&&x| x > t).count() as f64
            / nonmembers.len() as f64;
        if fpr <= level {
            let tpr =
                members.iter().filter(|&&x| x > t).count() as f64 / members.len() as f64;
            best = best.max(tpr);
        }
    }
    best
}

fn lattice_scores(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    // A coarse lattice forces ties both within and across classes.
    (0..n).map(|_| rng.gen_range(-8..=8i32) as f64 / 8.0).collect()
}

// ---------------------------------------------------------------------------
// Helpers for the numerical-core and formula checks
// ---------------------------------------------------------------------------

fn flat_trace(logp: &[f64]) -> LogProbTrace<f64> {
    LogProbTrace {
        seq_id: "t".into(),
        logp: logp.to_vec(),
        mu: vec![0.0; logp.len()],
        sigma: vec![1.0; logp.len()],
    }
}

fn random_seqs(v: &Vocabulary, n: usize, len: usize, seed: u64) -> Vec<TokenSequence> {
    const CHARS: &[u8] = b"abcdef ";
    let mut rng = seeds::rng(seed);
    (0..n)
        .map(|i| {
            let text: String =
                (0..len).map(|_| CHARS[rng.gen_range(0..CHARS.len())] as char).collect();
            v.tokenize(format!("s{i}"), &text).unwrap()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// The gate
// ---------------------------------------------------------------------------

#[test]
fn release_gate() {
    let mut gate = Gate::default();
    let scratch = TempDir::new().expect("temp dir");

    // ---- Preset runs -----------------------------------------------------
    // Main three-arm run at shipped defaults: pretrained baseline, plain
    // fine-tune, defended fine-tune. The baseline stages are timed on their
    // own because the fairness check carries the wall-clock budget.
    let main_dir = scratch.path().join("main");
    let mut main_runner = Runner::new(gate_config("ft-vs-soft", &main_dir, &[]));
    let started = Instant::now();
    main_runner.run_until(Some("arm:pretrain"), false).expect("baseline stages");
    let baseline_secs = started.elapsed().as_secs_f64();
    main_runner.run(false).expect("fine-tune and defense arms");

    let pre = report(&main_dir.join("reports/pretrain.csv"));
    let ft = report(&main_dir.join("reports/ft.csv"));
    let soft = report(&main_dir.join("reports/soft.csv"));

    // ---- 1: baseline fairness -------------------------------------------
    {
        let in_band = pre.values().all(|r| r.auc >= BASELINE_AUC_LO && r.auc <= BASELINE_AUC_HI);
        let bow_in_band = pre
            .get("bag_of_words")
            .map(|r| r.auc >= BASELINE_AUC_LO && r.auc <= BASELINE_AUC_HI)
            .unwrap_or(false);
        let on_time = baseline_secs <= BASELINE_TIME_LIMIT_SECS;
        gate.check(
            "01 baseline-fairness",
            in_band && bow_in_band && on_time,
            &format!("{}; {baseline_secs:.1}s of {BASELINE_TIME_LIMIT_SECS:.0}s", fmt_aucs(&pre)),
        );
    }

    // ---- 2: fine-tuning leaks ---------------------------------------------
    {
        // A one-epoch variant of the same pipeline supplies the midpoint of
        // the epoch-monotonicity check; epoch zero is the pretrained row.
        let e1_dir = scratch.path().join("epoch1");
        cmd_run(gate_config("single", &e1_dir, &["training.epochs=1"]), false)
            .expect("one-epoch run");
        let e1 = report(&e1_dir.join("reports/ft.csv"));

        let headline = ["loss", "zlib", "ratio", "ensemble"];
        let strong = headline.iter().all(|a| ft[*a].auc >= LEAK_MIN_AUC);
        let tpr_gain = ft["ratio"].tpr >= LEAK_TPR_FACTOR * pre["ratio"].tpr;
        let monotone = ft["loss"].auc >= e1["loss"].auc && e1["loss"].auc >= pre["loss"].auc;
        gate.check(
            "02 fine-tuning-leakage",
            strong && tpr_gain && monotone,
            &format!(
                "loss {:.4} zlib {:.4} ratio {:.4} ensemble {:.4}; ratio tpr {:.4} vs {:.4}; loss by epoch {:.4} -> {:.4} -> {:.4}",
                ft["loss"].auc, ft["zlib"].auc, ft["ratio"].auc, ft["ensemble"].auc,
                ft["ratio"].tpr, pre["ratio"].tpr,
                pre["loss"].auc, e1["loss"].auc, ft["loss"].auc,
            ),
        );
    }

    // ---- 3: the defense holds ---------------------------------------------
    {
        let mean_auc = soft.values().map(|r| r.auc).sum::<f64>() / soft.len() as f64;
        let mean_tpr = soft.values().map(|r| r.tpr).sum::<f64>() / soft.len() as f64;
        let ppl_ratio = val_perplexity(&main_dir.join("stats/soft.json"))
            / val_perplexity(&main_dir.join("stats/ft.json"));
        let pass = mean_auc <= DEFENDED_MAX_MEAN_AUC
            && mean_tpr <= DEFENDED_MAX_MEAN_TPR
            && ppl_ratio <= DEFENDED_MAX_PPL_RATIO;
        gate.check(
            "03 defended-fine-tune",
            pass,
            &format!(
                "mean auc {mean_auc:.4} (<= {DEFENDED_MAX_MEAN_AUC}); mean tpr {mean_tpr:.4} (<= {DEFENDED_MAX_MEAN_TPR}); ppl ratio {ppl_ratio:.4} (<= {DEFENDED_MAX_PPL_RATIO})"
            ),
        );
    }

    // ---- 4: low-rank capacity ---------------------------------------------
    {
        // The adapter path needs a gentler step size than the full path to
        // stay convergent; the grid is otherwise the shipped preset.
        let lora_dir = scratch.path().join("lora");
        cmd_run(
            gate_config("lora-grid", &lora_dir, &["training.learning_rate=0.03"]),
            false,
        )
        .expect("rank-grid run");
        let full = report(&lora_dir.join("reports/ft_full.csv"))["loss"].auc;
        let ranked: Vec<f64> = [2usize, 8, 32]
            .iter()
            .map(|r| report(&lora_dir.join(format!("reports/lora_r{r}.csv")))["loss"].auc)
            .collect();
        let rising = ranked.windows(2).all(|w| w[1] >= w[0] - RANK_AUC_BAND);
        let capped = ranked.iter().all(|&a| a <= full + RANK_AUC_BAND);
        gate.check(
            "04 low-rank-capacity",
            rising && capped,
            &format!(
                "loss auc by rank {:.4} / {:.4} / {:.4}; full {full:.4}; band {RANK_AUC_BAND}",
                ranked[0], ranked[1], ranked[2]
            ),
        );
    }

    // ---- 5: noisy-training shape -------------------------------------------
    {
        // Per-sample clipping keeps the noisy path stable at a much larger
        // step size; the noise grid is the shipped preset.
        let dp_dir = scratch.path().join("dp");
        cmd_run(gate_config("dp-sweep", &dp_dir, &["training.learning_rate=0.5"]), false)
            .expect("noise-sweep run");
        let arms = ["dp_sigma0", "dp_sigma0.5", "dp_sigma2"];
        let aucs: Vec<f64> =
            arms.iter().map(|a| report(&dp_dir.join(format!("reports/{a}.csv")))["loss"].auc).collect();
        let ppls: Vec<f64> =
            arms.iter().map(|a| val_perplexity(&dp_dir.join(format!("stats/{a}.json")))).collect();
        let auc_falling = aucs.windows(2).all(|w| w[1] <= w[0] + NOISE_AUC_BAND);
        let ppl_rising = ppls.windows(2).all(|w| w[1] >= w[0] * (1.0 - NOISE_PPL_BAND));
        gate.check(
            "05 noisy-training-shape",
            auc_falling && ppl_rising,
            &format!(
                "loss auc by sigma {:.4} / {:.4} / {:.4}; val ppl {:.2} / {:.2} / {:.2}",
                aucs[0], aucs[1], aucs[2], ppls[0], ppls[1], ppls[2]
            ),
        );
    }

    // ---- 6: adaptive attackers stay below the undefended bar ----------------
    {
        let adaptive_dir = scratch.path().join("adaptive");
        cmd_run(gate_config("adaptive", &adaptive_dir, &[]), false).expect("adaptive run");
        let ft_ens = &report(&adaptive_dir.join("reports/ft.csv"))["ensemble"];
        let scenario = |name: &str| {
            let rows = report(&adaptive_dir.join(format!("reports/adaptive_{name}.csv")));
            (rows["ensemble"].auc, rows["ensemble"].tpr)
        };
        let (ps_auc, _) = scenario("paraphrase_and_selection");
        let (po_auc, _) = scenario("paraphrase_only");
        let (sel_auc, sel_tpr) = scenario("selection_only");
        let below = ps_auc < ft_ens.auc && po_auc < ft_ens.auc && sel_auc < ft_ens.auc;
        let tpr_ok = sel_tpr <= ft_ens.tpr;
        gate.check(
            "06 adaptive-attacker",
            below && tpr_ok,
            &format!(
                "ensemble auc {ps_auc:.4} / {po_auc:.4} / {sel_auc:.4} vs undefended {:.4}; selection tpr {sel_tpr:.4} vs {:.4}",
                ft_ens.auc, ft_ens.tpr
            ),
        );
    }

    // ---- 7: metric oracles ---------------------------------------------------
    {
        let mut rng = seeds::rng(0xD1CE);
        let mut worst_auc_gap = 0.0f64;
        let mut worst_flip_gap = 0.0f64;
        let mut worst_tpr_gap = 0.0f64;
        for round in 0..1000 {
            let n_members = rng.gen_range(1..=200);
            let n_nonmembers = rng.gen_range(1..=200);
            let members = lattice_scores(&mut rng, n_members);
            let nonmembers = lattice_scores(&mut rng, n_nonmembers);
            let got = auc(&members, &nonmembers).expect("auc");
            worst_auc_gap =
                worst_auc_gap.max((got - pair_count_auc(&members, &nonmembers)).abs());
            let neg_m: Vec<f64> = members.iter().map(|x| -x).collect();
            let neg_n: Vec<f64> = nonmembers.iter().map(|x| -x).collect();
            let flipped = auc(&neg_m, &neg_n).expect("auc of negated scores");
            worst_flip_gap = worst_flip_gap.max((flipped - (1.0 - got)).abs());
            if round % 3 == 0 {
                for level in [0.01, 0.05, 0.25] {
                    let got = tpr_at_fpr(&members, &nonmembers, level).expect("tpr");
                    let want = enumerated_tpr(&members, &nonmembers, level);
                    worst_tpr_gap = worst_tpr_gap.max((got - want).abs());
                }
            }
        }
        let pass = worst_auc_gap <= EXACT_TOL
            && worst_flip_gap <= EXACT_TOL
            && worst_tpr_gap <= EXACT_TOL;
        gate.check(
            "07 metric-oracles",
            pass,
            &format!(
                "1000 tables: auc vs pair count {worst_auc_gap:.2e}; negation identity {worst_flip_gap:.2e}; tpr vs enumeration {worst_tpr_gap:.2e}"
            ),
        );
    }

    // ---- 8: numerical core -----------------------------------------------------
    {
        let mut rng = seeds::rng(0xBEEF);
        let mut worst_grad = 0.0f64;
        let mut worst_softmax = 0.0f64;
        let mut counts_ok = true;
        for round in 0..100u64 {
            let cfg = ModelConfig {
                context_len: rng.gen_range(2..=4),
                embed_dim: rng.gen_range(2..=4),
                hidden_dim: rng.gen_range(2..=6),
                init_seed: 1000 + round,
                init_scale: 0.2,
            };
            let vocab = Vocabulary::from_texts(["abcdef "]);
            let model = LanguageModel::<f64>::new(vocab, &cfg);
            let data = random_seqs(&model.vocab, rng.gen_range(2..=3), rng.gen_range(6..=10), round);

            // Analytic vs central finite differences, alternating between the
            // full parametrization and a low-rank adapter with both factors
            // populated.
            let err = if round % 3 == 2 {
                // The adapter rank must stay strictly below the smallest
                // matrix dimension, which these tiny models bound by the
                // hidden width.
                let rank = rng.gen_range(1..=(cfg.hidden_dim - 1).clamp(1, 3));
                let attach = TrainConfig {
                    epochs: 0,
                    learning_rate: 0.1,
                    batch_size: 4,
                    seed: round,
                    mode: TrainMode::Lora { rank },
                };
                let mut adapted = fit(&model, &data, &attach).expect("attach adapter");
                let delta = adapted.delta.as_mut().expect("adapter present");
                for (i, x) in delta.r1.as_mut_slice().iter_mut().enumerate() {
                    *x = 0.01 * (i as f64 + 1.0);
                }
                for (i, x) in delta.r2.as_mut_slice().iter_mut().enumerate() {
                    *x = -0.005 * (i as f64 + 1.0);
                }
                finite_difference_max_rel_err(&adapted, &data, TrainMode::Lora { rank }, FD_STEP)
            } else {
                finite_difference_max_rel_err(&model, &data, TrainMode::Full, FD_STEP)
            };
            worst_grad = worst_grad.max(err);

            // Probability-vector normalization on a random context.
            let ctx_len = rng.gen_range(1..=cfg.context_len);
            let context: Vec<usize> =
                (0..ctx_len).map(|_| rng.gen_range(0..model.vocab_size())).collect();
            let sum: f64 = model.next_distribution(&context).iter().sum();
            worst_softmax = worst_softmax.max((sum - 1.0).abs());

            // Trainable-parameter counts against the closed forms.
            let (v, e, h) = (model.vocab_size(), cfg.embed_dim, cfg.hidden_dim);
            let kd = cfg.context_len * e;
            counts_ok &= trainable_param_count(&model, TrainMode::Full)
                == v * e + kd * h + h + h * v + v;
            let rank = rng.gen_range(1..=4);
            counts_ok &= trainable_param_count(&model, TrainMode::Lora { rank })
                == (kd * rank + rank * h) + (h * rank + rank * v);
        }
        let pass =
            worst_grad < GRAD_MAX_REL_ERR && worst_softmax < SOFTMAX_TOL && counts_ok;
        gate.check(
            "08 numerical-core",
            pass,
            &format!(
                "100 models: max grad rel err {worst_grad:.2e} (< {GRAD_MAX_REL_ERR:.0e}); max softmax defect {worst_softmax:.2e}; param counts {}",
                if counts_ok { "exact" } else { "MISMATCH" }
            ),
        );
    }

    // ---- 9: formula identities ---------------------------------------------------
    {
        let mut gaps: Vec<(&str, f64)> = Vec::new();
        let mut push = |name: &'static str, got: f64, want: f64| {
            gaps.push((name, (got - want).abs()));
        };

        // Closed-form spot values.
        push("loss", score_loss(&flat_trace(&[-1.0, -2.0, -3.0])), -6.0);
        let raw = "abcabcabcabc";
        let bits = zlib_bits(raw).expect("zlib bits") as f64;
        push(
            "zlib",
            score_zlib(&flat_trace(&[-1.0, -2.0, -3.0]), raw).expect("zlib score"),
            -6.0 / bits,
        );
        push(
            "lowercase",
            score_lowercase(&flat_trace(&[-2.0]), &flat_trace(&[-4.0])).expect("lowercase"),
            0.5,
        );
        push(
            "min_k@50",
            score_min_k(&flat_trace(&[-1.0, -2.0, -3.0, -4.0]), 50).expect("min_k"),
            3.5,
        );
        let centered = LogProbTrace {
            seq_id: "c".into(),
            logp: vec![-0.5],
            mu: vec![-0.5],
            sigma: vec![1.0],
        };
        push("min_kpp centered", score_min_kpp(&centered, 100).expect("min_kpp"), 0.0);
        push(
            "ratio",
            score_ratio(&flat_trace(&[-2.0]), &flat_trace(&[-4.0])).expect("ratio"),
            0.5,
        );
        push(
            "recall",
            score_recall(&flat_trace(&[-5.0]), &flat_trace(&[-10.0])).expect("recall"),
            2.0,
        );
        push(
            "con_recall",
            score_con_recall(&flat_trace(&[-5.0]), &flat_trace(&[-10.0]), &flat_trace(&[-6.0]), 1.0)
                .expect("con_recall"),
            0.8,
        );

        // Degenerate-parameter identities on random traces.
        let mut rng = seeds::rng(0xF0F0);
        for _ in 0..50 {
            let n = rng.gen_range(1..=24);
            let logp: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.01..6.0)).collect();
            let t = flat_trace(&logp);
            push("min_k@100 is mean nll", score_min_k(&t, 100).expect("min_k"), t.nll_mean());
            let cond = flat_trace(&[-rng.gen_range(0.01..6.0)]);
            let other = flat_trace(&[-rng.gen_range(0.01..6.0)]);
            push(
                "con_recall gamma 0 is recall",
                score_con_recall(&t, &cond, &other, 0.0).expect("con_recall"),
                score_recall(&t, &cond).expect("recall"),
            );
        }

        // Compressibility ordering of the normalizer.
        let repetitive = "a".repeat(100);
        let mut rng = seeds::rng(0xC0DE);
        let jumbled: String = (0..100)
            .map(|_| (b' ' + rng.gen_range(0..64u8)) as char)
            .collect();
        let zlib_ordered =
            zlib_bits(&repetitive).expect("zlib") < zlib_bits(&jumbled).expect("zlib");

        // Full-retention defense equals plain training, bit for bit: the
        // defended pipeline is a warm-up epoch plus per-epoch selection and
        // rewrite, and at full retention the rewrite is the identity.
        let vocab = Vocabulary::from_texts(["abcdef "]);
        let model_cfg = ModelConfig {
            context_len: 4,
            embed_dim: 3,
            hidden_dim: 6,
            init_seed: 5,
            init_scale: 0.1,
        };
        let pretrained = LanguageModel::<f64>::new(vocab, &model_cfg);
        let members = random_seqs(&pretrained.vocab, 24, 12, 41);
        let validation = random_seqs(&pretrained.vocab, 8, 12, 42);
        let soft_cfg = SoftConfig {
            alpha: 1.0,
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 4,
            seed: 77,
            paraphraser: Paraphraser::Builtin { temperature: 5.0, seed: 1 },
        };
        let defended = soft_fine_tune(&pretrained, &members, &validation, &soft_cfg)
            .expect("full-retention defense");
        let warm = warmup_epoch(&pretrained, &members, 0.05, 4, 77).expect("warm-up");
        let plain = fit(
            &warm,
            &members,
            &TrainConfig {
                epochs: 3,
                learning_rate: 0.05,
                batch_size: 4,
                seed: 77,
                mode: TrainMode::Full,
            },
        )
        .expect("plain epochs");
        let bit_identical = defended.model == plain;

        let worst = gaps.iter().fold(0.0f64, |acc, (_, g)| acc.max(*g));
        let formulas_ok = worst <= EXACT_TOL;
        gate.check(
            "09 formula-identities",
            formulas_ok && zlib_ordered && bit_identical,
            &format!(
                "max formula gap {worst:.2e}; compressor ordering {}; full-retention bit-identity {}",
                if zlib_ordered { "ok" } else { "VIOLATED" },
                if bit_identical { "ok" } else { "VIOLATED" }
            ),
        );
    }

    // ---- 10: run determinism ---------------------------------------------------
    {
        // Two complete runs of one config (the content hash ignores the
        // output directory) must emit byte-identical metric artifacts. A
        // reduced split keeps the doubled pipeline quick without touching
        // any mechanism.
        let shrink = [
            "corpus.synth.documents=90",
            "split.members=60",
            "split.nonmembers=60",
            "split.validation=20",
        ];
        let twin_a = scratch.path().join("twin_a");
        let twin_b = scratch.path().join("twin_b");
        cmd_run(gate_config("ft-vs-soft", &twin_a, &shrink), false).expect("first twin");
        cmd_run(gate_config("ft-vs-soft", &twin_b, &shrink), false).expect("second twin");

        let mut compared = 0usize;
        let mut identical = true;
        for rel in ["reports", "scores"] {
            let mut names: Vec<PathBuf> = std::fs::read_dir(twin_a.join(rel))
                .expect("artifact dir")
                .map(|e| e.expect("dir entry").path())
                .collect();
            names.sort();
            for path in names {
                let name = path.file_name().expect("file name");
                let a = std::fs::read(&path).expect("twin a artifact");
                let b = std::fs::read(twin_b.join(rel).join(name))
                    .unwrap_or_else(|e| panic!("twin b missing {rel}/{name:?}: {e}"));
                identical &= a == b;
                compared += 1;
            }
        }
        let a = std::fs::read(twin_a.join("models.csv")).expect("twin a models.csv");
        let b = std::fs::read(twin_b.join("models.csv")).expect("twin b models.csv");
        identical &= a == b;
        compared += 1;
        // Three metric reports, three score tables, and the model index.
        gate.check(
            "10 run-determinism",
            identical && compared == 7,
            &format!("{compared} artifacts byte-compared, identical: {identical}"),
        );
    }

    assert!(
        gate.failures.is_empty(),
        "release gate failures:\n{}",
        gate.failures.join("\n")
    );
}
