//! Character-level neural language model with a fixed context window.
//!
//! Architecture: the last `context_len` token embeddings are concatenated
//! and passed through one tanh hidden layer to a softmax over the
//! vocabulary. Contexts shorter than the window are left-padded with the
//! reserved pad token. Optionally a low-rank delta adapts the hidden and
//! output matrices while the base stays frozen; the embedding is never
//! adapted.
//!
//! All weights live in the working scalar type `S`; checkpoints store
//! little-endian float64 regardless of `S`.

pub mod checkpoint;
pub mod train;

use std::borrow::Cow;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, TokenSequence, Vocabulary, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::{s, Scalar};
use crate::seeds;

/// Adaptation state of a model's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Initialized or loaded, not yet fine-tuned.
    Frozen,
    /// All base weights were trained.
    Full,
    /// A low-rank delta was trained over a frozen base.
    Lora,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Frozen => write!(f, "frozen"),
            Mode::Full => write!(f, "full"),
            Mode::Lora => write!(f, "lora"),
        }
    }
}

/// Shape and initialization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_seed: u64,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            context_len: 16,
            embed_dim: 8,
            hidden_dim: 96,
            init_seed: 17,
            init_scale: 0.1,
        }
    }
}

/// Base parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights<S> {
    /// vocab × embed_dim token embeddings.
    pub embedding: Mat<S>,
    /// (context_len · embed_dim) × hidden_dim input matrix.
    pub w1: Mat<S>,
    pub b1: Vec<S>,
    /// hidden_dim × vocab output matrix.
    pub w2: Mat<S>,
    pub b2: Vec<S>,
}

/// Low-rank delta over the hidden and output matrices:
/// effective = base + (scale / rank) · L · R.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraDelta<S> {
    pub l1: Mat<S>,
    pub r1: Mat<S>,
    pub l2: Mat<S>,
    pub r2: Mat<S>,
    pub rank: usize,
    pub scale: f64,
}

impl<S: Scalar> LoraDelta<S> {
    /// Per-matrix multiplier applied to L·R.
    pub fn factor(&self) -> S {
        s::<S>(self.scale / self.rank as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageModel<S> {
    pub vocab: Vocabulary,
    pub context_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub weights: Weights<S>,
    pub delta: Option<LoraDelta<S>>,
    pub mode: Mode,
}

pub(crate) fn gaussian_mat<S: Scalar>(rows: usize, cols: usize, std: f64, seed: u64) -> Mat<S> {
    let mut rng = seeds::rng(seed);
    let mut m = Mat::zeros(rows, cols);
    for v in m.as_mut_slice() {
        let draw: f64 = rng.sample(StandardNormal);
        *v = s::<S>(draw * std);
    }
    m
}

impl<S: Scalar> LanguageModel<S> {
    /// Initialize with seeded Gaussian weights and zero biases. A pure
    /// function of the vocabulary and config.
    pub fn new(vocab: Vocabulary, cfg: &ModelConfig) -> LanguageModel<S> {
        let v = vocab.len();
        let kd = cfg.context_len * cfg.embed_dim;
        let weights = Weights {
            embedding: gaussian_mat(v, cfg.embed_dim, cfg.init_scale, seeds::derive(cfg.init_seed, "init-embedding")),
            w1: gaussian_mat(kd, cfg.hidden_dim, cfg.init_scale, seeds::derive(cfg.init_seed, "init-w1")),
            b1: vec![S::zero(); cfg.hidden_dim],
            w2: gaussian_mat(cfg.hidden_dim, v, cfg.init_scale, seeds::derive(cfg.init_seed, "init-w2")),
            b2: vec![S::zero(); v],
        };
        LanguageModel {
            vocab,
            context_len: cfg.context_len,
            embed_dim: cfg.embed_dim,
            hidden_dim: cfg.hidden_dim,
            weights,
            delta: None,
            mode: Mode::Frozen,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Materialized hidden/output matrices including any low-rank delta.
    pub(crate) fn effective(&self) -> (Cow<'_, Mat<S>>, Cow<'_, Mat<S>>) {
        match &self.delta {
            None => (Cow::Borrowed(&self.weights.w1), Cow::Borrowed(&self.weights.w2)),
            Some(d) => {
                let f = d.factor();
                let mut w1 = self.weights.w1.clone();
                w1.add_scaled(&d.l1.mat_mul(&d.r1), f);
                let mut w2 = self.weights.w2.clone();
                w2.add_scaled(&d.l2.mat_mul(&d.r2), f);
                (Cow::Owned(w1), Cow::Owned(w2))
            }
        }
    }

    /// Next-token distribution given the last `context_len` entries of
    /// `context` (left-padded when shorter).
    pub fn next_distribution(&self, context: &[TokenId]) -> Vec<S> {
        let mut fwd = Forward::new(self);
        fwd.load_context(context, context.len());
        fwd.forward();
        fwd.softmax();
        fwd.p.clone()
    }

    /// Per-token log-probabilities of `x`, with the log-probability mean
    /// and standard deviation of each position's full distribution.
    pub fn trace(&self, x: &TokenSequence) -> LogProbTrace<S> {
        self.conditional_trace(&[], x)
    }

    /// Like [`trace`](Self::trace) but conditioning on `prefix` before
    /// the first token of `x`. An empty prefix reproduces `trace`.
    pub fn conditional_trace(&self, prefix: &[TokenId], x: &TokenSequence) -> LogProbTrace<S> {
        let mut stream = Vec::with_capacity(prefix.len() + x.tokens.len());
        stream.extend_from_slice(prefix);
        stream.extend_from_slice(&x.tokens);

        let mut fwd = Forward::new(self);
        let mut logp = Vec::with_capacity(x.tokens.len());
        let mut mu = Vec::with_capacity(x.tokens.len());
        let mut sigma = Vec::with_capacity(x.tokens.len());
        for pos in prefix.len()..stream.len() {
            fwd.load_context(&stream, pos);
            fwd.forward();
            fwd.softmax();
            logp.push(fwd.logp[stream[pos]]);
            let (m, sd) = moments_of(&fwd.p, &fwd.logp);
            mu.push(m);
            sigma.push(sd);
        }
        LogProbTrace { seq_id: x.id.clone(), logp, mu, sigma }
    }

    /// Summed negative log-likelihood of `x`.
    pub fn sequence_nll(&self, x: &TokenSequence) -> S {
        self.trace(x).nll_sum()
    }

    /// exp(total NLL / total token count) over a sample set.
    pub fn perplexity(&self, data: &[TokenSequence]) -> S {
        let mut total = S::zero();
        let mut tokens = 0usize;
        for x in data {
            total = total + self.sequence_nll(x);
            tokens += x.tokens.len();
        }
        assert!(tokens > 0, "perplexity over zero tokens");
        (total / s::<S>(tokens as f64)).exp()
    }

    /// Sample a continuation of `len` tokens after `prefix`; returns
    /// prefix ++ continuation. Reserved tokens are never emitted.
    /// `temperature == 0` means greedy argmax; otherwise logits are
    /// divided by the temperature before sampling. Pure in (seed, inputs).
    pub fn generate(
        &self,
        prefix: &[TokenId],
        len: usize,
        temperature: f64,
        seed: u64,
    ) -> Vec<TokenId> {
        assert!(temperature >= 0.0, "temperature must be non-negative");
        let mut rng = seeds::rng(seed);
        let mut stream = prefix.to_vec();
        let mut fwd = Forward::new(self);
        for _ in 0..len {
            fwd.load_context(&stream, stream.len());
            fwd.forward();
            // Reserved ids are masked out before normalization.
            fwd.logits[UNK_ID] = S::neg_infinity();
            fwd.logits[PAD_ID] = S::neg_infinity();
            let next = if temperature == 0.0 {
                argmax(&fwd.logits)
            } else {
                let t = s::<S>(temperature);
                for l in fwd.logits.iter_mut() {
                    *l = *l / t;
                }
                fwd.softmax();
                sample_index(&fwd.p, rng.gen::<f64>())
            };
            stream.push(next);
        }
        stream
    }

    /// Render generated token ids as text.
    pub fn render_tokens(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.vocab.symbol(t)).collect()
    }
}

fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_index<S: Scalar>(p: &[S], u: f64) -> usize {
    let mut acc = 0.0f64;
    let mut last_positive = 0;
    for (i, &pi) in p.iter().enumerate() {
        let pf = pi.to_f64().unwrap_or(0.0);
        if pf > 0.0 {
            last_positive = i;
        }
        acc += pf;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver at the top; attribute it to the last
    // positive-probability entry.
    last_positive
}

/// Mean and standard deviation of log-probability under a distribution:
/// μ = Σ pᵢ ln pᵢ, σ = √(Σ pᵢ (ln pᵢ − μ)²). Zero-probability entries
/// contribute nothing.
pub fn log_moments<S: Scalar>(p: &[S]) -> (S, S) {
    let logp: Vec<S> = p.iter().map(|&pi| pi.ln()).collect();
    moments_of(p, &logp)
}

fn moments_of<S: Scalar>(p: &[S], logp: &[S]) -> (S, S) {
    let mut mu = S::zero();
    for (&pi, &li) in p.iter().zip(logp) {
        if pi > S::zero() {
            mu = mu + pi * li;
        }
    }
    let mut var = S::zero();
    for (&pi, &li) in p.iter().zip(logp) {
        if pi > S::zero() {
            let d = li - mu;
            var = var + pi * d * d;
        }
    }
    (mu, var.sqrt())
}

/// Per-token log-probabilities of one sequence plus the distribution
/// moments at each position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbTrace<S> {
    pub seq_id: String,
    pub logp: Vec<S>,
    pub mu: Vec<S>,
    pub sigma: Vec<S>,
}

impl<S: Scalar> LogProbTrace<S> {
    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    /// Summed NLL: −Σ log p.
    pub fn nll_sum(&self) -> S {
        -self.logp.iter().copied().sum::<S>()
    }

    /// Length-normalized NLL.
    pub fn nll_mean(&self) -> S {
        assert!(!self.is_empty(), "trace of empty sequence");
        self.nll_sum() / s::<S>(self.len() as f64)
    }
}

/// Trace export record: `{seq_id, logp, mu, sigma}` per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq_id: String,
    pub logp: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl TraceRecord {
    pub fn from_trace<S: Scalar>(t: &LogProbTrace<S>) -> TraceRecord {
        let f = |v: &[S]| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
        TraceRecord { seq_id: t.seq_id.clone(), logp: f(&t.logp), mu: f(&t.mu), sigma: f(&t.sigma) }
    }
}

/// Write traces as line-delimited JSON.
pub fn write_traces<'a, S: Scalar>(
    path: &std::path::Path,
    traces: impl IntoIterator<Item = &'a LogProbTrace<S>>,
) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut out, &TraceRecord::from_trace(t))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_traces(path: &std::path::Path) -> Result<Vec<TraceRecord>> {
    use std::io::BufRead;
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Trainable parameter count of one m×n matrix.
pub fn full_matrix_params(m: usize, n: usize) -> usize {
    m * n
}

/// Trainable parameter count of a rank-r adapter over an m×n matrix.
pub fn lora_matrix_params(m: usize, n: usize, r: usize) -> usize {
    m * r + r * n
}

/// Total trainable parameters in the given mode. Full counts every base
/// tensor including biases; lora counts only the adapter factors over the
/// two adapted matrices.
pub fn trainable_param_count<S: Scalar>(model: &LanguageModel<S>, mode: train::TrainMode) -> usize {
    let kd = model.context_len * model.embed_dim;
    let v = model.vocab_size();
    let h = model.hidden_dim;
    match mode {
        train::TrainMode::Full => {
            full_matrix_params(v, model.embed_dim)
                + full_matrix_params(kd, h)
                + h
                + full_matrix_params(h, v)
                + v
        }
        train::TrainMode::Lora { rank } => {
            lora_matrix_params(kd, h, rank) + lora_matrix_params(h, v, rank)
        }
    }
}

/// Reusable forward-pass buffers over one model.
pub(crate) struct Forward<'a, S: Scalar> {
    model: &'a LanguageModel<S>,
    pub w1: Cow<'a, Mat<S>>,
    pub w2: Cow<'a, Mat<S>>,
    pub ctx: Vec<TokenId>,
    pub e: Vec<S>,
    pub a1: Vec<S>,
    pub z: Vec<S>,
    pub logits: Vec<S>,
    pub logp: Vec<S>,
    pub p: Vec<S>,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(model: &'a LanguageModel<S>) -> Forward<'a, S> {
        let (w1, w2) = model.effective();
        let kd = model.context_len * model.embed_dim;
        let v = model.vocab_size();
        Forward {
            model,
            w1,
            w2,
            ctx: vec![PAD_ID; model.context_len],
            e: vec![S::zero(); kd],
            a1: vec![S::zero(); model.hidden_dim],
            z: vec![S::zero(); model.hidden_dim],
            logits: vec![S::zero(); v],
            logp: vec![S::zero(); v],
            p: vec![S::zero(); v],
        }
    }

    /// Context for predicting `stream[pos]`: the `context_len` tokens
    /// before `pos`, left-padded with PAD.
    pub fn load_context(&mut self, stream: &[TokenId], pos: usize) {
        let k = self.model.context_len;
        for (j, slot) in self.ctx.iter_mut().enumerate() {
            let back = k - j;
            *slot = if pos >= back { stream[pos - back] } else { PAD_ID };
        }
    }

    /// Embed the loaded context and run to logits.
    pub fn forward(&mut self) {
        let d = self.model.embed_dim;
        for (j, &t) in self.ctx.iter().enumerate() {
            self.e[j * d..(j + 1) * d].copy_from_slice(self.model.weights.embedding.row(t));
        }
        self.w1.vec_mul(&self.e, &mut self.a1);
        for (a, &b) in self.a1.iter_mut().zip(&self.model.weights.b1) {
            *a = *a + b;
        }
        for (z, &a) in self.z.iter_mut().zip(&self.a1) {
            *z = a.tanh();
        }
        self.w2.vec_mul(&self.z, &mut self.logits);
        for (l, &b) in self.logits.iter_mut().zip(&self.model.weights.b2) {
            *l = *l + b;
        }
    }

    /// Normalize logits into log-probabilities and probabilities.
    pub fn softmax(&mut self) {
        let mut max = S::neg_infinity();
        for &l in &self.logits {
            if l > max {
                max = l;
            }
        }
        let mut sum = S::zero();
        for (p, &l) in self.p.iter_mut().zip(&self.logits) {
            *p = (l - max).exp();
            sum = sum + *p;
        }
        let ln_sum = sum.ln();
        for (lp, &l) in self.logp.iter_mut().zip(&self.logits) {
            *lp = l - max - ln_sum;
        }
        let inv = S::one() / sum;
        for p in self.p.iter_mut() {
            *p = *p * inv;
        }
    }
}
