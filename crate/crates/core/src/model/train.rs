//! Plain SGD training with hand-derived gradients.
//!
//! The epoch trainer accumulates per-sample gradients into a batch sum
//! before each update; the privacy trainer reuses the same per-sample
//! path, so their accumulation orders coincide and a zero-noise,
//! unclipped privacy step is bit-identical to a plain full-batch step.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::linalg::{axpy, l2_norm, Mat};
use crate::model::{Forward, LanguageModel, LoraDelta, Mode};
use crate::scalar::{s, Scalar};
use crate::seeds;

/// Which parameters an optimizer touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TrainMode {
    /// All base tensors.
    Full,
    /// Only a rank-`rank` delta over the hidden and output matrices.
    Lora { rank: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            learning_rate: 0.5,
            batch_size: 32,
            seed: 23,
            mode: TrainMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Gradient tensors matching the trainable set of a mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Grads<S> {
    Full { embedding: Mat<S>, w1: Mat<S>, b1: Vec<S>, w2: Mat<S>, b2: Vec<S> },
    Lora { l1: Mat<S>, r1: Mat<S>, l2: Mat<S>, r2: Mat<S> },
}

impl<S: Scalar> Grads<S> {
    pub fn zeros_for(model: &LanguageModel<S>, mode: TrainMode) -> Grads<S> {
        let kd = model.context_len * model.embed_dim;
        let v = model.vocab_size();
        let h = model.hidden_dim;
        match mode {
            TrainMode::Full => Grads::Full {
                embedding: Mat::zeros(v, model.embed_dim),
                w1: Mat::zeros(kd, h),
                b1: vec![S::zero(); h],
                w2: Mat::zeros(h, v),
                b2: vec![S::zero(); v],
            },
            TrainMode::Lora { rank } => Grads::Lora {
                l1: Mat::zeros(kd, rank),
                r1: Mat::zeros(rank, h),
                l2: Mat::zeros(h, rank),
                r2: Mat::zeros(rank, v),
            },
        }
    }

    /// Visit every gradient coordinate mutably, tensor by tensor.
    pub fn for_each_slice_mut(&mut self, mut f: impl FnMut(&mut [S])) {
        match self {
            Grads::Full { embedding, w1, b1, w2, b2 } => {
                f(embedding.as_mut_slice());
                f(w1.as_mut_slice());
                f(b1);
                f(w2.as_mut_slice());
                f(b2);
            }
            Grads::Lora { l1, r1, l2, r2 } => {
                f(l1.as_mut_slice());
                f(r1.as_mut_slice());
                f(l2.as_mut_slice());
                f(r2.as_mut_slice());
            }
        }
    }

    /// Read-only views of every gradient tensor, in update order.
    pub fn slices(&self) -> Vec<&[S]> {
        match self {
            Grads::Full { embedding, w1, b1, w2, b2 } => {
                vec![embedding.as_slice(), w1.as_slice(), b1, w2.as_slice(), b2]
            }
            Grads::Lora { l1, r1, l2, r2 } => {
                vec![l1.as_slice(), r1.as_slice(), l2.as_slice(), r2.as_slice()]
            }
        }
    }

    /// Flattened Euclidean norm over all coordinates.
    pub fn l2_norm(&self) -> S {
        let sq: S = self.slices().into_iter().map(|sl| {
            let n = l2_norm(sl);
            n * n
        }).sum();
        sq.sqrt()
    }

    pub fn scale_in_place(&mut self, factor: S) {
        self.for_each_slice_mut(|sl| {
            for x in sl {
                *x = *x * factor;
            }
        });
    }

    /// self += scale · other. Both sides must share a mode and shape.
    pub fn add_scaled(&mut self, other: &Grads<S>, scale: S) {
        match (self, other) {
            (
                Grads::Full { embedding, w1, b1, w2, b2 },
                Grads::Full { embedding: oe, w1: ow1, b1: ob1, w2: ow2, b2: ob2 },
            ) => {
                embedding.add_scaled(oe, scale);
                w1.add_scaled(ow1, scale);
                axpy(b1, ob1, scale);
                w2.add_scaled(ow2, scale);
                axpy(b2, ob2, scale);
            }
            (
                Grads::Lora { l1, r1, l2, r2 },
                Grads::Lora { l1: ol1, r1: or1, l2: ol2, r2: or2 },
            ) => {
                l1.add_scaled(ol1, scale);
                r1.add_scaled(or1, scale);
                l2.add_scaled(ol2, scale);
                r2.add_scaled(or2, scale);
            }
            _ => panic!("gradient mode mismatch"),
        }
    }
}

impl<S: Scalar> LanguageModel<S> {
    /// θ += scale · g over the trainable set g covers.
    pub(crate) fn apply_update(&mut self, g: &Grads<S>, scale: S) {
        match g {
            Grads::Full { embedding, w1, b1, w2, b2 } => {
                self.weights.embedding.add_scaled(embedding, scale);
                self.weights.w1.add_scaled(w1, scale);
                axpy(&mut self.weights.b1, b1, scale);
                self.weights.w2.add_scaled(w2, scale);
                axpy(&mut self.weights.b2, b2, scale);
            }
            Grads::Lora { l1, r1, l2, r2 } => {
                let d = self.delta.as_mut().expect("lora update without delta");
                d.l1.add_scaled(l1, scale);
                d.r1.add_scaled(r1, scale);
                d.l2.add_scaled(l2, scale);
                d.r2.add_scaled(r2, scale);
            }
        }
    }
}

/// Gradient of one sample's summed NLL with respect to the trainable
/// set, plus the sample loss. Allocates fresh buffers; prefer
/// [`sample_gradient`] inside loops.
pub fn per_sample_gradient<S: Scalar>(
    model: &LanguageModel<S>,
    x: &TokenSequence,
    mode: TrainMode,
) -> (Grads<S>, S) {
    let mut fwd = Forward::new(model);
    sample_gradient(&mut fwd, model, x, mode)
}

/// Gradient of one sample's summed NLL with respect to the trainable set,
/// plus the sample loss. The backward pass is streamed per position, so
/// activations are never stored.
pub(crate) fn sample_gradient<S: Scalar>(
    fwd: &mut Forward<'_, S>,
    model: &LanguageModel<S>,
    x: &TokenSequence,
    mode: TrainMode,
) -> (Grads<S>, S) {
    let mut g = Grads::zeros_for(model, mode);
    let mut loss = S::zero();
    let d = model.embed_dim;
    let h = model.hidden_dim;
    let v = model.vocab_size();
    let factor = match mode {
        TrainMode::Lora { .. } => {
            model.delta.as_ref().expect("lora gradient without delta").factor()
        }
        TrainMode::Full => S::one(),
    };

    let mut dlogits = vec![S::zero(); v];
    let mut dz = vec![S::zero(); h];
    let mut da1 = vec![S::zero(); h];
    let mut de = vec![S::zero(); model.context_len * d];
    let mut tmp_r: Vec<S> = Vec::new();

    for pos in 0..x.tokens.len() {
        fwd.load_context(&x.tokens, pos);
        fwd.forward();
        fwd.softmax();
        let target = x.tokens[pos];
        loss = loss - fwd.logp[target];

        dlogits.copy_from_slice(&fwd.p);
        dlogits[target] = dlogits[target] - S::one();

        match &mut g {
            Grads::Full { embedding, w1, b1, w2, b2 } => {
                w2.add_outer(&fwd.z, &dlogits, S::one());
                axpy(b2, &dlogits, S::one());
                fwd.w2.mul_vec(&dlogits, &mut dz);
                for ((da, &zz), &dzz) in da1.iter_mut().zip(&fwd.z).zip(&dz) {
                    *da = dzz * (S::one() - zz * zz);
                }
                w1.add_outer(&fwd.e, &da1, S::one());
                axpy(b1, &da1, S::one());
                fwd.w1.mul_vec(&da1, &mut de);
                for (j, &t) in fwd.ctx.iter().enumerate() {
                    axpy(embedding.row_mut(t), &de[j * d..(j + 1) * d], S::one());
                }
            }
            Grads::Lora { l1, r1, l2, r2 } => {
                let delta = model.delta.as_ref().expect("lora gradient without delta");
                let rank = delta.rank;
                tmp_r.resize(rank, S::zero());
                // Output adapter: dW2_eff is rank-one (z ⊗ dlogits).
                delta.r2.mul_vec(&dlogits, &mut tmp_r);
                l2.add_outer(&fwd.z, &tmp_r, factor);
                delta.l2.vec_mul(&fwd.z, &mut tmp_r);
                r2.add_outer(&tmp_r, &dlogits, factor);
                // Backprop through the effective output matrix.
                fwd.w2.mul_vec(&dlogits, &mut dz);
                for ((da, &zz), &dzz) in da1.iter_mut().zip(&fwd.z).zip(&dz) {
                    *da = dzz * (S::one() - zz * zz);
                }
                // Hidden adapter: dW1_eff is rank-one (e ⊗ da1).
                delta.r1.mul_vec(&da1, &mut tmp_r);
                l1.add_outer(&fwd.e, &tmp_r, factor);
                delta.l1.vec_mul(&fwd.e, &mut tmp_r);
                r1.add_outer(&tmp_r, &da1, factor);
            }
        }
    }
    (g, loss)
}

/// One pass over `data` in seeded shuffle order, updating after every
/// `batch_size` samples. `step` counts updates across the whole fit for
/// divergence reporting.
pub(crate) fn train_epoch<S: Scalar>(
    model: &mut LanguageModel<S>,
    data: &[TokenSequence],
    lr: S,
    batch_size: usize,
    mode: TrainMode,
    shuffle_seed: u64,
    step: &mut usize,
) -> Result<()> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seeds::rng(shuffle_seed));

    for batch in order.chunks(batch_size) {
        let mut acc = Grads::zeros_for(model, mode);
        let mut batch_loss = S::zero();
        {
            let mut fwd = Forward::new(model);
            for &idx in batch {
                let (g, loss) = sample_gradient(&mut fwd, model, &data[idx], mode);
                acc.add_scaled(&g, S::one());
                batch_loss = batch_loss + loss;
            }
        }
        if !batch_loss.is_finite() {
            return Err(Error::TrainingDiverged { step: *step });
        }
        let scale = -(lr / s::<S>(batch.len() as f64));
        model.apply_update(&acc, scale);
        *step += 1;
    }
    Ok(())
}

/// Train a copy of `model` on `data`. Pure in (model, data, config):
/// per-epoch shuffles derive from `cfg.seed` and the epoch index, and a
/// fresh lora delta derives from `cfg.seed` as well.
pub fn fit<S: Scalar>(
    model: &LanguageModel<S>,
    data: &[TokenSequence],
    cfg: &TrainConfig,
) -> Result<LanguageModel<S>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training data is empty".into()));
    }
    let mut out = model.clone();
    prepare_mode(&mut out, cfg.mode, cfg.seed)?;
    let lr = s::<S>(cfg.learning_rate);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let shuffle_seed = seeds::derive_indexed(cfg.seed, "epoch-shuffle", epoch as u64);
        train_epoch(&mut out, data, lr, cfg.batch_size, cfg.mode, shuffle_seed, &mut step)?;
    }
    Ok(out)
}

/// Attach or validate the delta and set the resulting mode tag.
pub(crate) fn prepare_mode<S: Scalar>(
    model: &mut LanguageModel<S>,
    mode: TrainMode,
    seed: u64,
) -> Result<()> {
    match mode {
        TrainMode::Full => {
            if model.delta.is_some() {
                return Err(Error::InvalidMode(
                    "full training on a model that already carries an adapter".into(),
                ));
            }
            model.mode = Mode::Full;
        }
        TrainMode::Lora { rank } => {
            match &model.delta {
                Some(d) if d.rank == rank => {}
                Some(d) => {
                    return Err(Error::InvalidMode(format!(
                        "model carries a rank-{} adapter, cannot train rank {rank}",
                        d.rank
                    )))
                }
                None => {
                    model.delta = Some(init_delta(model, rank, seed)?);
                }
            }
            model.mode = Mode::Lora;
        }
    }
    Ok(())
}

/// Fresh delta: L is small Gaussian, R is zero, so the initial effective
/// weights equal the base exactly while gradients still reach R.
fn init_delta<S: Scalar>(
    model: &LanguageModel<S>,
    rank: usize,
    seed: u64,
) -> Result<LoraDelta<S>> {
    let kd = model.context_len * model.embed_dim;
    let h = model.hidden_dim;
    let v = model.vocab_size();
    for (rows, cols) in [(kd, h), (h, v)] {
        if rank >= rows.min(cols) {
            return Err(Error::RankTooLarge { rank, rows, cols });
        }
    }
    let init = |rows, cols, label| -> Mat<S> {
        super::gaussian_mat(rows, cols, 0.1, seeds::derive(seed, label))
    };
    Ok(LoraDelta {
        l1: init(kd, rank, "lora-init-l1"),
        r1: Mat::zeros(rank, h),
        l2: init(h, rank, "lora-init-l2"),
        r2: Mat::zeros(rank, v),
        rank,
        scale: 2.0 * rank as f64,
    })
}

/// Warm-up step used by the obfuscation defense: exactly one epoch of
/// full training on `data` under the defense's shared seed.
pub fn warmup_epoch<S: Scalar>(
    model: &LanguageModel<S>,
    data: &[TokenSequence],
    learning_rate: f64,
    batch_size: usize,
    seed: u64,
) -> Result<LanguageModel<S>> {
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate,
        batch_size,
        seed,
        mode: TrainMode::Full,
    };
    let mut out = model.clone();
    prepare_mode(&mut out, cfg.mode, cfg.seed)?;
    let mut step = 0usize;
    train_epoch(
        &mut out,
        data,
        s::<S>(learning_rate),
        batch_size,
        TrainMode::Full,
        seeds::derive(seed, "warmup-shuffle"),
        &mut step,
    )?;
    Ok(out)
}

/// Total summed NLL over a sample set (the quantity the trainer descends).
pub fn total_nll<S: Scalar>(model: &LanguageModel<S>, data: &[TokenSequence]) -> S {
    data.iter().map(|x| model.sequence_nll(x)).sum()
}

/// Largest relative disagreement between analytic gradients of the total
/// NLL and central finite differences with the given step, over every
/// trainable coordinate. Near-zero pairs are compared under an absolute
/// floor of `step²`.
pub fn finite_difference_max_rel_err<S: Scalar>(
    model: &LanguageModel<S>,
    data: &[TokenSequence],
    mode: TrainMode,
    step: f64,
) -> f64 {
    let mut analytic = Grads::zeros_for(model, mode);
    {
        let mut fwd = Forward::new(model);
        for x in data {
            let (g, _) = sample_gradient(&mut fwd, model, x, mode);
            analytic.add_scaled(&g, S::one());
        }
    }
    let mut probe = model.clone();
    let mut flat_analytic: Vec<f64> = Vec::new();
    analytic.for_each_slice_mut(|sl| {
        flat_analytic.extend(sl.iter().map(|x| x.to_f64().unwrap()));
    });

    let mut max_err = 0.0f64;
    let n_params = flat_analytic.len();
    for idx in 0..n_params {
        let a = flat_analytic[idx];
        let plus = {
            nudge_param(&mut probe, mode, idx, step);
            let f = total_nll(&probe, data).to_f64().unwrap();
            nudge_param(&mut probe, mode, idx, -step);
            f
        };
        let minus = {
            nudge_param(&mut probe, mode, idx, -step);
            let f = total_nll(&probe, data).to_f64().unwrap();
            nudge_param(&mut probe, mode, idx, step);
            f
        };
        let numeric = (plus - minus) / (2.0 * step);
        let scale = a.abs().max(numeric.abs()).max(step * step);
        let err = (a - numeric).abs() / scale;
        if err > max_err {
            max_err = err;
        }
    }
    max_err
}

/// Add `delta` to the idx-th trainable coordinate (in the same flat order
/// the gradient tensors use).
fn nudge_param<S: Scalar>(model: &mut LanguageModel<S>, mode: TrainMode, idx: usize, delta: f64) {
    let mut remaining = idx;
    let mut done = false;
    let d = s::<S>(delta);
    let mut visit = |sl: &mut [S]| {
        if done {
            return;
        }
        if remaining < sl.len() {
            sl[remaining] = sl[remaining] + d;
            done = true;
        } else {
            remaining -= sl.len();
        }
    };
    match mode {
        TrainMode::Full => {
            let w = &mut model.weights;
            visit(w.embedding.as_mut_slice());
            visit(w.w1.as_mut_slice());
            visit(&mut w.b1);
            visit(w.w2.as_mut_slice());
            visit(&mut w.b2);
        }
        TrainMode::Lora { .. } => {
            let delta_t = model.delta.as_mut().expect("lora nudge without delta");
            visit(delta_t.l1.as_mut_slice());
            visit(delta_t.r1.as_mut_slice());
            visit(delta_t.l2.as_mut_slice());
            visit(delta_t.r2.as_mut_slice());
        }
    }
    assert!(done, "parameter index out of range");
}

/// The model's average training loss per sample.
pub fn mean_loss<S: Scalar>(model: &LanguageModel<S>, data: &[TokenSequence]) -> S {
    assert!(!data.is_empty(), "mean loss over empty data");
    total_nll(model, data) / s::<S>(data.len() as f64)
}
