//! Differentially-private training baselines: per-sample gradient
//! clipping plus Gaussian noise on the averaged lot gradient, applied
//! either to all weights or only to a low-rank adapter.
//!
//! This is the noise *mechanism* only. No privacy accountant is
//! included; runs are parameterized and labeled by the noise multiplier
//! directly.
//!
//! The step arithmetic deliberately mirrors the plain trainer: samples
//! are visited in the same derived shuffle order, per-sample gradients
//! accumulate in the same order, and the update applies the same
//! `-lr/lot` scale. With zero noise, an infinite clip bound, and a lot
//! spanning the whole dataset, a run of `steps` DP steps is therefore
//! bit-identical to a plain fit of `steps` full-batch epochs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::model::train::{prepare_mode, sample_gradient, Grads, TrainMode};
use crate::model::{Forward, LanguageModel};
use crate::scalar::{s, Scalar};
use crate::seeds;

/// Settings for noisy-clipped-gradient training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Per-sample gradient norm bound C. May be `inf` to disable
    /// clipping (only meaningful together with zero noise).
    pub clip_norm: f64,
    /// Noise multiplier σ; the averaged lot gradient receives i.i.d.
    /// Gaussian noise with standard deviation `σ·C/lot_size` per
    /// coordinate.
    pub noise_multiplier: f64,
    /// Samples drawn (without replacement) per step.
    pub lot_size: usize,
    /// Number of noisy updates.
    pub steps: usize,
    /// Step size applied to the noisy averaged gradient.
    pub learning_rate: f64,
    pub seed: u64,
    /// Which parameters receive updates (and noise).
    pub mode: TrainMode,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            lot_size: 32,
            steps: 60,
            learning_rate: 0.5,
            seed: 29,
            mode: TrainMode::Full,
        }
    }
}

impl DpConfig {
    pub fn validate(&self, data_len: usize) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig("clip_norm must be positive".into()));
        }
        if !self.noise_multiplier.is_finite() || self.noise_multiplier < 0.0 {
            return Err(Error::InvalidConfig(
                "noise_multiplier must be finite and >= 0".into(),
            ));
        }
        if self.noise_multiplier > 0.0 && !self.clip_norm.is_finite() {
            return Err(Error::InvalidConfig(
                "an unbounded clip_norm cannot be combined with noise".into(),
            ));
        }
        if self.lot_size == 0 || self.lot_size > data_len {
            return Err(Error::InvalidConfig(format!(
                "lot_size must be in 1..={data_len} (got {})",
                self.lot_size
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Scale `g` into the ball of radius `clip_norm`: `g · min(1, C/‖g‖₂)`.
/// Gradients already inside the ball are left untouched (bit-for-bit).
/// Returns the pre-clip norm.
pub fn clip_gradient<S: Scalar>(g: &mut Grads<S>, clip_norm: f64) -> S {
    let norm = g.l2_norm();
    let c = s::<S>(clip_norm);
    if norm > c {
        g.scale_in_place(c / norm);
    }
    norm
}

/// Train a copy of `model` with per-sample clipping and seeded Gaussian
/// noise. Pure in (model, data, config). Each step draws its lot by a
/// seeded shuffle without replacement; with zero noise the noise branch
/// is skipped entirely and consumes no randomness.
pub fn dp_fit<S: Scalar>(
    model: &LanguageModel<S>,
    data: &[TokenSequence],
    cfg: &DpConfig,
) -> Result<LanguageModel<S>> {
    cfg.validate(data.len())?;
    let mut out = model.clone();
    prepare_mode(&mut out, cfg.mode, cfg.seed)?;
    let lr = s::<S>(cfg.learning_rate);

    for step in 0..cfg.steps {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seeds::rng(seeds::derive_indexed(
            cfg.seed,
            "epoch-shuffle",
            step as u64,
        )));
        order.truncate(cfg.lot_size);

        let mut acc = Grads::zeros_for(&out, cfg.mode);
        let mut lot_loss = S::zero();
        {
            let mut fwd = Forward::new(&out);
            for &idx in &order {
                let (mut g, loss) = sample_gradient(&mut fwd, &out, &data[idx], cfg.mode);
                lot_loss = lot_loss + loss;
                let before = clip_gradient(&mut g, cfg.clip_norm);
                if before > s::<S>(cfg.clip_norm) {
                    let after: f64 = num_traits::ToPrimitive::to_f64(&g.l2_norm()).unwrap();
                    assert!(
                        after <= cfg.clip_norm * (1.0 + 1e-9),
                        "clipped norm {after} exceeds bound {}",
                        cfg.clip_norm
                    );
                }
                acc.add_scaled(&g, S::one());
            }
        }
        if !lot_loss.is_finite() {
            return Err(Error::TrainingDiverged { step });
        }
        out.apply_update(&acc, -(lr / s::<S>(cfg.lot_size as f64)));

        if cfg.noise_multiplier > 0.0 {
            let mut rng = seeds::rng(seeds::derive_indexed(cfg.seed, "dp-noise", step as u64));
            let mut noise = Grads::zeros_for(&out, cfg.mode);
            noise.for_each_slice_mut(|sl| {
                for x in sl {
                    let draw: f64 = rng.sample(StandardNormal);
                    *x = s::<S>(draw);
                }
            });
            let std = cfg.noise_multiplier * cfg.clip_norm / cfg.lot_size as f64;
            out.apply_update(&noise, -(lr * s::<S>(std)));
        }
    }
    Ok(out)
}
