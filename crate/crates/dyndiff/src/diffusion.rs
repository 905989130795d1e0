//! Noise schedule, closed-form forward noising, the conditional reverse step,
//! and the simplified noise-prediction training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{self, DenoiserConfig};
use crate::error::{Error, Result};
use crate::tape::{NodeId, ParamStore, Tape};
use crate::tensor::{Real, Tensor};

/// Schedule parameters as they appear in config files and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.5,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.steps, self.beta_min, self.beta_max)
    }
}

/// Variance schedule over `S` diffusion steps plus derived coefficients.
///
/// Stored in `f64`; coefficients are cast to the working precision at use.
/// Step indices `s` are 1-based throughout, matching the chain
/// `x_0 -> x_1 -> ... -> x_S`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced `beta` from `beta_min` to `beta_max` inclusive, with
    /// `alpha = 1 - beta`, `alpha_bar` the running product, and the fixed
    /// reverse-step deviation `sigma = sqrt(beta)`.
    pub fn build(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Schedule("step count must be >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Schedule(format!(
                "require 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_min]
        } else {
            (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for &a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma: Vec<f64> = beta.iter().map(|b| b.sqrt()).collect();
        for w in alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Schedule("alpha_bar must be strictly decreasing".into()));
            }
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_step(&self, s: usize) -> Result<usize> {
        if s >= 1 && s <= self.steps() {
            Ok(s - 1)
        } else {
            Err(Error::Schedule(format!(
                "step {s} out of range 1..={}",
                self.steps()
            )))
        }
    }

    pub fn beta(&self, s: usize) -> Result<f64> {
        Ok(self.beta[self.check_step(s)?])
    }

    pub fn alpha(&self, s: usize) -> Result<f64> {
        Ok(self.alpha[self.check_step(s)?])
    }

    pub fn alpha_bar(&self, s: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check_step(s)?])
    }

    pub fn sigma(&self, s: usize) -> Result<f64> {
        Ok(self.sigma[self.check_step(s)?])
    }
}

/// Closed-form forward noising: `sqrt(abar_s) x0 + sqrt(1 - abar_s) eps`.
pub fn q_sample<T: Real>(
    x0: &Tensor<T>,
    s: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    let abar = sched.alpha_bar(s)?;
    let c0 = T::from_f64(abar.sqrt());
    let c1 = T::from_f64((1.0 - abar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| c0 * x + c1 * e)
        .collect();
    Tensor::from_vec(data, x0.shape().to_vec())
}

/// One reverse transition from `x_s` to `x_{s-1}`:
///
/// `(x_s - (1 - alpha_s) / sqrt(1 - abar_s) * eps_hat) / sqrt(alpha_s) + sigma_s z`
///
/// The final step (`s == 1`) is deterministic: `z` is ignored there.
pub fn reverse_step<T: Real>(
    xs: &Tensor<T>,
    s: usize,
    eps_hat: &Tensor<T>,
    sched: &NoiseSchedule,
    z: &Tensor<T>,
) -> Result<Tensor<T>> {
    if xs.shape() != eps_hat.shape() || xs.shape() != z.shape() {
        return Err(Error::ShapeMismatch {
            op: "reverse_step",
            lhs: xs.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        });
    }
    let alpha = sched.alpha(s)?;
    let abar = sched.alpha_bar(s)?;
    let inv_sqrt_alpha = T::from_f64(1.0 / alpha.sqrt());
    let eps_coeff = T::from_f64((1.0 - alpha) / (1.0 - abar).sqrt());
    let sigma = if s > 1 {
        T::from_f64(sched.sigma(s)?)
    } else {
        T::ZERO
    };
    let data = xs
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&x, &e), &zv)| inv_sqrt_alpha * (x - eps_coeff * e) + sigma * zv)
        .collect();
    let out = Tensor::from_vec(data, xs.shape().to_vec())?;
    out.ensure_finite("reverse_step")?;
    Ok(out)
}

/// A batch of noised targets: per-item steps drawn uniformly from `1..=S`,
/// fresh standard-normal noise, and `xs` formed by the closed-form q-sample.
#[derive(Debug, Clone)]
pub struct NoisedBatch<T: Real> {
    pub x0: Tensor<T>,
    pub s: Vec<usize>,
    pub eps: Tensor<T>,
    pub xs: Tensor<T>,
}

impl<T: Real> NoisedBatch<T> {
    /// Draws per-item steps and noise for a `[B, n, p]` batch of clean
    /// targets.
    pub fn draw<R: Rng + ?Sized>(
        x0: Tensor<T>,
        sched: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        if x0.shape().len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "noised_batch",
                lhs: x0.shape().to_vec(),
                rhs: vec![],
            });
        }
        let batch = x0.shape()[0];
        let item = x0.numel() / batch;
        let s: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(1..=sched.steps()))
            .collect();
        let eps = Tensor::randn(x0.shape().to_vec(), rng);
        let mut xs = vec![T::ZERO; x0.numel()];
        for (b, &step) in s.iter().enumerate() {
            let abar = sched.alpha_bar(step)?;
            let c0 = T::from_f64(abar.sqrt());
            let c1 = T::from_f64((1.0 - abar).sqrt());
            for i in 0..item {
                let idx = b * item + i;
                xs[idx] = c0 * x0.data()[idx] + c1 * eps.data()[idx];
            }
        }
        let xs = Tensor::from_vec(xs, x0.shape().to_vec())?;
        Ok(NoisedBatch { x0, s, eps, xs })
    }

    /// Recomputes `xs` from the stored fields and reports the maximum
    /// deviation; used to assert the reconstruction invariant in tests.
    pub fn reconstruction_error(&self, sched: &NoiseSchedule) -> Result<f64> {
        let batch = self.x0.shape()[0];
        let item = self.x0.numel() / batch;
        let mut worst = 0.0f64;
        for (b, &step) in self.s.iter().enumerate() {
            let abar = sched.alpha_bar(step)?;
            for i in 0..item {
                let idx = b * item + i;
                let expect = abar.sqrt() * self.x0.data()[idx].to_f64()
                    + (1.0 - abar).sqrt() * self.eps.data()[idx].to_f64();
                worst = worst.max((expect - self.xs.data()[idx].to_f64()).abs());
            }
        }
        Ok(worst)
    }
}

/// Builds the simplified conditional loss
/// `mean || eps - eps_theta(xs, s, e) ||^2` on the tape and returns the
/// scalar loss node. `e` is the conditioning node (`[B, d_model]`), either an
/// encoded context or a learned constant in unconditional-baseline mode.
pub fn training_loss<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    batch: &NoisedBatch<T>,
    e: NodeId,
    cfg: &DenoiserConfig,
) -> Result<NodeId> {
    let b = batch.x0.shape()[0];
    let mut embs = Vec::with_capacity(b * cfg.d_model);
    for &step in &batch.s {
        embs.extend_from_slice(denoiser::embed_step::<T>(step, cfg.d_model)?.vec.data());
    }
    let s_embs = tape.leaf(Tensor::from_vec(embs, vec![b, cfg.d_model])?)?;
    let xs = tape.leaf(batch.xs.clone())?;
    let eps = tape.leaf(batch.eps.clone())?;
    let eps_hat = denoiser::predict_noise(tape, store, xs, s_embs, e, cfg)?;
    let err = tape.sub(eps_hat, eps)?;
    tape.mean_sq(err)
}

/// The deterministic part of the reverse transition (the mean
/// parameterization): `(xs - (1 - alpha) / sqrt(1 - alpha_bar) * eps_hat) / sqrt(alpha)`.
pub fn reverse_mean(xs: f64, eps_hat: f64, alpha: f64, alpha_bar: f64) -> f64 {
    (xs - (1.0 - alpha) / (1.0 - alpha_bar).sqrt() * eps_hat) / alpha.sqrt()
}
