//! Training, ensemble sampling, and iterative multi-horizon rollout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState, StatEntry};
use crate::config::DataConfig;
use crate::data::{destandardize_tensor, Stats, WindowSet};
use crate::denoiser::{self, DenoiserConfig};
use crate::diffusion::{self, NoiseSchedule, NoisedBatch, ScheduleConfig};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tape::{NodeId, ParamStore, Tape};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Maximum optimizer steps.
    pub steps: usize,
    pub seed: u64,
    pub context: usize,
    pub horizon: usize,
    /// Trains the unconditional baseline: the latent context is replaced by
    /// a learned constant and the encoder stays out of the graph.
    pub unconditional: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Validation cadence in optimizer steps; 0 disables validation and
    /// early stopping.
    pub eval_interval: usize,
    /// Early stop after this many validation evaluations without
    /// improvement.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch: 64,
            steps: 1000,
            seed: 0,
            context: 120,
            horizon: 10,
            unconditional: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            eval_interval: 100,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 || self.context < 1 || self.horizon < 1 {
            return Err(Error::Config(
                "batch, context and horizon must all be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Architecture + schedule bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub schedule: ScheduleConfig,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.denoiser.validate()?;
        if self.encoder.latent_dim != self.denoiser.d_model {
            return Err(Error::Config(format!(
                "encoder latent_dim {} must equal denoiser d_model {}",
                self.encoder.latent_dim, self.denoiser.d_model
            )));
        }
        self.schedule.build()?;
        Ok(())
    }
}

/// Initializes encoder, denoiser, and the unconditional-baseline latent.
pub fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    encoder::init_encoder_params(&cfg.encoder, &mut store, rng)?;
    denoiser::init_denoiser_params(&cfg.denoiser, &mut store, rng)?;
    let mut latent = Tensor::randn(vec![cfg.denoiser.d_model], rng);
    latent.data_mut().iter_mut().for_each(|v| *v *= 0.01);
    store.insert("uncond.latent", latent)?;
    Ok(store)
}

/// Builds the conditioning node for a batch: the encoded context in
/// conditional mode, the learned constant tiled over the batch otherwise.
fn conditioning_node(
    tape: &mut Tape<f32>,
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    unconditional: bool,
    x: &Tensor<f32>,
) -> Result<NodeId> {
    let batch = x.shape()[0];
    if unconditional {
        let latent = tape.param(params, "uncond.latent")?;
        tape.repeat_rows(latent, batch)
    } else {
        let leaf = tape.leaf(x.clone())?;
        encoder::encode_context(tape, params, leaf, &cfg.encoder)
    }
}

fn batch_loss_graph(
    tape: &mut Tape<f32>,
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    unconditional: bool,
    x: &Tensor<f32>,
    noised: &NoisedBatch<f32>,
) -> Result<NodeId> {
    let e = conditioning_node(tape, params, cfg, unconditional, x)?;
    diffusion::training_loss(tape, params, noised, e, &cfg.denoiser)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
    /// Bound parameters that received an all-zero gradient on the first
    /// batch. Expected to be empty; reported for visibility.
    pub dead_params: Vec<String>,
    pub stopped_early: bool,
    pub best_val_loss: Option<f64>,
}

fn validation_loss(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    sched: &NoiseSchedule,
    val_ws: &WindowSet,
) -> Result<f64> {
    // Fixed windows and a freshly reseeded rng each call: every evaluation
    // scores the same (s, eps) draws, so values are comparable across the
    // run.
    let take = val_ws.len().min(64);
    let stride = (val_ws.len() / take).max(1);
    let indices: Vec<usize> = (0..take).map(|i| i * stride).collect();
    let (x, y) = val_ws.batch(&indices)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let noised = NoisedBatch::draw(y, sched, &mut rng)?;
    let mut tape = Tape::new();
    let loss = batch_loss_graph(&mut tape, params, cfg, train_cfg.unconditional, &x, &noised)?;
    Ok(tape.value(loss).data()[0] as f64)
}

/// Trains encoder and denoiser jointly on random windows drawn with
/// replacement, minimizing the simplified noise-prediction loss.
///
/// `train_ws` must come from a standardized frame (its stats are frozen into
/// the checkpoint). When `val_ws` is non-empty and `eval_interval > 0`,
/// validation loss drives early stopping and the best-validation parameters
/// are kept.
pub fn train(
    train_ws: &WindowSet,
    val_ws: Option<&WindowSet>,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data_cfg: &DataConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    train_cfg.validate()?;
    if train_ws.context != train_cfg.context || train_ws.horizon != train_cfg.horizon {
        return Err(Error::Config(format!(
            "window set is ({}, {}) but the train config says ({}, {})",
            train_ws.context, train_ws.horizon, train_cfg.context, train_cfg.horizon
        )));
    }
    let stats = train_ws.frame.stats.clone().ok_or_else(|| {
        Error::Config("training windows must come from a standardized frame".into())
    })?;
    let sched = cfg.schedule.build()?;

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut params = init_params(cfg, &mut rng)?;
    let mut adam: Adam<f32> = Adam::new(
        train_cfg.lr,
        train_cfg.beta1,
        train_cfg.beta2,
        train_cfg.adam_eps,
    );

    let mut log = Vec::with_capacity(train_cfg.steps);
    let mut dead_params = Vec::new();
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut bad_evals = 0usize;
    let mut stopped_early = false;
    let mut last_grad_norm = 0.0f64;

    for step in 0..train_cfg.steps {
        let indices: Vec<usize> = (0..train_cfg.batch)
            .map(|_| rng.random_range(0..train_ws.len()))
            .collect();
        let (x, y) = train_ws.batch(&indices)?;
        let noised = NoisedBatch::draw(y, &sched, &mut rng)?;

        let mut tape = Tape::new();
        let loss = batch_loss_graph(&mut tape, &params, cfg, train_cfg.unconditional, &x, &noised)
            .map_err(|e| Error::Forecast(format!("step {step}: {e}")))?;
        let loss_val = tape.value(loss).data()[0] as f64;
        if !loss_val.is_finite() {
            return Err(Error::Forecast(format!(
                "aborting: non-finite loss at step {step} (loss={loss_val}, last grad norm={last_grad_norm:.4})"
            )));
        }

        params.zero_grads();
        tape.backward(loss, &mut params)?;
        if step == 0 {
            for name in tape.bound_params() {
                let live = params
                    .get(&name)
                    .and_then(|t| t.grad.as_ref())
                    .map(|g| g.iter().any(|&v| v != 0.0))
                    .unwrap_or(false);
                if !live {
                    dead_params.push(name);
                }
            }
        }
        last_grad_norm = params.clip_grad_norm(train_cfg.clip_norm);
        adam.step(&mut params);
        log.push(TrainLogRow {
            step,
            loss: loss_val,
        });

        if let Some(val) = val_ws {
            if train_cfg.eval_interval > 0
                && !val.is_empty()
                && (step + 1) % train_cfg.eval_interval == 0
            {
                let vloss = validation_loss(&params, cfg, train_cfg, &sched, val)?;
                let improved = best.as_ref().map(|(b, _)| vloss < *b).unwrap_or(true);
                if improved {
                    best = Some((vloss, params.clone()));
                    bad_evals = 0;
                } else {
                    bad_evals += 1;
                    if bad_evals >= train_cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }

    let best_val_loss = best.as_ref().map(|(v, _)| *v);
    if let Some((_, snapshot)) = best {
        params = snapshot;
    }

    let rng_state = RngState {
        seed: train_cfg.seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    };
    let stat_entries: Vec<StatEntry> = train_ws
        .frame
        .names
        .iter()
        .zip(&stats)
        .map(|(name, s)| StatEntry {
            name: name.clone(),
            mean: s.mean,
            std: s.std,
        })
        .collect();
    let checkpoint = Checkpoint::from_store(
        &params,
        cfg.schedule.clone(),
        cfg.encoder.clone(),
        cfg.denoiser.clone(),
        train_cfg.clone(),
        data_cfg.clone(),
        stat_entries,
        rng_state,
    );
    Ok(TrainOutcome {
        checkpoint,
        log,
        dead_params,
        stopped_early,
        best_val_loss,
    })
}

/// A trained model ready for sampling.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    pub encoder_cfg: EncoderConfig,
    pub denoiser_cfg: DenoiserConfig,
    pub unconditional: bool,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Model {
            params: ckpt.to_store()?,
            schedule: ckpt.schedule.build()?,
            encoder_cfg: ckpt.encoder.clone(),
            denoiser_cfg: ckpt.denoiser.clone(),
            unconditional: ckpt.train.unconditional,
        })
    }

    pub fn horizon(&self) -> usize {
        self.denoiser_cfg.horizon
    }

    /// The latent conditioning vector for a standardized `[m, c]` context.
    pub fn latent_for(&self, x_ctx: &Tensor<f32>) -> Result<Vec<f32>> {
        if self.unconditional {
            Ok(self
                .params
                .get("uncond.latent")
                .ok_or_else(|| Error::Forecast("missing uncond.latent".into()))?
                .data()
                .to_vec())
        } else {
            Ok(encoder::encode_context_latent(&self.params, x_ctx, &self.encoder_cfg)?
                .e
                .data()
                .to_vec())
        }
    }
}

/// Independent per-path RNG stream derived from the master seed and the path
/// index, so ensembles are reproducible and order-independent.
pub fn path_rng(master_seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path);
    rng
}

fn randn_rows<R: Rng>(rows: usize, row_len: usize, rngs: &mut [R]) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * row_len);
    for rng in rngs.iter_mut().take(rows) {
        for _ in 0..row_len {
            out.push(<f32 as Real>::standard_normal(rng));
        }
    }
    out
}

/// Runs the full reverse chain for a batch of paths. `e_rows: [K, d]` is the
/// per-path conditioning; `rngs[i]` drives path `i`'s noise. Returns
/// standardized samples `[K, n, p]`.
fn reverse_chain<R: Rng>(model: &Model, e_rows: &Tensor<f32>, rngs: &mut [R]) -> Result<Tensor<f32>> {
    let k = e_rows.shape()[0];
    let n = model.denoiser_cfg.n_vars;
    let p = model.denoiser_cfg.horizon;
    let d = model.denoiser_cfg.d_model;
    let item = n * p;
    let mut x = Tensor::from_vec(randn_rows(k, item, rngs), vec![k, n, p])?;
    for s in (1..=model.schedule.steps()).rev() {
        let emb = denoiser::embed_step::<f32>(s, d)?;
        let mut embs = Vec::with_capacity(k * d);
        for _ in 0..k {
            embs.extend_from_slice(emb.vec.data());
        }
        let mut tape = Tape::new();
        let xs = tape.leaf(x.clone())?;
        let e = tape.leaf(e_rows.clone())?;
        let emb_node = tape.leaf(Tensor::from_vec(embs, vec![k, d])?)?;
        let eps_hat = denoiser::predict_noise(
            &mut tape,
            &model.params,
            xs,
            emb_node,
            e,
            &model.denoiser_cfg,
        )
        .map_err(|err| Error::Forecast(format!("at reverse step {s}: {err}")))?;
        let eps_hat = tape.value(eps_hat).clone();
        let z = if s > 1 {
            Tensor::from_vec(randn_rows(k, item, rngs), vec![k, n, p])?
        } else {
            Tensor::zeros(vec![k, n, p])
        };
        x = diffusion::reverse_step(&x, s, &eps_hat, &model.schedule, &z)
            .map_err(|err| Error::Forecast(format!("at reverse step {s}: {err}")))?;
    }
    Ok(x)
}

/// Draws one future trajectory for a standardized `[m, c]` context: start
/// from pure noise and denoise step by step; the final step adds no noise.
/// Returns a standardized `[n, p]` tensor.
pub fn sample_once<R: Rng>(x_ctx: &Tensor<f32>, model: &Model, rng: &mut R) -> Result<Tensor<f32>> {
    let latent = model.latent_for(x_ctx)?;
    let d = model.denoiser_cfg.d_model;
    let e_rows = Tensor::from_vec(latent, vec![1, d])?;
    let out = reverse_chain(model, &e_rows, std::slice::from_mut(rng))?;
    Tensor::from_vec(
        out.data().to_vec(),
        vec![model.denoiser_cfg.n_vars, model.denoiser_cfg.horizon],
    )
}

/// `K` sampled future trajectories approximating the predictive
/// distribution, de-standardized to original units.
#[derive(Debug, Clone)]
pub struct ForecastEnsemble {
    /// `[K, n, p]` in original units.
    pub samples: Tensor<f32>,
    /// Time index of the last context step.
    pub origin: usize,
    pub variable_names: Vec<String>,
}

impl ForecastEnsemble {
    pub fn k(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn n_vars(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.samples.shape()[2]
    }

    /// Sample values for one variable at one step (0-based) across all
    /// paths.
    pub fn values_at(&self, var: usize, step: usize) -> Vec<f64> {
        let (n, p) = (self.n_vars(), self.horizon());
        (0..self.k())
            .map(|k| self.samples.data()[(k * n + var) * p + step] as f64)
            .collect()
    }
}

/// Samples `K` independent paths for one context window. Path `i` draws all
/// of its noise from `path_rng(master_seed, i)`, so individual paths do not
/// change when `K` grows.
pub fn forecast_ensemble(
    x_ctx: &Tensor<f32>,
    model: &Model,
    k: usize,
    master_seed: u64,
    origin: usize,
    variable_names: Vec<String>,
    target_stats: &[Stats],
) -> Result<ForecastEnsemble> {
    if k < 1 {
        return Err(Error::Forecast("sample count must be >= 1".into()));
    }
    let latent = model.latent_for(x_ctx)?;
    let d = model.denoiser_cfg.d_model;
    let mut e_rows = Vec::with_capacity(k * d);
    for _ in 0..k {
        e_rows.extend_from_slice(&latent);
    }
    let e_rows = Tensor::from_vec(e_rows, vec![k, d])?;
    let mut rngs: Vec<ChaCha8Rng> = (0..k).map(|i| path_rng(master_seed, i as u64)).collect();
    let mut samples = reverse_chain(model, &e_rows, &mut rngs)?;
    destandardize_tensor(&mut samples, target_stats)?;
    Ok(ForecastEnsemble {
        samples,
        origin,
        variable_names,
    })
}

/// Rolls each ensemble member independently to an arbitrary horizon: sample
/// `p` steps, append them to that member's own context, slide the window,
/// and repeat until `total_horizon` steps exist.
///
/// Conditioning variables that are not targets cannot be rolled forward, so
/// `n < m` requires `total_horizon <= p`.
#[allow(clippy::too_many_arguments)]
pub fn iterative_forecast(
    x_ctx: &Tensor<f32>,
    model: &Model,
    total_horizon: usize,
    k: usize,
    master_seed: u64,
    origin: usize,
    variable_names: Vec<String>,
    target_stats: &[Stats],
    target_indices: &[usize],
) -> Result<ForecastEnsemble> {
    let m = model.encoder_cfg.in_vars;
    let n = model.denoiser_cfg.n_vars;
    let p = model.denoiser_cfg.horizon;
    if total_horizon < 1 || k < 1 {
        return Err(Error::Forecast("horizon and sample count must be >= 1".into()));
    }
    if n < m && total_horizon > p {
        return Err(Error::Forecast(
            "cannot roll forward unobserved covariates: model predicts fewer variables than it conditions on".into(),
        ));
    }
    let c = x_ctx.shape()[1];
    let rounds = total_horizon.div_ceil(p);
    // Frame variable v is generated as target row var_map[v].
    let var_map: Vec<usize> = if rounds > 1 {
        (0..m)
            .map(|v| {
                target_indices.iter().position(|&tv| tv == v).ok_or_else(|| {
                    Error::Forecast(format!("context variable {v} is not a forecast target"))
                })
            })
            .collect::<Result<Vec<usize>>>()?
    } else {
        Vec::new()
    };

    let mut rngs: Vec<ChaCha8Rng> = (0..k).map(|i| path_rng(master_seed, i as u64)).collect();
    let mut contexts: Vec<Vec<f32>> = vec![x_ctx.data().to_vec(); k];
    let d = model.denoiser_cfg.d_model;
    let mut collected = vec![0.0f32; k * n * rounds * p];

    for round in 0..rounds {
        let e_rows = if model.unconditional {
            let latent = model
                .params
                .get("uncond.latent")
                .ok_or_else(|| Error::Forecast("missing uncond.latent".into()))?
                .data()
                .to_vec();
            let mut rows = Vec::with_capacity(k * d);
            for _ in 0..k {
                rows.extend_from_slice(&latent);
            }
            Tensor::from_vec(rows, vec![k, d])?
        } else {
            let mut ctx_batch = Vec::with_capacity(k * m * c);
            for ctx in &contexts {
                ctx_batch.extend_from_slice(ctx);
            }
            let mut tape = Tape::new();
            let leaf = tape.leaf(Tensor::from_vec(ctx_batch, vec![k, m, c])?)?;
            let e = encoder::encode_context(&mut tape, &model.params, leaf, &model.encoder_cfg)?;
            tape.value(e).clone()
        };
        let block = reverse_chain(model, &e_rows, &mut rngs)?; // [k, n, p] standardized
        for path in 0..k {
            for v in 0..n {
                let src = &block.data()[(path * n + v) * p..(path * n + v + 1) * p];
                let dst_start = (path * n + v) * rounds * p + round * p;
                collected[dst_start..dst_start + p].copy_from_slice(src);
            }
        }
        if round + 1 < rounds {
            for (path, ctx) in contexts.iter_mut().enumerate() {
                for v in 0..m {
                    let row = &mut ctx[v * c..(v + 1) * c];
                    row.copy_within(p.min(c).., 0);
                    let gen_row =
                        &block.data()[(path * n + var_map[v]) * p..(path * n + var_map[v] + 1) * p];
                    let keep = c.saturating_sub(p);
                    row[keep..].copy_from_slice(&gen_row[p - (c - keep)..]);
                }
            }
        }
    }

    let mut out = vec![0.0f32; k * n * total_horizon];
    for path in 0..k {
        for v in 0..n {
            let src_start = (path * n + v) * rounds * p;
            let dst_start = (path * n + v) * total_horizon;
            out[dst_start..dst_start + total_horizon]
                .copy_from_slice(&collected[src_start..src_start + total_horizon]);
        }
    }
    let mut samples = Tensor::from_vec(out, vec![k, n, total_horizon])?;
    destandardize_tensor(&mut samples, target_stats)?;
    Ok(ForecastEnsemble {
        samples,
        origin,
        variable_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, synth_generate, SynthKind};

    fn tiny_model_cfg(in_vars: usize, n_vars: usize, horizon: usize) -> ModelConfig {
        ModelConfig {
            schedule: ScheduleConfig {
                steps: 8,
                beta_min: 1e-4,
                beta_max: 0.3,
            },
            encoder: EncoderConfig {
                in_vars,
                channels: 8,
                layers: 2,
                kernel: 3,
                dilation_base: 2,
                latent_dim: 16,
            },
            denoiser: DenoiserConfig {
                n_vars,
                horizon,
                d_model: 16,
                heads: 2,
                res_blocks: 2,
                ff_dim: 24,
            },
        }
    }

    fn tiny_train_cfg(steps: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch: 8,
            steps,
            seed,
            context: 20,
            horizon: 5,
            eval_interval: 0,
            ..TrainConfig::default()
        }
    }

    fn tiny_windows(kind: SynthKind, t: usize, seed: u64) -> crate::data::WindowSet {
        let frame = synth_generate(kind, t, seed).unwrap();
        let stats = frame.fit_stats();
        let standardized = frame.standardized(&stats).unwrap();
        make_windows(&standardized, 20, 5, 1).unwrap()
    }

    #[test]
    fn training_is_bit_deterministic_in_the_seed() {
        let ws = tiny_windows(SynthKind::RandomWalk, 300, 1);
        let cfg = tiny_model_cfg(1, 1, 5);
        let tc = tiny_train_cfg(10, 7);
        let a = train(&ws, None, &cfg, &tc, &DataConfig::default()).unwrap();
        let b = train(&ws, None, &cfg, &tc, &DataConfig::default()).unwrap();
        assert_eq!(a.log.len(), b.log.len());
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits(), "step {}", ra.step);
        }
        for ((n1, s1, d1), (n2, s2, d2)) in a.checkpoint.params.iter().zip(&b.checkpoint.params) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            assert_eq!(d1, d2, "parameter {n1} differs");
        }
        assert!(a.dead_params.is_empty(), "dead: {:?}", a.dead_params);
    }

    #[test]
    fn unconditional_mode_keeps_the_encoder_out_of_the_graph() {
        let ws = tiny_windows(SynthKind::RandomWalk, 200, 2);
        let cfg = tiny_model_cfg(1, 1, 5);
        let sched = cfg.schedule.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = init_params(&cfg, &mut rng).unwrap();
        let (x, y) = ws.batch(&[0, 1, 2, 3]).unwrap();
        let noised = NoisedBatch::draw(y, &sched, &mut rng).unwrap();
        let mut tape = Tape::new();
        let loss = batch_loss_graph(&mut tape, &params, &cfg, true, &x, &noised).unwrap();
        params.zero_grads();
        tape.backward(loss, &mut params).unwrap();
        for (name, tensor) in params.iter() {
            let grad = tensor.grad.as_ref().unwrap();
            if name.starts_with("encoder.") {
                assert!(grad.iter().all(|&g| g == 0.0), "{name} got gradient");
            }
        }
        // the learned constant does receive gradient
        let uncond = params.get("uncond.latent").unwrap().grad.as_ref().unwrap();
        assert!(uncond.iter().any(|&g| g != 0.0));
        // and no encoder parameter was ever bound
        assert!(tape.bound_params().iter().all(|n| !n.starts_with("encoder.")));
    }

    #[test]
    fn exploding_loss_aborts_with_step_diagnostics() {
        let ws = tiny_windows(SynthKind::RandomWalk, 200, 3);
        let cfg = tiny_model_cfg(1, 1, 5);
        let mut tc = tiny_train_cfg(50, 1);
        tc.lr = 1e14;
        tc.clip_norm = 1e30;
        let err = train(&ws, None, &cfg, &tc, &DataConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("step"), "{err}");
    }

    fn trained_tiny_model(kind: SynthKind, seed: u64) -> (Model, crate::data::WindowSet) {
        let ws = tiny_windows(kind, 300, seed);
        let cfg = tiny_model_cfg(1, 1, 5);
        let tc = tiny_train_cfg(30, seed);
        let outcome = train(&ws, None, &cfg, &tc, &DataConfig::default()).unwrap();
        (Model::from_checkpoint(&outcome.checkpoint).unwrap(), ws)
    }

    #[test]
    fn sampling_is_deterministic_per_rng_state() {
        let (model, ws) = trained_tiny_model(SynthKind::RandomWalk, 4);
        let (x, _) = ws.window(0).unwrap();
        let mut r1 = path_rng(99, 0);
        let mut r2 = path_rng(99, 0);
        let a = sample_once(&x, &model, &mut r1).unwrap();
        let b = sample_once(&x, &model, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
        let mut r3 = path_rng(99, 1);
        let c = sample_once(&x, &model, &mut r3).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn single_step_schedule_is_one_deterministic_reverse_step() {
        let ws = tiny_windows(SynthKind::RandomWalk, 200, 5);
        let mut cfg = tiny_model_cfg(1, 1, 5);
        cfg.schedule = ScheduleConfig {
            steps: 1,
            beta_min: 0.2,
            beta_max: 0.2,
        };
        let tc = tiny_train_cfg(5, 5);
        let outcome = train(&ws, None, &cfg, &tc, &DataConfig::default()).unwrap();
        let model = Model::from_checkpoint(&outcome.checkpoint).unwrap();
        let (x, _) = ws.window(0).unwrap();

        // replicate by hand with the same rng: x_S, one mean-only step
        let mut rng = path_rng(7, 0);
        let expected = {
            let x_s = Tensor::<f32>::randn(vec![1, 1, 5], &mut rng);
            let latent = model.latent_for(&x).unwrap();
            let e = Tensor::from_vec(latent, vec![1, model.denoiser_cfg.d_model]).unwrap();
            let emb = crate::denoiser::embed_step::<f32>(1, model.denoiser_cfg.d_model).unwrap();
            let mut tape = Tape::new();
            let xi = tape.leaf(x_s.clone()).unwrap();
            let ei = tape.leaf(e).unwrap();
            let si = tape
                .leaf(Tensor::from_vec(emb.vec.data().to_vec(), vec![1, 16]).unwrap())
                .unwrap();
            let eps_hat =
                crate::denoiser::predict_noise(&mut tape, &model.params, xi, si, ei, &model.denoiser_cfg)
                    .unwrap();
            let eps_hat = tape.value(eps_hat).clone();
            crate::diffusion::reverse_step(
                &x_s,
                1,
                &eps_hat,
                &model.schedule,
                &Tensor::zeros(vec![1, 1, 5]),
            )
            .unwrap()
        };
        let mut rng2 = path_rng(7, 0);
        let got = sample_once(&x, &model, &mut rng2).unwrap();
        assert_eq!(got.data(), expected.data());
    }

    #[test]
    fn paths_are_seed_indexed_so_growing_k_changes_nothing() {
        let (model, ws) = trained_tiny_model(SynthKind::RandomWalk, 6);
        let (x, _) = ws.window(2).unwrap();
        let stats = ws.frame.stats.clone().unwrap();
        let target_stats: Vec<crate::data::Stats> =
            ws.frame.targets.iter().map(|&v| stats[v]).collect();
        let small = forecast_ensemble(&x, &model, 3, 42, 0, vec!["v".into()], &target_stats).unwrap();
        let large = forecast_ensemble(&x, &model, 6, 42, 0, vec!["v".into()], &target_stats).unwrap();
        let per_path = small.n_vars() * small.horizon();
        for path in 0..3 {
            assert_eq!(
                &small.samples.data()[path * per_path..(path + 1) * per_path],
                &large.samples.data()[path * per_path..(path + 1) * per_path],
                "path {path} changed when K grew"
            );
        }
    }

    #[test]
    fn ensemble_paths_match_individual_sampling() {
        let (model, ws) = trained_tiny_model(SynthKind::RandomWalk, 7);
        let (x, _) = ws.window(1).unwrap();
        let stats = ws.frame.stats.clone().unwrap();
        let target_stats: Vec<crate::data::Stats> =
            ws.frame.targets.iter().map(|&v| stats[v]).collect();
        let ens = forecast_ensemble(&x, &model, 4, 11, 0, vec!["v".into()], &target_stats).unwrap();
        for path in 0..4 {
            let mut rng = path_rng(11, path as u64);
            let mut single = sample_once(&x, &model, &mut rng).unwrap();
            crate::data::destandardize_tensor(&mut single, &target_stats).unwrap();
            let per_path = ens.n_vars() * ens.horizon();
            assert_eq!(
                single.data(),
                &ens.samples.data()[path * per_path..(path + 1) * per_path],
                "path {path} diverges from sample_once"
            );
        }
    }

    #[test]
    fn short_rollout_equals_truncated_ensemble() {
        let (model, ws) = trained_tiny_model(SynthKind::RandomWalk, 8);
        let (x, _) = ws.window(0).unwrap();
        let stats = ws.frame.stats.clone().unwrap();
        let target_stats: Vec<crate::data::Stats> =
            ws.frame.targets.iter().map(|&v| stats[v]).collect();
        let full = forecast_ensemble(&x, &model, 3, 13, 0, vec!["v".into()], &target_stats).unwrap();
        let rolled = iterative_forecast(
            &x,
            &model,
            3,
            3,
            13,
            0,
            vec!["v".into()],
            &target_stats,
            &ws.frame.targets,
        )
        .unwrap();
        assert_eq!(rolled.horizon(), 3);
        let p = full.horizon();
        for path in 0..3 {
            for step in 0..3 {
                assert_eq!(
                    rolled.samples.data()[path * 3 + step],
                    full.samples.data()[path * p + step],
                );
            }
        }
    }

    #[test]
    fn double_horizon_runs_exactly_two_rounds() {
        let (model, ws) = trained_tiny_model(SynthKind::RandomWalk, 9);
        let (x, _) = ws.window(0).unwrap();
        let stats = ws.frame.stats.clone().unwrap();
        let target_stats: Vec<crate::data::Stats> =
            ws.frame.targets.iter().map(|&v| stats[v]).collect();
        let p = model.denoiser_cfg.horizon;
        let rolled = iterative_forecast(
            &x,
            &model,
            2 * p,
            2,
            21,
            0,
            vec!["v".into()],
            &target_stats,
            &ws.frame.targets,
        )
        .unwrap();
        assert_eq!(rolled.horizon(), 2 * p);
        // round 1 must agree with the plain ensemble (same noise streams)
        let full = forecast_ensemble(&x, &model, 2, 21, 0, vec!["v".into()], &target_stats).unwrap();
        for path in 0..2 {
            for step in 0..p {
                assert_eq!(
                    rolled.samples.data()[path * 2 * p + step],
                    full.samples.data()[path * p + step],
                );
            }
        }
    }

    #[test]
    fn rolling_covariates_without_predictions_is_rejected() {
        let frame = synth_generate(SynthKind::RegimeSwitchBimodal, 300, 10).unwrap();
        let stats = frame.fit_stats();
        let standardized = frame.standardized(&stats).unwrap();
        let ws = make_windows(&standardized, 20, 5, 1).unwrap();
        let cfg = tiny_model_cfg(2, 1, 5); // m=2, n=1
        let tc = tiny_train_cfg(5, 11);
        let outcome = train(&ws, None, &cfg, &tc, &DataConfig::default()).unwrap();
        let model = Model::from_checkpoint(&outcome.checkpoint).unwrap();
        let (x, _) = ws.window(0).unwrap();
        let target_stats: Vec<crate::data::Stats> =
            ws.frame.targets.iter().map(|&v| stats[v]).collect();
        let err = iterative_forecast(
            &x,
            &model,
            10,
            2,
            1,
            0,
            vec!["v".into()],
            &target_stats,
            &ws.frame.targets,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("covariates"), "{err}");
        // P <= p works fine
        assert!(iterative_forecast(
            &x,
            &model,
            5,
            2,
            1,
            0,
            vec!["v".into()],
            &target_stats,
            &ws.frame.targets,
        )
        .is_ok());
    }

    #[test]
    fn early_stopping_restores_the_best_parameters() {
        let ws = tiny_windows(SynthKind::Ar2Seasonal, 400, 12);
        let val = tiny_windows(SynthKind::Ar2Seasonal, 200, 13);
        let cfg = tiny_model_cfg(1, 1, 5);
        let mut tc = tiny_train_cfg(40, 12);
        tc.eval_interval = 5;
        tc.patience = 2;
        let outcome = train(&ws, Some(&val), &cfg, &tc, &DataConfig::default()).unwrap();
        assert!(outcome.best_val_loss.is_some());
    }
}
