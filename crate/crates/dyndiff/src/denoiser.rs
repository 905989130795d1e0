//! The noise-prediction network.
//!
//! `predict_noise(x_s, s, e)` runs a per-timestep input projection, injects
//! the step embedding and the latent context, applies one transformer
//! encoder block over the prediction window, then a stack of residual
//! convolution blocks whose skip outputs are summed and projected back to the
//! variable dimension.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, ParamStore, Tape};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Number of target variables `n`.
    pub n_vars: usize,
    /// Prediction window length `p`.
    pub horizon: usize,
    pub d_model: usize,
    pub heads: usize,
    pub res_blocks: usize,
    pub ff_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            n_vars: 1,
            horizon: 10,
            d_model: 128,
            heads: 4,
            res_blocks: 2,
            ff_dim: 256,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_vars < 1 || self.horizon < 1 || self.res_blocks < 1 || self.ff_dim < 1 {
            return Err(Error::Config(format!("invalid denoiser config {self:?}")));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even".into()));
        }
        Ok(())
    }
}

/// Sinusoidal encoding of a diffusion step index.
#[derive(Debug, Clone)]
pub struct StepEmbedding<T: Real> {
    pub s: usize,
    pub vec: Tensor<T>,
}

/// `vec[2i] = sin(s / 10000^(2i/d))`, `vec[2i+1] = cos(s / 10000^(2i/d))`.
pub fn embed_step<T: Real>(s: usize, d_model: usize) -> Result<StepEmbedding<T>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "step embedding needs an even d_model, got {d_model}"
        )));
    }
    let mut vec = vec![T::ZERO; d_model];
    for i in 0..d_model / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / d_model as f64);
        let angle = s as f64 / freq;
        vec[2 * i] = T::from_f64(angle.sin());
        vec[2 * i + 1] = T::from_f64(angle.cos());
    }
    Ok(StepEmbedding {
        s,
        vec: Tensor::from_vec(vec, vec![d_model])?,
    })
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn init_tensor<T: Real, R: rand::Rng + ?Sized>(shape: Vec<usize>, std: f64, rng: &mut R) -> Tensor<T> {
    let mut t = Tensor::randn(shape, rng);
    let c = T::from_f64(std);
    t.data_mut().iter_mut().for_each(|v| *v *= c);
    t
}

fn insert_inject<T: Real, R: rand::Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(&format!("{prefix}.we"), init_tensor(vec![d, d], he_std(d), rng))?;
    store.insert(&format!("{prefix}.ws"), init_tensor(vec![d, d], he_std(d), rng))?;
    Ok(())
}

/// Registers all denoiser parameters under the `denoiser.` prefix.
///
/// The final output projection is initialized at a near-zero scale: early
/// noise predictions start close to zero while every upstream parameter
/// still receives gradient from the first batch.
pub fn init_denoiser_params<T: Real, R: rand::Rng + ?Sized>(
    cfg: &DenoiserConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    store.insert(
        "denoiser.in_proj.weight",
        init_tensor(vec![cfg.n_vars, d], he_std(cfg.n_vars), rng),
    )?;
    store.insert("denoiser.in_proj.bias", Tensor::zeros(vec![d]))?;
    store.insert(
        "denoiser.pos",
        init_tensor(vec![cfg.horizon, d], 0.02, rng),
    )?;
    insert_inject(store, "denoiser.inject0", d, rng)?;
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(
            &format!("denoiser.attn.{name}.weight"),
            init_tensor(vec![d, d], he_std(d), rng),
        )?;
        store.insert(&format!("denoiser.attn.{name}.bias"), Tensor::zeros(vec![d]))?;
    }
    store.insert("denoiser.ln1.gamma", Tensor::full(vec![d], T::ONE))?;
    store.insert("denoiser.ln1.beta", Tensor::zeros(vec![d]))?;
    store.insert(
        "denoiser.ff.w1",
        init_tensor(vec![d, cfg.ff_dim], he_std(d), rng),
    )?;
    store.insert("denoiser.ff.b1", Tensor::zeros(vec![cfg.ff_dim]))?;
    store.insert(
        "denoiser.ff.w2",
        init_tensor(vec![cfg.ff_dim, d], he_std(cfg.ff_dim), rng),
    )?;
    store.insert("denoiser.ff.b2", Tensor::zeros(vec![d]))?;
    store.insert("denoiser.ln2.gamma", Tensor::full(vec![d], T::ONE))?;
    store.insert("denoiser.ln2.beta", Tensor::zeros(vec![d]))?;
    for i in 0..cfg.res_blocks {
        let p = format!("denoiser.res{i}");
        insert_inject(store, &format!("{p}.inject"), d, rng)?;
        store.insert(
            &format!("{p}.conv.weight"),
            init_tensor(vec![d, d, 3], he_std(d * 3), rng),
        )?;
        store.insert(&format!("{p}.conv.bias"), Tensor::zeros(vec![d]))?;
        // The last block feeds only the skip sum; its residual output would
        // be discarded, so it has no residual projection.
        if i + 1 < cfg.res_blocks {
            store.insert(
                &format!("{p}.res_proj.weight"),
                init_tensor(vec![d, d, 1], he_std(d), rng),
            )?;
            store.insert(&format!("{p}.res_proj.bias"), Tensor::zeros(vec![d]))?;
        }
        store.insert(
            &format!("{p}.skip_proj.weight"),
            init_tensor(vec![d, d, 1], he_std(d), rng),
        )?;
        store.insert(&format!("{p}.skip_proj.bias"), Tensor::zeros(vec![d]))?;
    }
    store.insert(
        "denoiser.out_proj.weight",
        init_tensor(vec![d, cfg.n_vars], 1e-3 * (1.0 / d as f64).sqrt(), rng),
    )?;
    store.insert("denoiser.out_proj.bias", Tensor::zeros(vec![cfg.n_vars]))?;
    Ok(())
}

/// Adds the projected conditioning to every time position:
/// `h + W_e e + W_s emb`, both broadcast over the window.
///
/// `h: [B, p, d]`, `e: [B, d]`, `emb: [B, d]`.
pub fn condition_inject<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: NodeId,
    e: NodeId,
    emb: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let we = tape.param(store, &format!("{prefix}.we"))?;
    let pe = tape.matmul(e, we)?;
    let h = tape.broadcast_add_time(h, pe)?;
    let ws = tape.param(store, &format!("{prefix}.ws"))?;
    let ps = tape.matmul(emb, ws)?;
    tape.broadcast_add_time(h, ps)
}

fn linear_named<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.linear(x, w, b)
}

/// Full noise-prediction pipeline. `xs: [B, n, p]`, `s_embs: [B, d]` (one
/// step embedding per batch item), `e: [B, d]`. Output shape equals the
/// input shape.
pub fn predict_noise<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    xs: NodeId,
    s_embs: NodeId,
    e: NodeId,
    cfg: &DenoiserConfig,
) -> Result<NodeId> {
    let d = cfg.d_model;
    let se = tape.value(e).shape().to_vec();
    if se.len() != 2 || se[1] != d {
        return Err(Error::ShapeMismatch {
            op: "predict_noise: conditioning vs d_model",
            lhs: se,
            rhs: vec![d],
        });
    }
    let sx = tape.value(xs).shape().to_vec();
    if sx.len() != 3 || sx[1] != cfg.n_vars {
        return Err(Error::ShapeMismatch {
            op: "predict_noise",
            lhs: sx,
            rhs: vec![cfg.n_vars],
        });
    }

    // (1) per-timestep input projection n -> d over the window positions
    let xt = tape.transpose_12(xs)?; // [B, p, n]
    let mut h = linear_named(tape, store, xt, "denoiser.in_proj")?; // [B, p, d]
    let pos = tape.param(store, "denoiser.pos")?;
    h = tape.broadcast_add_rows(h, pos)?;

    // (2) conditioning injection
    h = condition_inject(tape, store, h, e, s_embs, "denoiser.inject0")?;

    // (3) transformer encoder block: self-attention + position-wise FF,
    // each with residual connection and layer norm
    let q = linear_named(tape, store, h, "denoiser.attn.wq")?;
    let k = linear_named(tape, store, h, "denoiser.attn.wk")?;
    let v = linear_named(tape, store, h, "denoiser.attn.wv")?;
    let att = tape.attention(q, k, v, cfg.heads)?;
    let att = linear_named(tape, store, att, "denoiser.attn.wo")?;
    let res = tape.add(h, att)?;
    let g1 = tape.param(store, "denoiser.ln1.gamma")?;
    let b1 = tape.param(store, "denoiser.ln1.beta")?;
    h = tape.layer_norm(res, g1, b1)?;

    let w1 = tape.param(store, "denoiser.ff.w1")?;
    let fb1 = tape.param(store, "denoiser.ff.b1")?;
    let f1 = tape.linear(h, w1, fb1)?;
    let f1 = tape.relu(f1)?;
    let w2 = tape.param(store, "denoiser.ff.w2")?;
    let b2 = tape.param(store, "denoiser.ff.b2")?;
    let f2 = tape.linear(f1, w2, b2)?;
    let res = tape.add(h, f2)?;
    let g2 = tape.param(store, "denoiser.ln2.gamma")?;
    let b2n = tape.param(store, "denoiser.ln2.beta")?;
    h = tape.layer_norm(res, g2, b2n)?;

    // (4) residual blocks over the window, bidirectional convolutions;
    // conditioning is re-added before each block
    let mut skips: Vec<NodeId> = Vec::with_capacity(cfg.res_blocks);
    for i in 0..cfg.res_blocks {
        let p = format!("denoiser.res{i}");
        let injected = condition_inject(tape, store, h, e, s_embs, &format!("{p}.inject"))?;
        let t = tape.transpose_12(injected)?; // [B, d, p]
        let cw = tape.param(store, &format!("{p}.conv.weight"))?;
        let cb = tape.param(store, &format!("{p}.conv.bias"))?;
        let u = tape.conv1d(t, cw, cb, 1 << i, false)?;
        let a = tape.silu(u)?;
        let sw = tape.param(store, &format!("{p}.skip_proj.weight"))?;
        let sb = tape.param(store, &format!("{p}.skip_proj.bias"))?;
        let sk = tape.conv1d(a, sw, sb, 1, false)?;
        skips.push(tape.transpose_12(sk)?);
        if i + 1 < cfg.res_blocks {
            let rw = tape.param(store, &format!("{p}.res_proj.weight"))?;
            let rb = tape.param(store, &format!("{p}.res_proj.bias"))?;
            let r = tape.conv1d(a, rw, rb, 1, false)?;
            let r = tape.transpose_12(r)?;
            h = tape.add(h, r)?;
        }
    }

    // (5) sum of skips, projected d -> n
    let mut total = skips[0];
    for &sk in &skips[1..] {
        total = tape.add(total, sk)?;
    }
    let out = linear_named(tape, store, total, "denoiser.out_proj")?; // [B, p, n]
    tape.transpose_12(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_FD_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(n_vars: usize, horizon: usize) -> DenoiserConfig {
        DenoiserConfig {
            n_vars,
            horizon,
            d_model: 16,
            heads: 4,
            res_blocks: 2,
            ff_dim: 24,
        }
    }

    fn setup(cfg: &DenoiserConfig, seed: u64) -> (ParamStore<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_denoiser_params(cfg, &mut store, &mut rng).unwrap();
        (store, rng)
    }

    fn run(
        store: &ParamStore<f64>,
        cfg: &DenoiserConfig,
        xs: &Tensor<f64>,
        s: usize,
        e: &Tensor<f64>,
    ) -> Vec<f64> {
        let b = xs.shape()[0];
        let emb = embed_step::<f64>(s, cfg.d_model).unwrap();
        let mut embs = Vec::new();
        for _ in 0..b {
            embs.extend_from_slice(emb.vec.data());
        }
        let mut tape = Tape::new();
        let xi = tape.leaf(xs.clone()).unwrap();
        let ei = tape.leaf(e.clone()).unwrap();
        let si = tape
            .leaf(Tensor::from_vec(embs, vec![b, cfg.d_model]).unwrap())
            .unwrap();
        let out = predict_noise(&mut tape, store, xi, si, ei, cfg).unwrap();
        tape.value(out).data().to_vec()
    }

    #[test]
    fn step_embedding_at_zero_is_sin0_cos1() {
        let emb = embed_step::<f64>(0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(emb.vec.data()[2 * i], 0.0);
            assert_eq!(emb.vec.data()[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn step_embedding_components_stay_in_unit_range() {
        for s in [1usize, 7, 50, 1000] {
            let emb = embed_step::<f64>(s, 32).unwrap();
            assert!(emb.vec.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn step_embedding_rejects_odd_dimension() {
        assert!(embed_step::<f64>(3, 7).is_err());
        assert!(embed_step::<f64>(3, 0).is_err());
    }

    // Brute-force pairwise check over the whole working range of steps.
    #[test]
    fn step_embeddings_are_pairwise_distinct_for_paper_range() {
        let embs: Vec<Vec<f64>> = (1..=50)
            .map(|s| embed_step::<f64>(s, 128).unwrap().vec.data().to_vec())
            .collect();
        let mut min_gap = f64::INFINITY;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let gap: f64 = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                min_gap = min_gap.min(gap);
            }
        }
        assert!(min_gap > 0.0, "min pairwise gap {min_gap}");
    }

    #[test]
    fn output_shape_equals_input_shape() {
        for (n, p) in [(1usize, 10usize), (3, 10), (2, 1)] {
            let cfg = tiny_cfg(n, p);
            let (store, mut rng) = setup(&cfg, 42);
            let xs = Tensor::<f64>::randn(vec![2, n, p], &mut rng);
            let e = Tensor::<f64>::randn(vec![2, cfg.d_model], &mut rng);
            let out = run(&store, &cfg, &xs, 3, &e);
            assert_eq!(out.len(), 2 * n * p);
        }
    }

    #[test]
    fn prediction_is_bit_deterministic() {
        let cfg = tiny_cfg(2, 6);
        let (store, mut rng) = setup(&cfg, 1);
        let xs = Tensor::<f64>::randn(vec![1, 2, 6], &mut rng);
        let e = Tensor::<f64>::randn(vec![1, cfg.d_model], &mut rng);
        assert_eq!(run(&store, &cfg, &xs, 5, &e), run(&store, &cfg, &xs, 5, &e));
    }

    #[test]
    fn conditioning_dimension_mismatch_is_rejected() {
        let cfg = tiny_cfg(1, 4);
        let (store, mut rng) = setup(&cfg, 2);
        let xs = Tensor::<f64>::randn(vec![1, 1, 4], &mut rng);
        let e = Tensor::<f64>::randn(vec![1, cfg.d_model + 2], &mut rng);
        let emb = Tensor::<f64>::zeros(vec![1, cfg.d_model]);
        let mut tape = Tape::new();
        let xi = tape.leaf(xs).unwrap();
        let ei = tape.leaf(e).unwrap();
        let si = tape.leaf(emb).unwrap();
        assert!(predict_noise(&mut tape, &store, xi, si, ei, &cfg).is_err());
    }

    #[test]
    fn inject_with_zero_vectors_is_identity() {
        let cfg = tiny_cfg(1, 4);
        let (store, mut rng) = setup(&cfg, 3);
        let h = Tensor::<f64>::randn(vec![2, 4, cfg.d_model], &mut rng);
        let mut tape = Tape::new();
        let hi = tape.leaf(h.clone()).unwrap();
        let e = tape.leaf(Tensor::zeros(vec![2, cfg.d_model])).unwrap();
        let s = tape.leaf(Tensor::zeros(vec![2, cfg.d_model])).unwrap();
        let out = condition_inject(&mut tape, &store, hi, e, s, "denoiser.inject0").unwrap();
        assert_eq!(tape.value(out).data(), h.data());
    }

    // With randomly initialized W_e, two different latents give different
    // noise predictions.
    #[test]
    fn conditioning_sensitivity() {
        let cfg = tiny_cfg(2, 5);
        let (store, mut rng) = setup(&cfg, 4);
        let xs = Tensor::<f64>::randn(vec![1, 2, 5], &mut rng);
        let e1 = Tensor::<f64>::randn(vec![1, cfg.d_model], &mut rng);
        let e2 = Tensor::<f64>::randn(vec![1, cfg.d_model], &mut rng);
        let o1 = run(&store, &cfg, &xs, 2, &e1);
        let o2 = run(&store, &cfg, &xs, 2, &e2);
        let l2: f64 = o1
            .iter()
            .zip(&o2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(l2 > 0.0);
    }

    // Every parameter of the denoiser receives a nonzero gradient on a
    // random batch at initialization (no dead subgraph).
    #[test]
    fn all_parameters_are_live_at_init() {
        let cfg = tiny_cfg(2, 6);
        let (mut store, mut rng) = setup(&cfg, 5);
        let xs = Tensor::<f64>::randn(vec![4, 2, 6], &mut rng);
        let target = Tensor::<f64>::randn(vec![4, 2, 6], &mut rng);
        let e = Tensor::<f64>::randn(vec![4, cfg.d_model], &mut rng);
        let emb_vec = embed_step::<f64>(3, cfg.d_model).unwrap();
        let mut embs = Vec::new();
        for _ in 0..4 {
            embs.extend_from_slice(emb_vec.vec.data());
        }
        let mut tape = Tape::new();
        let xi = tape.leaf(xs).unwrap();
        let ei = tape.leaf(e).unwrap();
        let si = tape
            .leaf(Tensor::from_vec(embs, vec![4, cfg.d_model]).unwrap())
            .unwrap();
        let out = predict_noise(&mut tape, &store, xi, si, ei, &cfg).unwrap();
        let tgt = tape.leaf(target).unwrap();
        let err = tape.sub(out, tgt).unwrap();
        let loss = tape.mean_sq(err).unwrap();
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();
        for name in tape.bound_params() {
            let live = store
                .get(&name)
                .and_then(|t| t.grad.as_ref())
                .map(|g| g.iter().any(|&v| v != 0.0))
                .unwrap_or(false);
            assert!(live, "parameter {name} got a zero gradient at init");
        }
    }

    #[test]
    fn denoiser_gradients_match_finite_differences() {
        let cfg = DenoiserConfig {
            n_vars: 2,
            horizon: 4,
            d_model: 8,
            heads: 2,
            res_blocks: 2,
            ff_dim: 12,
        };
        let (mut store, mut rng) = setup(&cfg, 6);
        let xs = Tensor::<f64>::randn(vec![1, 2, 4], &mut rng);
        let eps = Tensor::<f64>::randn(vec![1, 2, 4], &mut rng);
        let e = Tensor::<f64>::randn(vec![1, cfg.d_model], &mut rng);
        let emb = embed_step::<f64>(2, cfg.d_model).unwrap();
        let report = grad_check(
            |tape, params| {
                let xi = tape.leaf(xs.clone())?;
                let ei = tape.leaf(e.clone())?;
                let si = tape.leaf(Tensor::from_vec(
                    emb.vec.data().to_vec(),
                    vec![1, cfg.d_model],
                )?)?;
                let out = predict_noise(tape, params, xi, si, ei, &cfg)?;
                let target = tape.leaf(eps.clone())?;
                let err = tape.sub(out, target)?;
                tape.mean_sq(err)
            },
            &mut store,
            DEFAULT_FD_EPS,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
