//! Temporal convolutional context encoder.
//!
//! Maps a context window `X` of shape `[m, c]` to the latent vector that
//! conditions the reverse diffusion process. Every feature map is strictly
//! causal: the value at time `i` never reads inputs after `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{NodeId, ParamStore, Tape};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of input variables `m`.
    pub in_vars: usize,
    pub channels: usize,
    pub layers: usize,
    pub kernel: usize,
    pub dilation_base: usize,
    /// Must equal the denoiser `d_model`.
    pub latent_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_vars: 1,
            channels: 64,
            layers: 4,
            kernel: 3,
            dilation_base: 2,
            latent_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_vars < 1
            || self.channels < 1
            || self.layers < 1
            || self.kernel < 1
            || self.dilation_base < 1
            || self.latent_dim < 1
        {
            return Err(Error::Config(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }

    /// Receptive field of the stacked dilated blocks:
    /// `1 + (kernel - 1) * (base^layers - 1) / (base - 1)`.
    ///
    /// It is not required to cover the context length, but it is reported at
    /// construction so undersized stacks are visible.
    pub fn receptive_field(&self) -> usize {
        let span: usize = if self.dilation_base == 1 {
            self.layers
        } else {
            (self.dilation_base.pow(self.layers as u32) - 1) / (self.dilation_base - 1)
        };
        1 + (self.kernel - 1) * span
    }

    pub fn dilation(&self, layer: usize) -> usize {
        self.dilation_base.pow(layer as u32)
    }
}

/// The conditioning vector summarizing contextual dynamics, plus the index of
/// the last context step it was read from.
#[derive(Debug, Clone)]
pub struct LatentContext<T: Real> {
    pub e: Tensor<T>,
    pub source_end: usize,
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

/// Registers all encoder parameters under the `encoder.` prefix.
pub fn init_encoder_params<T: Real, R: rand::Rng + ?Sized>(
    cfg: &EncoderConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    for l in 0..cfg.layers {
        let c_in = if l == 0 { cfg.in_vars } else { cfg.channels };
        let p = format!("encoder.block{l}");
        store.insert(
            &format!("{p}.conv1.weight"),
            init_tensor(vec![cfg.channels, c_in, cfg.kernel], he_std(c_in * cfg.kernel), rng),
        )?;
        store.insert(&format!("{p}.conv1.bias"), Tensor::zeros(vec![cfg.channels]))?;
        store.insert(
            &format!("{p}.conv2.weight"),
            init_tensor(
                vec![cfg.channels, cfg.channels, cfg.kernel],
                he_std(cfg.channels * cfg.kernel),
                rng,
            ),
        )?;
        store.insert(&format!("{p}.conv2.bias"), Tensor::zeros(vec![cfg.channels]))?;
        if c_in != cfg.channels {
            store.insert(
                &format!("{p}.skip.weight"),
                init_tensor(vec![cfg.channels, c_in, 1], he_std(c_in), rng),
            )?;
            store.insert(&format!("{p}.skip.bias"), Tensor::zeros(vec![cfg.channels]))?;
        }
    }
    store.insert(
        "encoder.out_proj.weight",
        init_tensor(vec![cfg.latent_dim, cfg.channels, 1], he_std(cfg.channels), rng),
    )?;
    store.insert("encoder.out_proj.bias", Tensor::zeros(vec![cfg.latent_dim]))?;
    Ok(())
}

/// One residual temporal block:
/// `relu(conv(relu(conv(h)))) + skip(h)`, both convolutions causal with the
/// given dilation; the skip path is a 1x1 projection when the channel count
/// changes and identity otherwise.
pub fn residual_block<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: NodeId,
    prefix: &str,
    dilation: usize,
) -> Result<NodeId> {
    if dilation < 1 {
        return Err(Error::Autodiff("residual_block: dilation must be >= 1".into()));
    }
    let w1 = tape.param(store, &format!("{prefix}.conv1.weight"))?;
    let b1 = tape.param(store, &format!("{prefix}.conv1.bias"))?;
    let c1 = tape.conv1d(h, w1, b1, dilation, true)?;
    let a1 = tape.relu(c1)?;
    let w2 = tape.param(store, &format!("{prefix}.conv2.weight"))?;
    let b2 = tape.param(store, &format!("{prefix}.conv2.bias"))?;
    let c2 = tape.conv1d(a1, w2, b2, dilation, true)?;
    let a2 = tape.relu(c2)?;
    let skip = if store.get(&format!("{prefix}.skip.weight")).is_some() {
        let ws = tape.param(store, &format!("{prefix}.skip.weight"))?;
        let bs = tape.param(store, &format!("{prefix}.skip.bias"))?;
        tape.conv1d(h, ws, bs, 1, true)?
    } else {
        h
    };
    tape.add(a2, skip)
}

/// Full per-time feature map of the encoder: residual blocks followed by the
/// 1x1 output projection, shape `[B, latent_dim, c]`.
pub fn encode_features<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: NodeId,
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[1] != cfg.in_vars {
        return Err(Error::ShapeMismatch {
            op: "encode_features",
            lhs: shape,
            rhs: vec![cfg.in_vars],
        });
    }
    let mut h = x;
    for l in 0..cfg.layers {
        h = residual_block(tape, store, h, &format!("encoder.block{l}"), cfg.dilation(l))?;
    }
    let w = tape.param(store, "encoder.out_proj.weight")?;
    let b = tape.param(store, "encoder.out_proj.bias")?;
    tape.conv1d(h, w, b, 1, true)
}

/// Encodes a context window into the conditioning node: the projected feature
/// vector at the final time step, shape `[B, latent_dim]`.
pub fn encode_context<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: NodeId,
    cfg: &EncoderConfig,
) -> Result<NodeId> {
    let len = *tape
        .value(x)
        .shape()
        .last()
        .ok_or_else(|| Error::Data("empty context".into()))?;
    if len == 0 {
        return Err(Error::Data("context length must be >= 1".into()));
    }
    let features = encode_features(tape, store, x, cfg)?;
    tape.index_time(features, len - 1)
}

/// Inference helper: runs a throwaway tape over a single `[m, c]` window and
/// returns the latent vector as plain data.
pub fn encode_context_latent<T: Real>(
    store: &ParamStore<T>,
    x: &Tensor<T>,
    cfg: &EncoderConfig,
) -> Result<LatentContext<T>> {
    if x.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "encode_context_latent",
            lhs: x.shape().to_vec(),
            rhs: vec![cfg.in_vars, 0],
        });
    }
    let (m, c) = (x.shape()[0], x.shape()[1]);
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::from_vec(x.data().to_vec(), vec![1, m, c])?)?;
    let e = encode_context(&mut tape, store, leaf, cfg)?;
    let out = tape.value(e);
    Ok(LatentContext {
        e: Tensor::from_vec(out.data().to_vec(), vec![cfg.latent_dim])?,
        source_end: c - 1,
    })
}
