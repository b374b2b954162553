//! Layers built from tape operations. Each layer owns only `ParamId`s; the
//! values live in a [`ParamStore`] and enter a tape through [`Bound`].

use std::sync::Arc;

use rand::Rng;

use super::param::{Bound, ParamId, ParamStore};
use super::tape::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let weight = store.add_weight(format!("{name}.weight"), fan_in, fan_out, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(vec![width], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![width]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists input, hidden and output sizes.
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("{name}: an MLP needs at least two widths")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = tape.relu(x)?;
            }
            x = layer.forward(tape, p, x)?;
        }
        Ok(x)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// Multi-head self-attention with Q/K/V/output projections. Head `h` owns
/// columns `h*d/heads..(h+1)*d/heads` of each projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng)?,
            key: Linear::new(store, &format!("{name}.key"), width, width, rng)?,
            value: Linear::new(store, &format!("{name}.value"), width, width, rng)?,
            output: Linear::new(store, &format!("{name}.output"), width, width, rng)?,
            heads,
        })
    }

    /// Attention within each segment of rows; no mask, no positions.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, segments: Arc<[usize]>) -> Result<Var> {
        let q = self.query.forward(tape, p, x)?;
        let k = self.key.forward(tape, p, x)?;
        let v = self.value.forward(tape, p, x)?;
        let a = tape.attention(q, k, v, segments, self.heads)?;
        self.output.forward(tape, p, a)
    }
}

/// Pre-norm transformer block: x + MHA(LN(x)), then x + FFN(LN(x)).
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width)?,
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), width, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[width, ffn_hidden, width], rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, segments: Arc<[usize]>) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let h = self.attention.forward(tape, p, h, segments)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.ffn.forward(tape, p, h)?;
        tape.add(x, h)
    }
}
