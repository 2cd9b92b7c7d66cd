//! Building blocks shared by the encoder, experts and head.

use geomoe_tensor::{Tape, Tensor, Var, MASK_NEG};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const LN_EPS: f64 = 1e-5;

/// `x Wᵀ + b` with `W: out × in` and `b: 1 × out`.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let y = x.matmul_t(w)?;
    Ok(match b {
        Some(b) => y.add(b)?,
        None => y,
    })
}

/// Layer norm with a per-feature gain and shift.
pub fn layer_norm_affine<'t>(x: Var<'t>, gain: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
    Ok(x.layer_norm(LN_EPS).mul(gain)?.add(shift)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Gelu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Inverted dropout; a no-op when no generator is attached.
pub struct Dropout<'r> {
    pub rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply<'t>(&mut self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = x.shape();
        let keep = 1.0 / (1.0 - rate);
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Ok(x.mul(tape.constant(Tensor::new(shape, mask)?))?)
    }
}

/// Additive mask keeping attention inside each segment: 0 where
/// `seg[i] == seg[j]`, a large negative number elsewhere.
pub fn block_mask(seg: &[usize]) -> Option<Tensor> {
    if seg.windows(2).all(|w| w[0] == w[1]) {
        return None;
    }
    let n = seg.len();
    let mut m = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            if seg[i] != seg[j] {
                m.data_mut()[i * n + j] = MASK_NEG;
            }
        }
    }
    Some(m)
}

/// `B × n` mask selecting the rows of each segment: row `b` is 0 on the
/// rows of segment `b`, large negative elsewhere.
pub fn segment_mask(seg: &[usize], segments: usize) -> Tensor {
    let n = seg.len();
    let mut m = Tensor::full(vec![segments, n], MASK_NEG);
    for (j, &s) in seg.iter().enumerate() {
        m.data_mut()[s * n + j] = 0.0;
    }
    m
}

/// Projection weights of one attention block; biases and the output
/// projection are optional.
#[derive(Clone, Copy)]
pub struct AttentionVars<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub bq: Option<Var<'t>>,
    pub bk: Option<Var<'t>>,
    pub bv: Option<Var<'t>>,
    pub out: Option<(Var<'t>, Var<'t>)>,
}

impl<'t> AttentionVars<'t> {
    pub fn bare(wq: Var<'t>, wk: Var<'t>, wv: Var<'t>) -> Self {
        Self {
            wq,
            wk,
            wv,
            bq: None,
            bk: None,
            bv: None,
            out: None,
        }
    }
}

/// Multi-head self-attention over the rows of `x` (`n × d`). Logits are
/// `q·k / (temperature·√d_head)`; `mask` is added before the softmax.
pub fn multi_head_attention<'t>(
    x: Var<'t>,
    w: &AttentionVars<'t>,
    heads: usize,
    temperature: f64,
    mask: Option<Var<'t>>,
) -> Result<Var<'t>> {
    let d = x.shape()[1];
    if heads == 0 || d % heads != 0 {
        return invalid(format!("attention: width {d} not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let q = linear(x, w.wq, w.bq)?;
    let k = linear(x, w.wk, w.bk)?;
    let v = linear(x, w.wv, w.bv)?;
    let scale = 1.0 / (temperature * (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (q.slice(1, h * dh, dh)?, k.slice(1, h * dh, dh)?, v.slice(1, h * dh, dh)?)
        };
        let mut logits = qh.matmul_t(kh)?.scale(scale);
        if let Some(m) = mask {
            logits = logits.add(m)?;
        }
        outs.push(logits.softmax().matmul(vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { Var::concat(&outs, 1)? };
    match w.out {
        Some((wo, bo)) => linear(cat, wo, Some(bo)),
        None => Ok(cat),
    }
}
