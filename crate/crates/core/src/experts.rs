//! Geometry-specific experts and intra-manifold attention.
//!
//! Inputs are batches of manifold points, one per row.

use geomoe_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::manifolds::{PoincareBall, Sphere};
use crate::nn::{block_mask, linear, multi_head_attention, Activation, AttentionVars, Dropout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Hyperbolic,
    Spherical,
    Euclidean,
}

impl Geometry {
    pub const ALL: [Geometry; 3] = [Geometry::Hyperbolic, Geometry::Spherical, Geometry::Euclidean];

    pub fn index(self) -> usize {
        match self {
            Geometry::Hyperbolic => 0,
            Geometry::Spherical => 1,
            Geometry::Euclidean => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Geometry::Hyperbolic => "hyperbolic",
            Geometry::Spherical => "spherical",
            Geometry::Euclidean => "euclidean",
        }
    }
}

impl std::str::FromStr for Geometry {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hyperbolic" => Ok(Geometry::Hyperbolic),
            "spherical" => Ok(Geometry::Spherical),
            "euclidean" => Ok(Geometry::Euclidean),
            other => Err(format!("unknown geometry {other:?}")),
        }
    }
}

/// One expert layer: `W: d_e × d_e`, `b: 1 × d_e`. For the hyperbolic
/// expert `b` is a tangent vector at the origin and enters as `exp0(b)`.
#[derive(Clone, Copy)]
pub struct LayerVars<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

/// `L` layers of `x ↦ σ_h(W ⊗ x ⊕ exp0(b))`, then `x_L ⊕ x_0`.
pub fn hyperbolic_expert<'t>(
    ball: &PoincareBall,
    x0: Var<'t>,
    layers: &[LayerVars<'t>],
    act: Activation,
    dropout: &mut Dropout,
) -> Result<Var<'t>> {
    let tape = x0.tape();
    let mut x = x0;
    for l in layers {
        let u = ball.mobius_matvec(l.w, x)?;
        let u = ball.mobius_add(u, ball.exp0(l.b)?)?;
        x = ball.mobius_nonlinearity(u, |v| dropout.apply(tape, act.apply(v)))?;
    }
    ball.mobius_add(x, x0)
}

/// Tangent-space layers at the pole `p`, each re-projected onto `T_p`,
/// with a tangent residual; returns `exp_p(v_L + v_0)` with the tangent
/// norm capped below π.
pub fn spherical_expert<'t>(
    pole: Var<'t>,
    x: Var<'t>,
    layers: &[LayerVars<'t>],
    act: Activation,
    dropout: &mut Dropout,
) -> Result<Var<'t>> {
    let tape = x.tape();
    let v0 = Sphere.log(pole, x)?;
    let mut v = v0;
    for l in layers {
        let h = act.apply(linear(v, l.w, Some(l.b))?);
        v = Sphere.to_tangent(pole, dropout.apply(tape, h)?)?;
    }
    Sphere.exp(pole, Sphere.cap_tangent(v.add(v0)?))
}

/// `x_{ℓ+1} = σ(W x_ℓ + b)`, output `x_L + x_0`.
pub fn euclidean_expert<'t>(
    x0: Var<'t>,
    layers: &[LayerVars<'t>],
    act: Activation,
    dropout: &mut Dropout,
) -> Result<Var<'t>> {
    let tape = x0.tape();
    let mut x = x0;
    for l in layers {
        x = dropout.apply(tape, act.apply(linear(x, l.w, Some(l.b))?))?;
    }
    Ok(x.add(x0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub temperature: f64,
    /// Number of contiguous chunks the tangent vector is split into.
    pub tokens: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            temperature: 1.0,
            tokens: 8,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, d_e: usize) -> Result<()> {
        if self.tokens == 0 || d_e % self.tokens != 0 {
            return invalid(format!("attention: {} tokens do not divide d_e = {d_e}", self.tokens));
        }
        let d_tok = d_e / self.tokens;
        if self.heads == 0 || d_tok % self.heads != 0 {
            return invalid(format!(
                "attention: {} heads do not divide the token width {d_tok}",
                self.heads
            ));
        }
        if !(self.temperature > 0.0) {
            return invalid("attention: temperature must be positive");
        }
        Ok(())
    }

    pub fn token_width(&self, d_e: usize) -> usize {
        d_e / self.tokens
    }
}

/// Self-attention among the chunks of the rows' tangent vectors. `q, k, v`
/// are `d_tok × d_tok`. Tangent vectors move in and out of the manifold
/// through `log0/exp0` (ball) or `log_p/exp_p` (sphere).
pub fn intra_manifold_attention<'t>(
    tape: &'t Tape,
    geometry: Geometry,
    ctx: &ManifoldCtx<'t>,
    x: Var<'t>,
    w: [Var<'t>; 3],
    cfg: &AttentionConfig,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let (b, d_e) = (shape[0], shape[1]);
    cfg.validate(d_e)?;
    let v = ctx.to_tangent(geometry, x)?;
    let d_tok = cfg.token_width(d_e);
    let tokens = v.reshape(vec![b * cfg.tokens, d_tok])?;
    let seg: Vec<usize> = (0..b * cfg.tokens).map(|i| i / cfg.tokens).collect();
    let mask = block_mask(&seg).map(|m| tape.constant(m));
    let out = multi_head_attention(
        tokens,
        &AttentionVars::bare(w[0], w[1], w[2]),
        cfg.heads,
        cfg.temperature,
        mask,
    )?;
    let out = out.reshape(vec![b, d_e])?;
    ctx.from_tangent(geometry, out)
}

/// The manifolds one model uses, with the sphere's base point on the tape.
#[derive(Clone, Copy)]
pub struct ManifoldCtx<'t> {
    pub ball: PoincareBall,
    pub pole: Var<'t>,
}

impl<'t> ManifoldCtx<'t> {
    pub fn new(tape: &'t Tape, ball: PoincareBall, d_e: usize) -> Self {
        Self {
            ball,
            pole: tape.constant(Sphere::north_pole(d_e)),
        }
    }

    /// `log0`, `log_p` or identity.
    pub fn to_tangent(&self, g: Geometry, x: Var<'t>) -> Result<Var<'t>> {
        match g {
            Geometry::Hyperbolic => self.ball.log0(x),
            Geometry::Spherical => Sphere.log(self.pole, x),
            Geometry::Euclidean => Ok(x),
        }
    }

    /// `exp0`, `exp_p` after re-projection onto `T_p`, or identity.
    pub fn from_tangent(&self, g: Geometry, v: Var<'t>) -> Result<Var<'t>> {
        match g {
            Geometry::Hyperbolic => self.ball.exp0(v),
            Geometry::Spherical => Sphere.exp(self.pole, Sphere.cap_tangent(Sphere.to_tangent(self.pole, v)?)),
            Geometry::Euclidean => Ok(v),
        }
    }
}
