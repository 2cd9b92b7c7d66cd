//! Poincaré ball, unit sphere and Euclidean maps.
//!
//! Every map works row-wise on a batch `B × d` held on a tape, so the same
//! code serves the model and the single-point API (`BallPoint`,
//! `SpherePoint`), which evaluates on a throwaway tape.

use geomoe_tensor::{Tape, Tensor, Unary, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ball points satisfy `√c‖x‖ ≤ 1 − BALL_MARGIN`.
pub const BALL_MARGIN: f64 = 1e-5;
pub const SPHERE_EPS: f64 = 1e-8;
/// `⟨p,x⟩ ≤ −1 + CUT_LOCUS_TOL` is rejected by the sphere log.
pub const CUT_LOCUS_TOL: f64 = 1e-6;
/// Model-side tangent vectors on the sphere are capped at this norm, so
/// their images stay clear of the cut locus and `log ∘ exp` is the identity.
pub const SPHERE_TANGENT_MAX: f64 = std::f64::consts::PI - 1e-2;
pub const MOBIUS_DENOM_MIN: f64 = 1e-12;
pub const UNIT_TOL: f64 = 1e-9;

// Keeps the rescaled norm strictly under the radius despite rounding.
const RADIUS_SHAVE: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c > 0.0 && c.is_finite() {
            Ok(Self(c))
        } else {
            Err(Error::Manifold {
                op: "curvature",
                msg: format!("must be positive and finite, got {c}"),
            })
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self(1.0)
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;
    fn try_from(c: f64) -> Result<Self> {
        Self::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

/// The Poincaré ball of curvature `−c`, radius `1/√c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoincareBall {
    pub c: Curvature,
    /// Relative distance kept from the boundary by every projection.
    pub margin: f64,
}

impl Default for PoincareBall {
    fn default() -> Self {
        Self::new(Curvature::default())
    }
}

impl PoincareBall {
    pub fn new(c: Curvature) -> Self {
        Self { c, margin: BALL_MARGIN }
    }

    pub fn max_radius(&self) -> f64 {
        (1.0 - self.margin) / self.c.sqrt()
    }

    /// Rows rescaled to norm `min(‖x‖, max_radius)`.
    pub fn project<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let scale = x.norm_last().unary(Unary::RadiusClip(self.max_radius() * RADIUS_SHAVE));
        Ok(x.mul(scale)?)
    }

    /// `tanh(√c‖v‖)·v/(√c‖v‖)`, projected.
    pub fn exp0<'t>(&self, v: Var<'t>) -> Result<Var<'t>> {
        let ratio = v.norm_last().unary(Unary::TanhRatio(self.c.sqrt()));
        self.project(v.mul(ratio)?)
    }

    /// `artanh(√c‖x‖)·x/(√c‖x‖)` with the artanh argument clamped.
    pub fn log0<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let ratio = x.norm_last().unary(Unary::AtanhRatio(self.c.sqrt()));
        Ok(x.mul(ratio)?)
    }

    /// Möbius addition `x ⊕_c y`, projected.
    pub fn mobius_add<'t>(&self, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        let c = self.c.get();
        let xy = x.mul(y)?.sum_last();
        let x2 = x.square().sum_last();
        let y2 = y.square().sum_last();
        let a = xy.scale(2.0 * c).add(y2.scale(c))?.add_scalar(1.0);
        let b = x2.scale(-c).add_scalar(1.0);
        let num = x.mul(a)?.add(y.mul(b)?)?;
        let den = xy.scale(2.0 * c).add(x2.mul(y2)?.scale(c * c))?.add_scalar(1.0);
        if let Some(&d) = den.value().data().iter().find(|d| d.abs() < MOBIUS_DENOM_MIN) {
            return Err(Error::Manifold {
                op: "mobius_add",
                msg: format!("denominator {d:e} below {MOBIUS_DENOM_MIN:e}"),
            });
        }
        self.project(num.div(den)?)
    }

    /// `M ⊗_c x = exp0(M·log0(x))` for each row; `m` is `out × in`.
    pub fn mobius_matvec<'t>(&self, m: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.exp0(self.log0(x)?.matmul_t(m)?)
    }

    /// `exp0(σ(log0(x)))`.
    pub fn mobius_nonlinearity<'t>(
        &self,
        x: Var<'t>,
        sigma: impl FnOnce(Var<'t>) -> Result<Var<'t>>,
    ) -> Result<Var<'t>> {
        self.exp0(sigma(self.log0(x)?)?)
    }

    /// Largest `√c‖x_i‖` over the rows of `x`.
    pub fn max_scaled_norm(&self, x: &Tensor) -> f64 {
        row_norms(x).fold(0.0, f64::max) * self.c.sqrt()
    }
}

/// Unit sphere `S^{d−1}` with maps at a base point `p` (a `1 × d` row or
/// one base point per row).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sphere;

impl Sphere {
    /// `e_d`, the base point used by the model.
    pub fn north_pole(d: usize) -> Tensor {
        let mut p = Tensor::zeros(vec![1, d]);
        p.data_mut()[d - 1] = 1.0;
        p
    }

    /// Rows divided by `‖x‖ + ε`, then renormalized to unit length.
    pub fn project<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.norm_last();
        if n.value().data().iter().any(|&v| v == 0.0) {
            return Err(Error::Manifold {
                op: "project_to_sphere",
                msg: "cannot normalize a zero vector".into(),
            });
        }
        let y = x.div(n.add_scalar(SPHERE_EPS))?;
        Ok(y.div(y.norm_last())?)
    }

    /// `v − ⟨v,p⟩p`.
    pub fn to_tangent<'t>(&self, p: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let vp = v.mul(p)?.sum_last();
        Ok(v.sub(p.mul(vp)?)?)
    }

    /// `arccos(u)/√(1−u²)·(x − u p)` with `u = ⟨p,x⟩`.
    pub fn log<'t>(&self, p: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let u = x.mul(p)?.sum_last();
        if let Some(&dot) = u.value().data().iter().find(|&&u| u <= -1.0 + CUT_LOCUS_TOL) {
            return Err(Error::CutLocus { dot, tol: CUT_LOCUS_TOL });
        }
        let ratio = u.unary(Unary::AcosRatio);
        Ok(x.sub(p.mul(u)?)?.mul(ratio)?)
    }

    /// Rows rescaled to norm `min(‖v‖, SPHERE_TANGENT_MAX)`.
    pub fn cap_tangent<'t>(&self, v: Var<'t>) -> Var<'t> {
        v.mul(v.norm_last().unary(Unary::RadiusClip(SPHERE_TANGENT_MAX))).expect("row-broadcast scale")
    }

    /// `cos(‖v‖)p + sin(‖v‖)v/‖v‖`; `v` must be tangent at `p`.
    pub fn exp<'t>(&self, p: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let n = v.norm_last();
        Ok(p.mul(n.cos())?.add(v.mul(n.sinc())?)?)
    }
}

pub(crate) fn row_norms(x: &Tensor) -> impl Iterator<Item = f64> + '_ {
    x.data()
        .chunks(x.cols().max(1))
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn eval_rows(f: impl for<'t> FnOnce(&'t Tape) -> Result<Var<'t>>) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let out = f(&tape)?;
    let t = out.tensor();
    if !t.is_finite() {
        return Err(Error::Manifold {
            op: "evaluate",
            msg: "non-finite result".into(),
        });
    }
    Ok(t.into_data())
}

fn row_const<'t>(tape: &'t Tape, x: &[f64]) -> Var<'t> {
    tape.constant(Tensor::row(x))
}

/// A point of the Poincaré ball with its curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    x: Vec<f64>,
    c: Curvature,
}

impl BallPoint {
    /// Checks `√c‖x‖ ≤ 1 − BALL_MARGIN`.
    pub fn new(x: Vec<f64>, c: Curvature) -> Result<Self> {
        let r = norm(&x) * c.sqrt();
        if !(r <= 1.0 - BALL_MARGIN) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Manifold {
                op: "ball_point",
                msg: format!("√c‖x‖ = {r} exceeds 1 − {BALL_MARGIN:e}"),
            });
        }
        Ok(Self { x, c })
    }

    pub fn origin(d: usize, c: Curvature) -> Self {
        Self { x: vec![0.0; d], c }
    }

    pub fn coords(&self) -> &[f64] {
        &self.x
    }

    pub fn curvature(&self) -> Curvature {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    fn ball(&self) -> PoincareBall {
        PoincareBall::new(self.c)
    }

    fn same_ball(&self, other: &BallPoint) -> Result<()> {
        if self.c != other.c || self.dim() != other.dim() {
            return Err(Error::Manifold {
                op: "mobius_add",
                msg: format!(
                    "points on different balls (c {} vs {}, d {} vs {})",
                    self.c.get(),
                    other.c.get(),
                    self.dim(),
                    other.dim()
                ),
            });
        }
        Ok(())
    }
}

/// A unit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpherePoint {
    x: Vec<f64>,
}

impl SpherePoint {
    /// Checks `|‖x‖ − 1| ≤ UNIT_TOL`.
    pub fn new(x: Vec<f64>) -> Result<Self> {
        let n = norm(&x);
        if !((n - 1.0).abs() <= UNIT_TOL) {
            return Err(Error::Manifold {
                op: "sphere_point",
                msg: format!("norm {n} is not unit"),
            });
        }
        Ok(Self { x })
    }

    pub fn north_pole(d: usize) -> Self {
        Self {
            x: Sphere::north_pole(d).into_data(),
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.x
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TangentBase {
    /// Tangent space of the ball at the origin.
    BallOrigin,
    Sphere(SpherePoint),
    /// Euclidean vectors carry no base point.
    Free,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub v: Vec<f64>,
    pub base: TangentBase,
}

impl TangentVector {
    /// A sphere tangent is checked for `|⟨v,p⟩| ≤ UNIT_TOL`.
    pub fn new(v: Vec<f64>, base: TangentBase) -> Result<Self> {
        if let TangentBase::Sphere(p) = &base {
            let dot: f64 = v.iter().zip(p.coords()).map(|(a, b)| a * b).sum();
            if dot.abs() > UNIT_TOL || v.len() != p.dim() {
                return Err(Error::Manifold {
                    op: "tangent_vector",
                    msg: format!("⟨v,p⟩ = {dot:e}, not tangent"),
                });
            }
        }
        Ok(Self { v, base })
    }
}

pub fn mobius_add(x: &BallPoint, y: &BallPoint) -> Result<BallPoint> {
    x.same_ball(y)?;
    let ball = x.ball();
    let out = eval_rows(|t| ball.mobius_add(row_const(t, &x.x), row_const(t, &y.x)))?;
    Ok(BallPoint { x: out, c: x.c })
}

pub fn exp0_ball(v: &[f64], c: Curvature) -> Result<BallPoint> {
    let out = eval_rows(|t| PoincareBall::new(c).exp0(row_const(t, v)))?;
    Ok(BallPoint { x: out, c })
}

pub fn log0_ball(x: &BallPoint) -> Result<TangentVector> {
    let out = eval_rows(|t| x.ball().log0(row_const(t, &x.x)))?;
    Ok(TangentVector {
        v: out,
        base: TangentBase::BallOrigin,
    })
}

/// `m` is `out × d`, row-major.
pub fn mobius_matvec(m: &Tensor, x: &BallPoint) -> Result<BallPoint> {
    let out = eval_rows(|t| x.ball().mobius_matvec(t.constant(m.clone()), row_const(t, &x.x)))?;
    Ok(BallPoint { x: out, c: x.c })
}

pub fn mobius_nonlinearity(x: &BallPoint, sigma: Unary) -> Result<BallPoint> {
    let out = eval_rows(|t| {
        x.ball()
            .mobius_nonlinearity(row_const(t, &x.x), |v| Ok(v.unary(sigma)))
    })?;
    Ok(BallPoint { x: out, c: x.c })
}

pub fn sphere_log(p: &SpherePoint, x: &SpherePoint) -> Result<TangentVector> {
    if p.dim() != x.dim() {
        return Err(Error::Manifold {
            op: "sphere_log",
            msg: format!("dimension {} vs {}", p.dim(), x.dim()),
        });
    }
    let out = eval_rows(|t| Sphere.log(row_const(t, &p.x), row_const(t, &x.x)))?;
    Ok(TangentVector {
        v: out,
        base: TangentBase::Sphere(p.clone()),
    })
}

pub fn sphere_exp(p: &SpherePoint, v: &TangentVector) -> Result<SpherePoint> {
    TangentVector::new(v.v.clone(), TangentBase::Sphere(p.clone()))?;
    let out = eval_rows(|t| Sphere.exp(row_const(t, &p.x), row_const(t, &v.v)))?;
    SpherePoint::new(out)
}

pub fn project_to_ball(x: &[f64], c: Curvature) -> Result<BallPoint> {
    let out = eval_rows(|t| PoincareBall::new(c).project(row_const(t, x)))?;
    Ok(BallPoint { x: out, c })
}

pub fn project_to_sphere(x: &[f64]) -> Result<SpherePoint> {
    let out = eval_rows(|t| Sphere.project(row_const(t, x)))?;
    SpherePoint::new(out)
}
