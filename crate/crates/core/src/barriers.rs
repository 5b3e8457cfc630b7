//! Barrier functions for the SV and RU, lane-change CLFs, class-K functions
//! and the steering interval implied by the RU barrier.

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ev_drift, ev_input_matrix, idx, EvState, JointModel, JointState, Vector7, VehicleGeometry};

/// Ellipsoidal safety envelope with semi-axes `r_a` (longitudinal) and `r_b` (lateral).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseParams {
    pub r_a: f64,
    pub r_b: f64,
}

impl EllipseParams {
    pub fn new(r_a: f64, r_b: f64) -> Self {
        Self { r_a, r_b }
    }

    pub fn a(&self) -> f64 {
        1.0 / (self.r_a * self.r_a)
    }

    pub fn b(&self) -> f64 {
        1.0 / (self.r_b * self.r_b)
    }
}

/// Class-K function used as a barrier or Lyapunov rate bound.
#[derive(Debug, Clone, Copy)]
pub enum ClassK {
    /// `α(s) = κ s`.
    Linear(f64),
    /// Arbitrary strictly increasing function with its derivative.
    Custom { f: fn(f64) -> f64, df: fn(f64) -> f64 },
}

impl PartialEq for ClassK {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ClassK::Linear(a), ClassK::Linear(b)) => a == b,
            (ClassK::Custom { f, df }, ClassK::Custom { f: g, df: dg }) => *f as usize == *g as usize && *df as usize == *dg as usize,
            _ => false,
        }
    }
}

impl ClassK {
    pub fn apply(&self, s: f64) -> f64 {
        match self {
            ClassK::Linear(k) => k * s,
            ClassK::Custom { f, .. } => f(s),
        }
    }

    pub fn derivative(&self, s: f64) -> f64 {
        match self {
            ClassK::Linear(k) => *k,
            ClassK::Custom { df, .. } => df(s),
        }
    }
}

/// Barrier value and its gradient with respect to the joint state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierEval {
    pub value: f64,
    pub grad: Vector7,
}

impl BarrierEval {
    /// `L_F H` and `L_G H` under the given joint model.
    pub fn lie_derivatives(&self, model: &JointModel, z: &JointState, gate: Option<bool>) -> (f64, Vector2<f64>) {
        let lf = self.grad.dot(&model.drift(z, gate));
        let lg = model.input_matrix(z).transpose() * self.grad;
        (lf, lg)
    }
}

/// SV barrier `a ΔX² + b ΔY² − 1` in the EV body frame.
pub fn h_sv(z: &JointState, e: &EllipseParams) -> BarrierEval {
    let (s, c) = z.ev.psi.sin_cos();
    let dx = z.sv.x - z.ev.x;
    let dy = z.sv.y - z.ev.y;
    let lon = c * dx + s * dy;
    let lat = -s * dx + c * dy;
    let (a, b) = (e.a(), e.b());
    let value = a * lon * lon + b * lat * lat - 1.0;

    let d_xs = 2.0 * a * lon * c - 2.0 * b * lat * s;
    let d_ys = 2.0 * a * lon * s + 2.0 * b * lat * c;
    let mut grad = Vector7::zeros();
    grad[idx::X_S] = d_xs;
    grad[idx::Y_S] = d_ys;
    grad[idx::X_E] = -d_xs;
    grad[idx::Y_E] = -d_ys;
    grad[idx::PSI_E] = 2.0 * lon * lat * (a - b);
    BarrierEval { value, grad }
}

/// Static road user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuConfig {
    pub x: f64,
    pub y: f64,
    pub ellipse: EllipseParams,
}

/// RU barrier with gradient over the EV state `(X, Y, ψ, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuBarrier {
    pub value: f64,
    pub grad: Vector4<f64>,
}

impl RuBarrier {
    pub fn lie_derivatives(&self, x: &EvState, geom: &VehicleGeometry) -> (f64, Vector2<f64>) {
        (self.grad.dot(&ev_drift(x)), ev_input_matrix(x, geom).transpose() * self.grad)
    }
}

pub fn h_ru(x: &EvState, ru: &RuConfig) -> RuBarrier {
    let (a, b) = (ru.ellipse.a(), ru.ellipse.b());
    let dx = x.x - ru.x;
    let dy = x.y - ru.y;
    RuBarrier {
        value: a * dx * dx + b * dy * dy - 1.0,
        grad: Vector4::new(2.0 * a * dx, 2.0 * b * dy, 0.0, 0.0),
    }
}

/// Lane-change CLFs and their Lie derivatives; `lg_*` columns are `(a_e, δ_e)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClfEval {
    pub v_y: f64,
    pub v_psi: f64,
    pub lf_v_y: f64,
    pub lg_v_y: Vector2<f64>,
    pub lf_v_psi: f64,
    pub lg_v_psi: Vector2<f64>,
}

pub fn clf_eval(x: &EvState, y_target: f64, geom: &VehicleGeometry) -> ClfEval {
    let ey = x.y - y_target;
    let grad_y = Vector4::new(0.0, 2.0 * ey, 0.0, 0.0);
    let grad_psi = Vector4::new(0.0, 0.0, 2.0 * x.psi, 0.0);
    let f = ev_drift(x);
    let g = ev_input_matrix(x, geom);
    ClfEval {
        v_y: ey * ey,
        v_psi: x.psi * x.psi,
        lf_v_y: grad_y.dot(&f),
        lg_v_y: g.transpose() * grad_y,
        lf_v_psi: grad_psi.dot(&f),
        lg_v_psi: g.transpose() * grad_psi,
    }
}

/// Which constraint determines an end of the steering interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSource {
    Box,
    Ru,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SteeringInterval {
    Feasible {
        lo: f64,
        hi: f64,
        lo_source: BoundSource,
        hi_source: BoundSource,
    },
    /// The RU half-space does not meet the steering box. `saturated` is the box
    /// point closest to the RU requirement.
    Empty { saturated: f64 },
}

impl SteeringInterval {
    pub fn is_empty(&self) -> bool {
        matches!(self, SteeringInterval::Empty { .. })
    }

    pub fn contains(&self, delta: f64) -> bool {
        match *self {
            SteeringInterval::Feasible { lo, hi, .. } => lo <= delta && delta <= hi,
            SteeringInterval::Empty { .. } => false,
        }
    }
}

/// Coefficient and right-hand side of the RU half-space `coef·δ ≥ rhs`,
/// with their gradients over the EV state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuHalfSpace {
    pub coef: f64,
    pub rhs: f64,
    pub d_coef: Vector4<f64>,
    pub d_rhs: Vector4<f64>,
}

impl RuHalfSpace {
    pub fn satisfied_by(&self, delta: f64) -> bool {
        self.coef * delta >= self.rhs
    }

    /// Bound `rhs / coef` and its gradient; requires `coef ≠ 0`.
    pub fn bound(&self) -> (f64, Vector4<f64>) {
        let beta = self.rhs / self.coef;
        let d = (self.d_rhs * self.coef - self.d_coef * self.rhs) / (self.coef * self.coef);
        (beta, d)
    }
}

pub fn ru_half_space(x: &EvState, ru: &RuConfig, alpha: &ClassK, geom: &VehicleGeometry) -> RuHalfSpace {
    let (a, b) = (ru.ellipse.a(), ru.ellipse.b());
    let dx = x.x - ru.x;
    let dy = x.y - ru.y;
    let (s, c) = x.psi.sin_cos();
    let v = x.v;
    let barrier = h_ru(x, ru);
    let (lf, lg) = barrier.lie_derivatives(x, geom);
    let coef = lg[1];
    let rhs = -alpha.apply(barrier.value) - lf;

    let d_h = barrier.grad;
    let d_lf = Vector4::new(
        2.0 * a * v * c,
        2.0 * b * v * s,
        -2.0 * a * dx * v * s + 2.0 * b * dy * v * c,
        2.0 * a * dx * c + 2.0 * b * dy * s,
    );
    let d_coef = Vector4::new(
        -2.0 * a * v * s,
        2.0 * b * v * c,
        -2.0 * a * dx * v * c - 2.0 * b * dy * v * s,
        -2.0 * a * dx * s + 2.0 * b * dy * c,
    );
    let d_rhs = -d_h * alpha.derivative(barrier.value) - d_lf;
    RuHalfSpace { coef, rhs, d_coef, d_rhs }
}

/// Intersection of the RU half-space with the steering box.
pub fn ru_steering_interval(x: &EvState, ru: &RuConfig, alpha: &ClassK, bounds: (f64, f64), geom: &VehicleGeometry) -> SteeringInterval {
    interval_from_half_space(&ru_half_space(x, ru, alpha, geom), bounds)
}

pub fn interval_from_half_space(hs: &RuHalfSpace, (dmin, dmax): (f64, f64)) -> SteeringInterval {
    let (mut lo, mut hi) = (dmin, dmax);
    let (mut lo_source, mut hi_source) = (BoundSource::Box, BoundSource::Box);
    if hs.coef == 0.0 {
        return if hs.rhs <= 0.0 {
            SteeringInterval::Feasible {
                lo,
                hi,
                lo_source,
                hi_source,
            }
        } else {
            SteeringInterval::Empty {
                saturated: 0.0_f64.clamp(dmin, dmax),
            }
        };
    }
    let beta = hs.rhs / hs.coef;
    if hs.coef > 0.0 {
        if beta > lo {
            lo = beta;
            lo_source = BoundSource::Ru;
        }
    } else if beta < hi {
        hi = beta;
        hi_source = BoundSource::Ru;
    }
    if lo > hi {
        return SteeringInterval::Empty {
            saturated: beta.clamp(dmin, dmax),
        };
    }
    // rounding in rhs/coef can leave the bound marginally infeasible
    if lo_source == BoundSource::Ru && !hs.satisfied_by(lo) {
        lo = next_up(lo).min(hi);
    }
    if hi_source == BoundSource::Ru && !hs.satisfied_by(hi) {
        hi = next_down(hi).max(lo);
    }
    SteeringInterval::Feasible {
        lo,
        hi,
        lo_source,
        hi_source,
    }
}

fn next_up(x: f64) -> f64 {
    let bits = x.to_bits();
    if x == 0.0 {
        f64::from_bits(1)
    } else if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}
