//! Dense strictly convex QP solver and the 4-variable lane-change QP.
//!
//! Problems have the form
//!
//! ```text
//!     minimize     ½ xᵀ G x + aᵀ x
//!     subject to   nᵢᵀ x ≥ bᵢ
//! ```
//!
//! and are solved with the Goldfarb–Idnani dual active-set method. Starting
//! from the unconstrained minimiser, the most violated constraint is added at
//! each outer iteration while dual feasibility is maintained, dropping active
//! constraints whose multiplier would cross zero. If a violated constraint can
//! be neither reached in the primal nor compensated in the dual the problem is
//! infeasible. Step directions come from a QR factorization of the active
//! normals in the Cholesky frame of `G`, so near-dependent normals are
//! detected from the projected residual rather than from an explicit inverse.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::EvInput;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("QP data contains non-finite values")]
    NonFinite,
    #[error("active-set iteration limit ({0}) reached")]
    IterationLimit(usize),
    #[error("solution fails the KKT check (residual {0:e})")]
    Inaccurate(f64),
    #[error("active constraint normals became numerically dependent")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
}

/// `min ½xᵀGx + aᵀx  s.t.  rows·x ≥ rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// One constraint normal per row.
    pub rows: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSolution {
    pub x: DVector<f64>,
    /// One multiplier per constraint row; zero when inactive.
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub status: QpStatus,
    pub iterations: usize,
}

impl DenseQp {
    pub fn dim(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.linear.dot(x)
    }

    /// Row slacks `nᵢᵀx − bᵢ`.
    pub fn slacks(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.rows * x - &self.rhs
    }
}

/// KKT residuals of a candidate primal–dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖Gx + a − Σ λᵢ nᵢ‖∞`.
    pub stationarity: f64,
    /// Largest constraint violation.
    pub primal: f64,
    /// Largest negative multiplier.
    pub dual: f64,
    /// `max |λᵢ (nᵢᵀx − bᵢ)|`.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

pub fn kkt_residuals(qp: &DenseQp, x: &DVector<f64>, lambda: &DVector<f64>) -> KktResiduals {
    let grad = &qp.hessian * x + &qp.linear - qp.rows.transpose() * lambda;
    let slack = qp.slacks(x);
    KktResiduals {
        stationarity: grad.amax(),
        primal: slack.iter().fold(0.0_f64, |m, &s| m.max(-s)),
        dual: lambda.iter().fold(0.0_f64, |m, &l| m.max(-l)),
        complementarity: lambda.iter().zip(slack.iter()).fold(0.0_f64, |m, (l, s)| m.max((l * s).abs())),
    }
}

/// Step directions computed in the Cholesky frame `ñ = L⁻¹n` (with
/// `G = LLᵀ`) from a QR factorization of the transformed active normals.
struct ActiveSetOps {
    l_inv: DMatrix<f64>,
}

struct Directions {
    /// Primal direction `z = L⁻ᵀ w`.
    z: DVector<f64>,
    /// Dual direction `r = R⁻¹ Q₁ᵀ ñ`.
    r: DVector<f64>,
    /// `‖w‖²`, the squared component of `ñ` orthogonal to the active span; equals `zᵀn`.
    w2: f64,
    /// `‖ñ‖² = nᵀG⁻¹n`.
    n2: f64,
}

impl ActiveSetOps {
    fn directions(&self, normals: &DMatrix<f64>, active: &[usize], n: &DVector<f64>) -> Result<Directions, QpError> {
        let nt = &self.l_inv * n;
        let n2 = nt.norm_squared();
        let dim = self.l_inv.nrows();
        if active.is_empty() {
            return Ok(Directions {
                z: self.l_inv.tr_mul(&nt),
                r: DVector::zeros(0),
                w2: n2,
                n2,
            });
        }
        let mut na = DMatrix::zeros(dim, active.len());
        for (c, &i) in active.iter().enumerate() {
            na.set_column(c, &(&self.l_inv * normals.row(i).transpose()));
        }
        let qr = na.qr();
        let (q, rr) = (qr.q(), qr.r());
        if rr.nrows() < active.len() {
            return Err(QpError::Degenerate);
        }
        let qtn = q.tr_mul(&nt);
        let r = rr.solve_upper_triangular(&qtn).ok_or(QpError::Degenerate)?;
        let w = if active.len() >= dim {
            DVector::zeros(dim)
        } else {
            &nt - &q * &qtn
        };
        Ok(Directions {
            z: self.l_inv.tr_mul(&w),
            r,
            w2: w.norm_squared(),
            n2,
        })
    }
}

/// Solves a strictly convex dense QP. `tol` is the feasibility tolerance on
/// row slacks.
pub fn solve_dense(qp: &DenseQp, tol: f64) -> Result<DenseSolution, QpError> {
    let n = qp.dim();
    let m = qp.n_rows();
    if qp
        .hessian
        .iter()
        .chain(qp.linear.iter())
        .chain(qp.rows.iter())
        .chain(qp.rhs.iter())
        .any(|v| !v.is_finite())
    {
        return Err(QpError::NonFinite);
    }
    let chol = qp.hessian.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let x0 = -chol.solve(&qp.linear);
    let ops = ActiveSetOps { l_inv };

    let mut x = x0;
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_iter = 50 * (n + m + 1);
    let mut iterations = 0;

    let finish = |x: DVector<f64>, active: Vec<usize>, u: Vec<f64>, status, iterations| {
        let mut multipliers = DVector::zeros(m);
        for (&i, &l) in active.iter().zip(u.iter()) {
            multipliers[i] = l;
        }
        Ok(DenseSolution {
            x,
            multipliers,
            active,
            status,
            iterations,
        })
    };

    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(QpError::IterationLimit(max_iter));
        }
        let slack = qp.slacks(&x);
        let mut p = None;
        let mut worst = -tol;
        for i in 0..m {
            if active.contains(&i) {
                continue;
            }
            let scale = 1.0 + qp.rhs[i].abs();
            if slack[i] / scale < worst {
                worst = slack[i] / scale;
                p = Some(i);
            }
        }
        let Some(p) = p else {
            return finish(x, active, u, QpStatus::Optimal, iterations);
        };
        let np = qp.rows.row(p).transpose();
        let mut u_new = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit(max_iter));
            }
            let Directions { z, r, w2, n2 } = ops.directions(&qp.rows, &active, &np)?;
            let sp = np.dot(&x) - qp.rhs[p];

            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 1e-14 {
                    let t = u[j] / rj;
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            // w2 / n2 is the squared sine of the G-angle between n and the active span
            let primal_step = w2 > 1e-10 * n2;
            let t2 = if primal_step { -sp / w2 } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return finish(x, active, u, QpStatus::Infeasible, iterations);
            }
            for (uj, rj) in u.iter_mut().zip(r.iter()) {
                *uj -= t * rj;
            }
            u_new += t;
            if primal_step {
                x += &z * t;
            }
            if primal_step && t2 <= t1 {
                active.push(p);
                u.push(u_new);
                break;
            }
            let j = drop.expect("partial step has a blocking multiplier");
            active.remove(j);
            u.remove(j);
        }
    }
}

/// Provenance of a row in the lane-change QP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowTag {
    ClfY,
    ClfPsi,
    Ru,
    SvCurr,
    SvPred,
    SteerMin,
    SteerMax,
    SlackY,
    SlackPsi,
    AccelMin,
    AccelMax,
}

/// `coeffs · (a_e, δ_e, δ_y, δ_ψ) ≥ rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpRow {
    pub coeffs: Vector4<f64>,
    pub rhs: f64,
    pub tag: RowTag,
}

impl QpRow {
    pub fn new(coeffs: Vector4<f64>, rhs: f64, tag: RowTag) -> Self {
        Self { coeffs, rhs, tag }
    }

    pub fn slack(&self, x: &Vector4<f64>) -> f64 {
        self.coeffs.dot(x) - self.rhs
    }
}

/// Lane-change QP over `(a_e, δ_e, δ_y, δ_ψ)` with objective
/// `½uᵀQu + ½p_y δ_y² + ½p_ψ δ_ψ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: Matrix4<f64>,
    pub rows: Vec<QpRow>,
}

impl QpProblem {
    pub fn row(&self, tag: RowTag) -> Option<&QpRow> {
        self.rows.iter().find(|r| r.tag == tag)
    }

    pub fn to_dense(&self) -> DenseQp {
        let m = self.rows.len();
        let mut rows = DMatrix::zeros(m, 4);
        let mut rhs = DVector::zeros(m);
        for (i, r) in self.rows.iter().enumerate() {
            rows.set_row(i, &r.coeffs.transpose());
            rhs[i] = r.rhs;
        }
        DenseQp {
            hessian: DMatrix::from_column_slice(4, 4, self.hessian.as_slice()),
            linear: DVector::zeros(4),
            rows,
            rhs,
        }
    }

    pub fn objective(&self, x: &Vector4<f64>) -> f64 {
        0.5 * x.dot(&(self.hessian * x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: EvInput,
    pub slack_y: f64,
    pub slack_psi: f64,
    pub status: QpStatus,
    /// Largest KKT residual; `NaN` when infeasible.
    pub kkt_residual: f64,
    pub multipliers: Vec<f64>,
    pub objective: f64,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    pub fn decision(&self) -> Vector4<f64> {
        Vector4::new(self.u.accel, self.u.steer, self.slack_y, self.slack_psi)
    }
}

/// Largest KKT residual, relative to `1 + max|rhs|`, accepted from the solver.
pub const KKT_ACCEPT: f64 = 1e-6;

pub fn solve_qp(p: &QpProblem, tol: f64) -> Result<QpSolution, QpError> {
    let dense = p.to_dense();
    let sol = solve_dense(&dense, tol)?;
    let x = Vector4::new(sol.x[0], sol.x[1], sol.x[2], sol.x[3]);
    let kkt = match sol.status {
        QpStatus::Optimal => kkt_residuals(&dense, &sol.x, &sol.multipliers).max(),
        QpStatus::Infeasible => f64::NAN,
    };
    if kkt > KKT_ACCEPT * (1.0 + dense.rhs.amax()) {
        return Err(QpError::Inaccurate(kkt));
    }
    Ok(QpSolution {
        u: EvInput::new(x[0], x[1]),
        slack_y: x[2],
        slack_psi: x[3],
        status: sol.status,
        kkt_residual: kkt,
        multipliers: sol.multipliers.iter().copied().collect(),
        objective: p.objective(&x),
    })
}
