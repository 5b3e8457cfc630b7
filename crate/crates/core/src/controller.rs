//! Per-step QP controllers: baseline ECBF, nominal IECBF and robust IECBF.
//!
//! Every mode solves the same CLF–CBF QP over `(a_e, δ_e, δ_y, δ_ψ)`:
//!
//! ```text
//!   min  ½uᵀQu + ½p_y δ_y² + ½p_ψ δ_ψ²
//!   s.t. L_f V_y + L_g V_y u ≤ −κ_y V_y + δ_y
//!        L_f V_ψ + L_g V_ψ u ≤ −κ_ψ V_ψ + δ_ψ
//!        L_f H_RU + L_g H_RU u ≥ −κ_RU H_RU
//!        L_F H_ℓ + L_G H_ℓ u ≥ −κ_SV H_ℓ,   ℓ ∈ {curr, pred}
//!        δ_e ∈ [δ_min, δ_max],  δ_y, δ_ψ ≥ 0
//! ```
//!
//! The modes differ only in how the SV rows are obtained. The baseline uses a
//! constant-velocity SV, the nominal controller one interaction-aware rollout
//! under the nominal driver model, and the robust controller either the
//! multi-model worst case (Cases 1–2) or an observer-corrected rollout with a
//! tightening `τ = |σ| ē` (Case 3).

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::barriers::{clf_eval, h_ru, h_sv, ClassK, ClfEval, EllipseParams, RuConfig};
use crate::driver_models::{DriverModel, ModelLabel};
use crate::dynamics::{idx, EvInput, JointModel, JointState, SvBehavior, VehicleGeometry};
use crate::observer::{CaseLabel, GateObserver, ObserverUpdate, UncertaintyBounds};
use crate::qp::{solve_qp, QpProblem, QpRow, QpSolution, QpStatus, RowTag};
use crate::rollout::{multi_model_critical, predictive_barrier, PredictiveConstraintTerms, PredictiveResult, RolloutConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    Baseline,
    Nominal,
    Robust,
}

impl ControllerMode {
    pub const ALL: [ControllerMode; 3] = [Self::Baseline, Self::Nominal, Self::Robust];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Nominal => "nominal",
            Self::Robust => "robust",
        }
    }
}

impl fmt::Display for ControllerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected baseline, nominal or robust)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpWeights {
    pub q: Matrix2<f64>,
    pub p_y: f64,
    pub p_psi: f64,
}

impl Default for QpWeights {
    fn default() -> Self {
        Self {
            q: Matrix2::identity(),
            p_y: 25.0,
            p_psi: 15.0,
        }
    }
}

impl QpWeights {
    pub fn hessian(&self) -> Matrix4<f64> {
        let mut h = Matrix4::zeros();
        h.fixed_view_mut::<2, 2>(0, 0).copy_from(&self.q);
        h[(2, 2)] = self.p_y;
        h[(3, 3)] = self.p_psi;
        h
    }

    pub fn validate(&self) -> Result<(), String> {
        if (self.q - self.q.transpose()).amax() > 0.0 {
            return Err("Q must be symmetric".into());
        }
        if self.q.cholesky().is_none() {
            return Err("Q must be positive definite".into());
        }
        if !(self.p_y > 0.0 && self.p_psi > 0.0) {
            return Err("slack penalties must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    pub weights: QpWeights,
    pub alpha_sv: ClassK,
    pub alpha_ru: ClassK,
    pub alpha_y: ClassK,
    pub alpha_psi: ClassK,
    pub steer_bounds: (f64, f64),
    /// Optional clamp on `a_e`; unbounded when `None`.
    pub accel_bounds: Option<(f64, f64)>,
    pub y_target: f64,
    pub sv_ellipse: EllipseParams,
    pub rollout: RolloutConfig,
    pub qp_tol: f64,
    /// Braking detection margin `ε`.
    pub epsilon: f64,
    pub bounds: UncertaintyBounds,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            weights: QpWeights::default(),
            alpha_sv: ClassK::Linear(5.0),
            alpha_ru: ClassK::Linear(5.0),
            alpha_y: ClassK::Linear(1.5),
            alpha_psi: ClassK::Linear(1.5),
            steer_bounds: (-1.8, 1.8),
            accel_bounds: None,
            y_target: 0.0,
            sv_ellipse: EllipseParams::new(4.5, 2.5),
            rollout: RolloutConfig::default(),
            qp_tol: 1e-10,
            epsilon: 0.1,
            bounds: UncertaintyBounds::default(),
        }
    }
}

/// Robust tightening for the SV rows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobustTerms {
    pub sigma: f64,
    pub sigma0: f64,
    pub tau: f64,
    pub tau0: f64,
    /// `Δ̂θ` used for the drift shift.
    pub estimate: f64,
}

impl RobustTerms {
    pub fn new(sigma: f64, sigma0: f64, estimate: f64, bound: f64) -> Self {
        Self {
            sigma,
            sigma0,
            tau: sigma.abs() * bound,
            tau0: sigma0.abs() * bound,
            estimate,
        }
    }

    /// `L̃_F − τ` for the predictive row.
    pub fn tighten_pred(&self, t: &PredictiveConstraintTerms) -> PredictiveConstraintTerms {
        PredictiveConstraintTerms {
            lf: t.lf + self.sigma * self.estimate - self.tau,
            ..*t
        }
    }

    /// `L̃_F − τ₀` for the current row.
    pub fn tighten_curr(&self, t: &PredictiveConstraintTerms) -> PredictiveConstraintTerms {
        PredictiveConstraintTerms {
            lf: t.lf + self.sigma0 * self.estimate - self.tau0,
            ..*t
        }
    }
}

/// Mode-resolved constraint data at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintTerms {
    pub clf: ClfEval,
    pub ru: PredictiveConstraintTerms,
    pub sv_curr: PredictiveConstraintTerms,
    pub sv_pred: PredictiveConstraintTerms,
}

fn cbf_row(t: &PredictiveConstraintTerms, alpha: &ClassK, tag: RowTag) -> QpRow {
    QpRow::new(Vector4::new(t.lg[0], t.lg[1], 0.0, 0.0), -alpha.apply(t.h) - t.lf, tag)
}

fn clf_row(v: f64, lf: f64, lg: &Vector2<f64>, alpha: &ClassK, slack: usize, tag: RowTag) -> QpRow {
    let mut c = Vector4::new(-lg[0], -lg[1], 0.0, 0.0);
    c[slack] = 1.0;
    QpRow::new(c, lf + alpha.apply(v), tag)
}

pub fn build_qp(terms: &ConstraintTerms, cfg: &ControllerConfig) -> QpProblem {
    let c = &terms.clf;
    let (dmin, dmax) = cfg.steer_bounds;
    let mut rows = vec![
        clf_row(c.v_y, c.lf_v_y, &c.lg_v_y, &cfg.alpha_y, 2, RowTag::ClfY),
        clf_row(c.v_psi, c.lf_v_psi, &c.lg_v_psi, &cfg.alpha_psi, 3, RowTag::ClfPsi),
        cbf_row(&terms.ru, &cfg.alpha_ru, RowTag::Ru),
        cbf_row(&terms.sv_curr, &cfg.alpha_sv, RowTag::SvCurr),
        cbf_row(&terms.sv_pred, &cfg.alpha_sv, RowTag::SvPred),
        QpRow::new(Vector4::new(0.0, 1.0, 0.0, 0.0), dmin, RowTag::SteerMin),
        QpRow::new(Vector4::new(0.0, -1.0, 0.0, 0.0), -dmax, RowTag::SteerMax),
        QpRow::new(Vector4::new(0.0, 0.0, 1.0, 0.0), 0.0, RowTag::SlackY),
        QpRow::new(Vector4::new(0.0, 0.0, 0.0, 1.0), 0.0, RowTag::SlackPsi),
    ];
    if let Some((amin, amax)) = cfg.accel_bounds {
        rows.push(QpRow::new(Vector4::new(1.0, 0.0, 0.0, 0.0), amin, RowTag::AccelMin));
        rows.push(QpRow::new(Vector4::new(-1.0, 0.0, 0.0, 0.0), -amax, RowTag::AccelMax));
    }
    QpProblem {
        hessian: cfg.weights.hessian(),
        rows,
    }
}

/// Per-step record of what the controller saw and did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub mode: ControllerMode,
    pub case: Option<CaseLabel>,
    pub feasible: bool,
    pub solver_error: Option<String>,
    pub u: EvInput,
    pub slack_y: f64,
    pub slack_psi: f64,
    pub kkt_residual: f64,
    pub h_ru: f64,
    pub h_sv_curr: f64,
    pub h_sv_pred: f64,
    pub k_star: usize,
    pub m_star: Option<ModelLabel>,
    pub robust: RobustTerms,
    pub observer: Option<ObserverUpdate>,
    pub rollout_inner_infeasible: bool,
    /// Slack of the current SV row at the applied input; `NaN` when infeasible.
    pub sv_curr_row_slack: f64,
    pub problem: QpProblem,
}

/// Stateful closed-loop controller.
#[derive(Debug, Clone)]
pub struct Controller {
    pub mode: ControllerMode,
    pub cfg: ControllerConfig,
    pub geometry: VehicleGeometry,
    pub ru: RuConfig,
    baseline_model: JointModel,
    nominal_model: JointModel,
    catalog: Vec<JointModel>,
    observer: GateObserver,
}

impl Controller {
    /// `catalog` lists every SV model the robust controller may consider;
    /// `nominal` is the model assumed by the nominal controller.
    pub fn new(
        mode: ControllerMode,
        cfg: ControllerConfig,
        geometry: VehicleGeometry,
        ru: RuConfig,
        nominal: DriverModel,
        catalog: &[DriverModel],
        gap_floor: f64,
    ) -> Self {
        let dt = cfg.rollout.dt;
        let joint = |sv| JointModel {
            gap_floor,
            ..JointModel::new(geometry, sv, dt)
        };
        Self {
            mode,
            cfg,
            geometry,
            ru,
            baseline_model: joint(SvBehavior::ConstantVelocity),
            nominal_model: joint(SvBehavior::Reactive(nominal)),
            catalog: catalog.iter().map(|m| joint(SvBehavior::Reactive(*m))).collect(),
            observer: GateObserver::new(cfg.bounds, cfg.epsilon, nominal.label, dt),
        }
    }

    pub fn catalog(&self) -> &[JointModel] {
        &self.catalog
    }

    fn model_for(&self, label: ModelLabel) -> &JointModel {
        self.catalog
            .iter()
            .find(|m| matches!(&m.sv, SvBehavior::Reactive(d) if d.label == label))
            .expect("observer key comes from the catalog")
    }

    /// One control step at the measured joint state.
    pub fn step(&mut self, z: &JointState) -> (EvInput, StepDiagnostics) {
        let cfg = self.cfg;
        let clf = clf_eval(&z.ev, cfg.y_target, &self.geometry);
        let ru_b = h_ru(&z.ev, &self.ru);
        let (ru_lf, ru_lg) = ru_b.lie_derivatives(&z.ev, &self.geometry);
        let ru = PredictiveConstraintTerms {
            lf: ru_lf,
            lg: ru_lg,
            h: ru_b.value,
        };

        let curr_b = h_sv(z, &cfg.sv_ellipse);
        let sigma0 = curr_b.grad[idx::V_S];

        let (curr_model, pred, case, observer, robust) = match self.mode {
            ControllerMode::Baseline => {
                let p = predictive_barrier(z, &self.baseline_model, &cfg.rollout, &self.ru, None);
                (self.baseline_model, p, None, None, RobustTerms::default())
            }
            ControllerMode::Nominal => {
                let p = predictive_barrier(z, &self.nominal_model, &cfg.rollout, &self.ru, None);
                (self.nominal_model, p, None, None, RobustTerms::default())
            }
            ControllerMode::Robust => {
                let obs = self.observer.update(z, &self.catalog);
                match obs.case {
                    CaseLabel::Case3(pair) => {
                        let m = *self.model_for(pair);
                        let est = obs.state.estimate;
                        let p = predictive_barrier(z, &m, &cfg.rollout, &self.ru, Some(est));
                        let r = RobustTerms::new(p.critical.sigma, sigma0, est, obs.error_bound);
                        (m, p, Some(obs.case), Some(obs), r)
                    }
                    _ => {
                        let p = multi_model_critical(z, &self.catalog, &cfg.rollout, &self.ru);
                        let m = match p.critical.model {
                            Some(l) => *self.model_for(l),
                            None => self.nominal_model,
                        };
                        (m, p, Some(obs.case), Some(obs), RobustTerms::default())
                    }
                }
            }
        };

        let (curr_lf, curr_lg) = curr_b.lie_derivatives(&curr_model, z, None);
        let mut sv_curr = PredictiveConstraintTerms {
            lf: curr_lf,
            lg: curr_lg,
            h: curr_b.value,
        };
        let mut sv_pred = pred.terms;
        if matches!(case, Some(CaseLabel::Case3(_))) {
            sv_curr = robust.tighten_curr(&sv_curr);
            sv_pred = robust.tighten_pred(&sv_pred);
        }
        let terms = ConstraintTerms { clf, ru, sv_curr, sv_pred };
        let problem = build_qp(&terms, &cfg);
        let (u, sol, err) = match solve_qp(&problem, cfg.qp_tol) {
            Ok(s) if s.status == QpStatus::Optimal => (s.u, Some(s), None),
            Ok(s) => (EvInput::ZERO, Some(s), None),
            Err(e) => {
                log::warn!("QP solver failure: {e}");
                (EvInput::ZERO, None, Some(e.to_string()))
            }
        };
        let feasible = sol.as_ref().is_some_and(QpSolution::is_optimal);
        let decision = sol.as_ref().filter(|s| s.is_optimal()).map(QpSolution::decision);
        let sv_curr_row_slack = match (decision, problem.row(RowTag::SvCurr)) {
            (Some(x), Some(r)) => r.slack(&x),
            _ => f64::NAN,
        };
        let diag = StepDiagnostics {
            mode: self.mode,
            case,
            feasible,
            solver_error: err,
            u,
            slack_y: decision.map_or(0.0, |x| x[2]),
            slack_psi: decision.map_or(0.0, |x| x[3]),
            kkt_residual: sol.as_ref().map_or(f64::NAN, |s| s.kkt_residual),
            h_ru: ru_b.value,
            h_sv_curr: curr_b.value,
            h_sv_pred: pred.critical.h_pred,
            k_star: pred.critical.k_star,
            m_star: pred.critical.model,
            robust,
            observer,
            rollout_inner_infeasible: pred.trajectory.any_inner_infeasible(),
            sv_curr_row_slack,
            problem,
        };
        (u, diag)
    }
}

/// Predictive result for a given mode without running the QP; exposed for
/// tests and diagnostics.
pub fn mode_prediction(ctrl: &Controller, z: &JointState) -> PredictiveResult {
    match ctrl.mode {
        ControllerMode::Baseline => predictive_barrier(z, &ctrl.baseline_model, &ctrl.cfg.rollout, &ctrl.ru, None),
        ControllerMode::Nominal => predictive_barrier(z, &ctrl.nominal_model, &ctrl.cfg.rollout, &ctrl.ru, None),
        ControllerMode::Robust => multi_model_critical(z, &ctrl.catalog, &ctrl.cfg.rollout, &ctrl.ru),
    }
}
