//! Closed-loop emergency lane-change scenario.
//!
//! The truth SV follows P-IDM under the truth preset pair and stays in its
//! lane; the EV applies the controller's input. Each step logs the measured
//! state, the controller diagnostics and the truth-side disturbance, then the
//! world advances by one explicit-Euler step with the SV speed clamped at zero.
//! A run ends on collision (either barrier negative at a truth state), on
//! completion of the lane change, or when the duration elapses.

pub mod config;
pub mod log;

use serde::{Deserialize, Serialize};

use crate::barriers::{h_ru, h_sv};
use crate::controller::{Controller, ControllerMode, StepDiagnostics};
use crate::dynamics::{EvState, JointModel, JointState, SvBehavior};
use crate::observer::TruthUncertainty;

pub use self::config::ScenarioConfig;
pub use self::log::{write_log, StepRecord, Summary, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Collision,
    Timeout,
}

pub fn completion_check(x: &EvState, y_target: f64, y_tol: f64, psi_tol: f64) -> bool {
    (x.y - y_target).abs() <= y_tol && x.psi.abs() <= psi_tol
}

/// Run log with outcome and summary metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub mode: ControllerMode,
    pub records: Vec<StepRecord>,
    pub outcome: Outcome,
    /// Time of the first truth state with a negative barrier.
    pub first_violation: Option<f64>,
    pub completion_time: Option<f64>,
    pub min_h_ru: f64,
    pub min_h_sv: f64,
    pub infeasible_steps: usize,
    pub magnitude_violations: usize,
    pub rate_violations: usize,
}

/// Full per-step data kept alongside the flat log record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub t: f64,
    pub z: JointState,
    pub diag: StepDiagnostics,
}

pub fn build_controller(cfg: &ScenarioConfig, mode: ControllerMode) -> Controller {
    let catalog = cfg.presets.models();
    Controller::new(
        mode,
        cfg.controller_config(),
        cfg.geometry(),
        cfg.ru(),
        cfg.presets.model(cfg.nominal_label()),
        &catalog,
        cfg.gap_floor,
    )
}

pub fn run_scenario(cfg: &ScenarioConfig, mode: ControllerMode) -> RunResult {
    run_scenario_traced(cfg, mode).0
}

/// Like [`run_scenario`] but also returns the per-step controller diagnostics.
pub fn run_scenario_traced(cfg: &ScenarioConfig, mode: ControllerMode) -> (RunResult, Vec<StepTrace>) {
    let mut ctrl = build_controller(cfg, mode);
    let truth_model = cfg.presets.model(cfg.truth_label());
    let nominal_model = cfg.presets.model(cfg.nominal_label());
    let truth = JointModel {
        gap_floor: cfg.gap_floor,
        ..JointModel::new(cfg.geometry(), SvBehavior::Reactive(truth_model), cfg.dt)
    };
    let ru = cfg.ru();
    let ellipse = cfg.sv_ellipse();
    let bounds = cfg.uncertainty_bounds();
    let mut uncertainty = TruthUncertainty::new(truth_model.idm, nominal_model.idm, cfg.gap_floor);

    let n_steps = (cfg.duration / cfg.dt).round() as usize;
    let mut z = cfg.initial_state();
    let mut records = Vec::with_capacity(n_steps + 1);
    let mut traces = Vec::with_capacity(n_steps + 1);
    let mut outcome = Outcome::Timeout;
    let mut first_violation = None;
    let mut completion_time = None;

    for k in 0..=n_steps {
        let t = k as f64 * cfg.dt;
        let h_ru_v = h_ru(&z.ev, &ru).value;
        let h_sv_v = h_sv(&z, &ellipse).value;
        let (u, diag) = ctrl.step(&z);

        let truth_accel = truth.sv_accel(&z, None);
        let gap = z.ev.x - z.sv.x;
        let dv = z.sv.v - z.ev.v;
        let delta_theta = uncertainty.record(z.sv.v, gap, dv, &bounds, cfg.dt);

        records.push(StepRecord::new(k, t, &z, &diag, truth_accel.gate, truth_accel.accel, delta_theta));
        traces.push(StepTrace { t, z, diag });

        if h_ru_v < 0.0 || h_sv_v < 0.0 {
            outcome = Outcome::Collision;
            first_violation = Some(t);
            break;
        }
        if completion_check(&z.ev, cfg.y_lower, cfg.completion_y_tol, cfg.completion_psi_tol) {
            outcome = Outcome::Completed;
            completion_time = Some(t);
            break;
        }
        if k == n_steps {
            break;
        }
        z = truth.euler_step_clamped(&z, &u, cfg.dt);
    }

    let min_h_ru = records.iter().map(|r| r.h_ru).fold(f64::INFINITY, f64::min);
    let min_h_sv = records.iter().map(|r| r.h_sv_curr).fold(f64::INFINITY, f64::min);
    let infeasible_steps = records.iter().filter(|r| !r.feasible).count();
    let result = RunResult {
        mode,
        records,
        outcome,
        first_violation,
        completion_time,
        min_h_ru,
        min_h_sv,
        infeasible_steps,
        magnitude_violations: uncertainty.magnitude_violations,
        rate_violations: uncertainty.rate_violations,
    };
    (result, traces)
}
