//! CSV step log and JSON run summary.
//!
//! The CSV has one row per control step with the columns of [`StepRecord`] in
//! declaration order. Floats are written in shortest round-trip form, optional
//! fields are empty when absent, and booleans are `true`/`false`. Model labels
//! are written as `gateway/idm`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use super::{Outcome, RunResult, ScenarioConfig};
use crate::controller::{ControllerMode, StepDiagnostics};
use crate::dynamics::JointState;

pub const SCHEMA_VERSION: u32 = 1;

/// Column order of the CSV log.
pub const CSV_COLUMNS: [&str; 39] = [
    "step",
    "t",
    "x_e",
    "y_e",
    "psi_e",
    "v_e",
    "x_s",
    "y_s",
    "v_s",
    "a_e",
    "delta_e",
    "slack_y",
    "slack_psi",
    "feasible",
    "solver_failure",
    "kkt_residual",
    "h_ru",
    "h_sv_curr",
    "h_sv_pred",
    "k_star",
    "m_star",
    "case",
    "case_pair",
    "gate_any",
    "obs_active",
    "obs_key",
    "obs_reset",
    "t_cf",
    "delta_hat",
    "e_bar",
    "braking",
    "sigma",
    "tau",
    "tau0",
    "truth_gate",
    "truth_accel",
    "delta_theta",
    "rollout_inner_infeasible",
    "sv_curr_row_slack",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub x_e: f64,
    pub y_e: f64,
    pub psi_e: f64,
    pub v_e: f64,
    pub x_s: f64,
    pub y_s: f64,
    pub v_s: f64,
    pub a_e: f64,
    pub delta_e: f64,
    pub slack_y: f64,
    pub slack_psi: f64,
    pub feasible: bool,
    pub solver_failure: bool,
    pub kkt_residual: f64,
    pub h_ru: f64,
    pub h_sv_curr: f64,
    pub h_sv_pred: f64,
    pub k_star: usize,
    pub m_star: Option<String>,
    /// 1, 2 or 3 in robust mode.
    pub case: Option<u8>,
    pub case_pair: Option<String>,
    pub gate_any: bool,
    pub obs_active: bool,
    pub obs_key: Option<String>,
    pub obs_reset: bool,
    pub t_cf: f64,
    pub delta_hat: f64,
    pub e_bar: f64,
    pub braking: bool,
    pub sigma: f64,
    pub tau: f64,
    pub tau0: f64,
    pub truth_gate: bool,
    pub truth_accel: f64,
    pub delta_theta: f64,
    pub rollout_inner_infeasible: bool,
    pub sv_curr_row_slack: f64,
}

impl StepRecord {
    pub fn new(step: usize, t: f64, z: &JointState, d: &StepDiagnostics, truth_gate: bool, truth_accel: f64, delta_theta: f64) -> Self {
        let obs = d.observer.as_ref();
        Self {
            step,
            t,
            x_e: z.ev.x,
            y_e: z.ev.y,
            psi_e: z.ev.psi,
            v_e: z.ev.v,
            x_s: z.sv.x,
            y_s: z.sv.y,
            v_s: z.sv.v,
            a_e: d.u.accel,
            delta_e: d.u.steer,
            slack_y: d.slack_y,
            slack_psi: d.slack_psi,
            feasible: d.feasible,
            solver_failure: d.solver_error.is_some(),
            kkt_residual: d.kkt_residual,
            h_ru: d.h_ru,
            h_sv_curr: d.h_sv_curr,
            h_sv_pred: d.h_sv_pred,
            k_star: d.k_star,
            m_star: d.m_star.map(|m| m.to_string()),
            case: d.case.map(|c| c.number()),
            case_pair: d.case.and_then(|c| c.pair()).map(|p| p.to_string()),
            gate_any: obs.is_some_and(|o| o.gates.iter().any(|&g| g)),
            obs_active: obs.is_some_and(|o| o.state.active),
            obs_key: obs.and_then(|o| o.key).map(|k| k.to_string()),
            obs_reset: obs.is_some_and(|o| o.reset),
            t_cf: obs.map_or(0.0, |o| o.state.t_cf),
            delta_hat: obs.map_or(0.0, |o| o.state.estimate),
            e_bar: obs.map_or(0.0, |o| o.error_bound),
            braking: obs.is_some_and(|o| o.braking),
            sigma: d.robust.sigma,
            tau: d.robust.tau,
            tau0: d.robust.tau0,
            truth_gate,
            truth_accel,
            delta_theta,
            rollout_inner_infeasible: d.rollout_inner_infeasible,
            sv_curr_row_slack: d.sv_curr_row_slack,
        }
    }
}

/// JSON run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub mode: ControllerMode,
    pub outcome: Outcome,
    pub steps: usize,
    pub first_violation: Option<f64>,
    pub completion_time: Option<f64>,
    pub min_h_ru: Option<f64>,
    pub min_h_sv: Option<f64>,
    pub infeasible_steps: usize,
    pub first_step_feasible: Option<bool>,
    pub truth_bound_violations: BoundViolations,
    pub seed: u64,
    pub config: ScenarioConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundViolations {
    pub magnitude: usize,
    pub rate: usize,
}

impl Summary {
    pub fn new(r: &RunResult, cfg: &ScenarioConfig) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        Self {
            schema_version: SCHEMA_VERSION,
            mode: r.mode,
            outcome: r.outcome,
            steps: r.records.len(),
            first_violation: r.first_violation,
            completion_time: r.completion_time,
            min_h_ru: finite(r.min_h_ru),
            min_h_sv: finite(r.min_h_sv),
            infeasible_steps: r.infeasible_steps,
            first_step_feasible: r.records.first().map(|s| s.feasible),
            truth_bound_violations: BoundViolations {
                magnitude: r.magnitude_violations,
                rate: r.rate_violations,
            },
            seed: cfg.seed,
            config: cfg.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogPaths {
    pub csv: PathBuf,
    pub summary: PathBuf,
}

/// Writes `<dir>/<mode>.csv` and `<dir>/<mode>_summary.json`.
pub fn write_log(r: &RunResult, cfg: &ScenarioConfig, dir: &Path) -> anyhow::Result<LogPaths> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    let paths = LogPaths {
        csv: dir.join(format!("{}.csv", r.mode)),
        summary: dir.join(format!("{}_summary.json", r.mode)),
    };
    write_csv(&r.records, &paths.csv)?;
    let file = File::create(&paths.summary).with_context(|| format!("creating {}", paths.summary.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &Summary::new(r, cfg)).with_context(|| format!("writing {}", paths.summary.display()))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", paths.summary.display()))?;
    Ok(paths)
}

pub fn write_csv(records: &[StepRecord], path: &Path) -> anyhow::Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).with_context(ctx)?;
    w.write_record(CSV_COLUMNS).with_context(ctx)?;
    for r in records {
        w.serialize(r).with_context(ctx)?;
    }
    w.flush().with_context(ctx)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> anyhow::Result<Vec<StepRecord>> {
    let ctx = || format!("reading {}", path.display());
    let mut rd = csv::Reader::from_path(path).with_context(ctx)?;
    let header: Vec<String> = rd.headers().with_context(ctx)?.iter().map(String::from).collect();
    if header != CSV_COLUMNS {
        anyhow::bail!("{}: unexpected header {:?}", path.display(), header);
    }
    rd.deserialize().collect::<Result<Vec<StepRecord>, _>>().with_context(ctx)
}

pub fn read_summary(path: &Path) -> anyhow::Result<Summary> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
