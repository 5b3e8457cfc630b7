//! Surrounding-vehicle longitudinal behaviour: IDM, the predictive P-IDM
//! leader gate, and the preset catalog used by the multi-model rollouts.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::dynamics::{EvState, SvState};

/// IDM parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Maximum acceleration [m/s²].
    pub a_max: f64,
    /// Comfortable deceleration [m/s²].
    pub b: f64,
    /// Standstill distance [m].
    pub s0: f64,
    /// Desired time headway [s].
    #[serde(rename = "T")]
    pub time_headway: f64,
    /// Desired speed [m/s].
    #[serde(rename = "v0")]
    pub v_star: f64,
    /// Acceleration exponent. Only 4 is supported.
    #[serde(rename = "delta")]
    pub delta_exp: f64,
}

impl IdmParams {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("a_max", self.a_max),
            ("b", self.b),
            ("s0", self.s0),
            ("T", self.time_headway),
            ("v0", self.v_star),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(format!("{name} must be positive and finite, got {value}"));
            }
        }
        if self.delta_exp != 4.0 {
            return Err(format!(
                "delta must be 4 (the acceleration law uses a fixed quartic), got {}",
                self.delta_exp
            ));
        }
        Ok(())
    }

    fn interaction_scale(&self) -> f64 {
        2.0 * (self.a_max * self.b).sqrt()
    }

    /// Desired minimum gap `s*(v_s, Δv)`.
    pub fn desired_gap(&self, v_s: f64, dv: f64) -> f64 {
        self.s0 + v_s * self.time_headway + v_s * dv / self.interaction_scale()
    }
}

/// P-IDM gateway: anticipation horizon and cooperation threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatewayParams {
    #[serde(rename = "N_p")]
    pub horizon_steps: u32,
    #[serde(rename = "c")]
    pub threshold: f64,
}

impl GatewayParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.threshold.is_finite() && self.threshold > 0.0) {
            return Err(format!("c must be positive, got {}", self.threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdmPreset {
    Conservative,
    Normal,
    Aggressive,
}

impl IdmPreset {
    pub const ALL: [IdmPreset; 3] = [Self::Conservative, Self::Normal, Self::Aggressive];

    pub fn name(self) -> &'static str {
        match self {
            Self::Conservative => "conservative",
            Self::Normal => "normal",
            Self::Aggressive => "aggressive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayPreset {
    Cautious,
    Normal,
    Cooperative,
}

impl GatewayPreset {
    pub const ALL: [GatewayPreset; 3] = [Self::Cautious, Self::Normal, Self::Cooperative];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cautious => "cautious",
            Self::Normal => "normal",
            Self::Cooperative => "cooperative",
        }
    }
}

/// Model index `(i, j)`: gateway preset `i` combined with IDM preset `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelLabel {
    pub gateway: GatewayPreset,
    pub idm: IdmPreset,
}

impl fmt::Display for ModelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.gateway.name(), self.idm.name())
    }
}

/// One complete SV driver description.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverModel {
    pub idm: IdmParams,
    pub gateway: GatewayParams,
    pub label: ModelLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmPresets {
    pub conservative: IdmParams,
    pub normal: IdmParams,
    pub aggressive: IdmParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatewayPresets {
    pub cautious: GatewayParams,
    pub normal: GatewayParams,
    pub cooperative: GatewayParams,
}

/// The three IDM presets and three gateway presets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresetCatalog {
    pub idm: IdmPresets,
    pub gateway: GatewayPresets,
}

impl Default for PresetCatalog {
    fn default() -> Self {
        let idm = |a_max, b| IdmParams {
            a_max,
            b,
            s0: 10.0,
            time_headway: 1.5,
            v_star: 10.0,
            delta_exp: 4.0,
        };
        let gw = |horizon_steps, threshold| GatewayParams { horizon_steps, threshold };
        Self {
            idm: IdmPresets {
                conservative: idm(2.0, 3.0),
                normal: idm(4.0, 5.0),
                aggressive: idm(6.0, 6.0),
            },
            gateway: GatewayPresets {
                cautious: gw(10, 1.0),
                normal: gw(20, 2.0),
                cooperative: gw(40, 3.0),
            },
        }
    }
}

impl PresetCatalog {
    pub fn idm(&self, preset: IdmPreset) -> IdmParams {
        match preset {
            IdmPreset::Conservative => self.idm.conservative,
            IdmPreset::Normal => self.idm.normal,
            IdmPreset::Aggressive => self.idm.aggressive,
        }
    }

    pub fn gateway(&self, preset: GatewayPreset) -> GatewayParams {
        match preset {
            GatewayPreset::Cautious => self.gateway.cautious,
            GatewayPreset::Normal => self.gateway.normal,
            GatewayPreset::Cooperative => self.gateway.cooperative,
        }
    }

    pub fn model(&self, label: ModelLabel) -> DriverModel {
        DriverModel {
            idm: self.idm(label.idm),
            gateway: self.gateway(label.gateway),
            label,
        }
    }

    /// All nine models in declaration order: gateway-major, IDM-minor.
    pub fn models(&self) -> Vec<DriverModel> {
        GatewayPreset::ALL
            .iter()
            .flat_map(|&gateway| IdmPreset::ALL.iter().map(move |&idm| ModelLabel { gateway, idm }))
            .map(|label| self.model(label))
            .collect()
    }

    pub fn validate(&self) -> Result<(), String> {
        for p in IdmPreset::ALL {
            self.idm(p).validate().map_err(|e| format!("idm.{}: {e}", p.name()))?;
        }
        for g in GatewayPreset::ALL {
            self.gateway(g).validate().map_err(|e| format!("gateway.{}: {e}", g.name()))?;
        }
        Ok(())
    }
}

/// Deceleration returned by the IDM when the gap to the leader is not positive.
pub const DEFAULT_GAP_FLOOR: f64 = -9.0;

/// IDM acceleration together with a flag raised when the gap was not positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdmAccel {
    pub value: f64,
    pub overlap: bool,
}

pub fn free_accel(v_s: f64, p: &IdmParams) -> f64 {
    p.a_max * (1.0 - (v_s / p.v_star).powi(4))
}

/// `∂a_free/∂v_s`.
pub fn free_accel_dv(v_s: f64, p: &IdmParams) -> f64 {
    -4.0 * p.a_max * v_s.powi(3) / p.v_star.powi(4)
}

/// Car-following IDM acceleration with `dv = v_s − v_e` the approach speed.
///
/// A non-positive gap means the two vehicles overlap longitudinally; the law is
/// undefined there and `gap_floor` is returned instead.
pub fn idm_accel(v_s: f64, gap: f64, dv: f64, p: &IdmParams, gap_floor: f64) -> IdmAccel {
    if gap <= 0.0 {
        log::warn!("IDM evaluated with non-positive gap {gap:.3} m; saturating at {gap_floor}");
        return IdmAccel {
            value: gap_floor,
            overlap: true,
        };
    }
    let ratio = p.desired_gap(v_s, dv) / gap;
    IdmAccel {
        value: p.a_max * (1.0 - (v_s / p.v_star).powi(4) - ratio * ratio),
        overlap: false,
    }
}

/// Partial derivatives of the IDM acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IdmPartials {
    pub d_v_s: f64,
    pub d_v_e: f64,
    pub d_gap: f64,
}

pub fn idm_accel_partials(v_s: f64, gap: f64, dv: f64, p: &IdmParams) -> IdmPartials {
    if gap <= 0.0 {
        return IdmPartials::default();
    }
    let scale = p.interaction_scale();
    let s_star = p.desired_gap(v_s, dv);
    let ds_dvs = p.time_headway + (dv + v_s) / scale;
    let ds_dve = -v_s / scale;
    let k = -2.0 * p.a_max * s_star / (gap * gap);
    IdmPartials {
        d_v_s: free_accel_dv(v_s, p) + k * ds_dvs,
        d_v_e: k * ds_dve,
        d_gap: 2.0 * p.a_max * s_star * s_star / gap.powi(3),
    }
}

/// EV lateral position `N_p` steps ahead under constant heading and speed.
pub fn predicted_lateral(x: &EvState, horizon_steps: u32, dt: f64) -> f64 {
    x.y + f64::from(horizon_steps) * dt * x.v * x.psi.sin()
}

/// Leader gate ω: the EV is ahead of the SV and predicted to intrude into its lane.
pub fn gate(x: &EvState, xs: &SvState, gw: &GatewayParams, dt: f64) -> bool {
    x.x > xs.x && (predicted_lateral(x, gw.horizon_steps, dt) - xs.y).abs() < gw.threshold
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidmAccel {
    pub accel: f64,
    pub gate: bool,
    pub overlap: bool,
}

/// P-IDM acceleration. The gate is evaluated from the state unless `gate_override`
/// pins it.
pub fn pidm_accel(x: &EvState, xs: &SvState, model: &DriverModel, dt: f64, gap_floor: f64, gate_override: Option<bool>) -> PidmAccel {
    let omega = gate_override.unwrap_or_else(|| gate(x, xs, &model.gateway, dt));
    if omega {
        let a = idm_accel(xs.v, x.x - xs.x, xs.v - x.v, &model.idm, gap_floor);
        PidmAccel {
            accel: a.value,
            gate: true,
            overlap: a.overlap,
        }
    } else {
        PidmAccel {
            accel: free_accel(xs.v, &model.idm),
            gate: false,
            overlap: false,
        }
    }
}
