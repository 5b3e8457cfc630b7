//! Scenario configuration loaded from TOML.

use std::path::Path;

use anyhow::{bail, Context};
use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::barriers::{ClassK, EllipseParams, RuConfig};
use crate::controller::{ControllerConfig, QpWeights};
use crate::driver_models::{GatewayPreset, IdmPreset, ModelLabel, PresetCatalog, DEFAULT_GAP_FLOOR};
use crate::dynamics::{EvState, JointState, SvState, VehicleGeometry};
use crate::observer::UncertaintyBounds;
use crate::rollout::RolloutConfig;

/// Every scenario, controller and robust-design parameter. Missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub dt: f64,
    pub duration: f64,
    pub seed: u64,

    pub y_upper: f64,
    pub y_lower: f64,
    pub ev_x0: f64,
    pub ev_psi0: f64,
    pub v_e0: f64,
    /// SV start relative to the EV (`X_s(0) = X_e(0) + sv_dx0`), in the lower lane.
    pub sv_dx0: f64,
    pub v_s0: f64,
    /// RU position relative to the EV start, in the upper lane.
    pub ru_dx0: f64,
    pub l_r: f64,

    pub r_ru_a: f64,
    pub r_ru_b: f64,
    pub r_sv_a: f64,
    pub r_sv_b: f64,

    /// Diagonal of the input cost `Q`.
    pub q_accel: f64,
    pub q_steer: f64,
    pub p_y: f64,
    pub p_psi: f64,
    pub kappa_y: f64,
    pub kappa_psi: f64,
    pub kappa_sv: f64,
    pub kappa_ru: f64,
    pub horizon: usize,
    pub h_delta: f64,
    pub steer_min: f64,
    pub steer_max: f64,
    /// `[min, max]` clamp on `a_e`; `[]` leaves it unbounded.
    #[serde(with = "accel_bounds_repr")]
    pub accel_bounds: Option<[f64; 2]>,
    pub qp_tol: f64,

    pub lambda_s: f64,
    pub delta_b: f64,
    pub delta_l: f64,
    pub epsilon: f64,
    pub gap_floor: f64,

    pub truth_gateway: GatewayPreset,
    pub truth_idm: IdmPreset,
    pub nominal_gateway: GatewayPreset,
    pub nominal_idm: IdmPreset,

    pub completion_y_tol: f64,
    pub completion_psi_tol: f64,

    pub presets: PresetCatalog,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            duration: 8.0,
            seed: 0,
            y_upper: 4.0,
            y_lower: 0.0,
            ev_x0: 20.0,
            ev_psi0: 0.0,
            v_e0: 10.0,
            sv_dx0: -5.5,
            v_s0: 12.5,
            ru_dx0: 6.0,
            l_r: 2.0,
            r_ru_a: 2.0,
            r_ru_b: 2.0,
            r_sv_a: 4.5,
            r_sv_b: 2.5,
            q_accel: 1.0,
            q_steer: 1.0,
            p_y: 25.0,
            p_psi: 15.0,
            kappa_y: 1.5,
            kappa_psi: 1.5,
            kappa_sv: 5.0,
            kappa_ru: 10.0,
            horizon: 20,
            h_delta: 1.0,
            steer_min: -1.8,
            steer_max: 1.8,
            accel_bounds: Some([-9.0, 9.0]),
            qp_tol: 1e-10,
            lambda_s: 10.0,
            delta_b: 0.5,
            delta_l: 0.5,
            epsilon: 0.1,
            gap_floor: DEFAULT_GAP_FLOOR,
            truth_gateway: GatewayPreset::Cautious,
            truth_idm: IdmPreset::Conservative,
            nominal_gateway: GatewayPreset::Cooperative,
            nominal_idm: IdmPreset::Aggressive,
            completion_y_tol: 0.2,
            completion_psi_tol: 0.05,
            presets: PresetCatalog::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(s).context("parsing scenario config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Returns a copy with the dotted `key` set to the TOML literal `value`.
    pub fn with_override(&self, key: &str, value: &str) -> anyhow::Result<Self> {
        let mut root = toml::Value::try_from(self).context("serializing config")?;
        let parsed: toml::Value = format!("v = {value}")
            .parse::<toml::Table>()
            .map(|mut t| t.remove("v").expect("key present"))
            .or_else(|_| Ok::<_, anyhow::Error>(toml::Value::String(value.to_string())))?;
        let (parents, leaf) = match key.rsplit_once('.') {
            Some((p, l)) => (p.split('.').collect::<Vec<_>>(), l),
            None => (Vec::new(), key),
        };
        let mut node = &mut root;
        for part in parents {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .with_context(|| format!("unknown config key `{key}`"))?;
        }
        let table = node.as_table_mut().with_context(|| format!("`{key}` does not name a table path"))?;
        // optional keys are absent when unset; unknown names fail on deserialization
        let v = match table.get(leaf) {
            Some(slot) => coerce(slot, parsed),
            None => parsed,
        };
        table.insert(leaf.to_string(), v);
        let cfg: Self = root.try_into().with_context(|| format!("applying `{key} = {value}`"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let positive = [
            ("dt", self.dt),
            ("duration", self.duration),
            ("l_r", self.l_r),
            ("r_ru_a", self.r_ru_a),
            ("r_ru_b", self.r_ru_b),
            ("r_sv_a", self.r_sv_a),
            ("r_sv_b", self.r_sv_b),
            ("q_accel", self.q_accel),
            ("q_steer", self.q_steer),
            ("p_y", self.p_y),
            ("p_psi", self.p_psi),
            ("kappa_y", self.kappa_y),
            ("kappa_psi", self.kappa_psi),
            ("kappa_sv", self.kappa_sv),
            ("kappa_ru", self.kappa_ru),
            ("h_delta", self.h_delta),
            ("qp_tol", self.qp_tol),
            ("lambda_s", self.lambda_s),
            ("delta_b", self.delta_b),
            ("delta_l", self.delta_l),
            ("epsilon", self.epsilon),
            ("completion_y_tol", self.completion_y_tol),
            ("completion_psi_tol", self.completion_psi_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                bail!("{name} must be positive and finite, got {v}");
            }
        }
        if self.horizon == 0 {
            bail!("horizon must be at least 1");
        }
        if self.steer_min.partial_cmp(&self.steer_max) != Some(std::cmp::Ordering::Less) {
            bail!("steer_min must be below steer_max");
        }
        if let Some([lo, hi]) = self.accel_bounds {
            if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                bail!("accel_bounds must be finite with min < max, got [{lo}, {hi}]");
            }
        }
        if self.v_e0 < 0.0 || self.v_s0 < 0.0 {
            bail!("initial speeds must be nonnegative");
        }
        if !self.gap_floor.is_finite() {
            bail!("gap_floor must be finite");
        }
        self.presets.validate().map_err(anyhow::Error::msg)?;
        let bounds = self.uncertainty_bounds();
        bounds.validate().map_err(anyhow::Error::msg)?;
        if !bounds.is_monotone() {
            log::warn!(
                "delta_b = {} < delta_L/lambda_s = {}: the observer error bound grows after reset",
                self.delta_b,
                bounds.asymptote()
            );
        }
        Ok(())
    }

    pub fn geometry(&self) -> VehicleGeometry {
        VehicleGeometry { l_r: self.l_r }
    }

    pub fn ru(&self) -> RuConfig {
        RuConfig {
            x: self.ev_x0 + self.ru_dx0,
            y: self.y_upper,
            ellipse: EllipseParams::new(self.r_ru_a, self.r_ru_b),
        }
    }

    pub fn initial_state(&self) -> JointState {
        JointState {
            ev: EvState {
                x: self.ev_x0,
                y: self.y_upper,
                psi: self.ev_psi0,
                v: self.v_e0,
            },
            sv: SvState {
                x: self.ev_x0 + self.sv_dx0,
                y: self.y_lower,
                v: self.v_s0,
            },
        }
    }

    pub fn truth_label(&self) -> ModelLabel {
        ModelLabel {
            gateway: self.truth_gateway,
            idm: self.truth_idm,
        }
    }

    pub fn nominal_label(&self) -> ModelLabel {
        ModelLabel {
            gateway: self.nominal_gateway,
            idm: self.nominal_idm,
        }
    }

    pub fn uncertainty_bounds(&self) -> UncertaintyBounds {
        UncertaintyBounds {
            delta_b: self.delta_b,
            delta_l: self.delta_l,
            lambda_s: self.lambda_s,
        }
    }

    pub fn sv_ellipse(&self) -> EllipseParams {
        EllipseParams::new(self.r_sv_a, self.r_sv_b)
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            horizon: self.horizon,
            dt: self.dt,
            h_delta: self.h_delta,
            p_y: self.p_y,
            p_psi: self.p_psi,
            alpha_y: ClassK::Linear(self.kappa_y),
            alpha_psi: ClassK::Linear(self.kappa_psi),
            alpha_ru: ClassK::Linear(self.kappa_ru),
            steer_bounds: (self.steer_min, self.steer_max),
            y_target: self.y_lower,
            sv_ellipse: self.sv_ellipse(),
        }
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            weights: QpWeights {
                q: Matrix2::new(self.q_accel, 0.0, 0.0, self.q_steer),
                p_y: self.p_y,
                p_psi: self.p_psi,
            },
            alpha_sv: ClassK::Linear(self.kappa_sv),
            alpha_ru: ClassK::Linear(self.kappa_ru),
            alpha_y: ClassK::Linear(self.kappa_y),
            alpha_psi: ClassK::Linear(self.kappa_psi),
            steer_bounds: (self.steer_min, self.steer_max),
            accel_bounds: self.accel_bounds.map(|[lo, hi]| (lo, hi)),
            y_target: self.y_lower,
            sv_ellipse: self.sv_ellipse(),
            rollout: self.rollout_config(),
            qp_tol: self.qp_tol,
            epsilon: self.epsilon,
            bounds: self.uncertainty_bounds(),
        }
    }
}

mod accel_bounds_repr {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<[f64; 2]>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().flatten())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<[f64; 2]>, D::Error> {
        match Vec::<f64>::deserialize(d)?.as_slice() {
            [] => Ok(None),
            &[lo, hi] => Ok(Some([lo, hi])),
            other => Err(D::Error::invalid_length(other.len(), &"an empty array or [min, max]")),
        }
    }
}

/// Integers written where floats are expected (and vice versa) are converted
/// to the slot's type.
fn coerce(slot: &toml::Value, v: toml::Value) -> toml::Value {
    match (slot, &v) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        (toml::Value::Integer(_), toml::Value::Float(f)) if f.fract() == 0.0 => toml::Value::Integer(*f as i64),
        _ => v,
    }
}
