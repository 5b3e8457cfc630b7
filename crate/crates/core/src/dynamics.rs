//! Ego-vehicle kinematics, surrounding-vehicle response and the joint
//! control-affine model `ż = F(z) + G(z)u`, with explicit-Euler stepping and
//! per-step state Jacobians.

use nalgebra::{Matrix4, SMatrix, SVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::driver_models::{free_accel_dv, idm_accel_partials, pidm_accel, DriverModel, DEFAULT_GAP_FLOOR};

pub type Vector7 = SVector<f64, 7>;
pub type Matrix7 = SMatrix<f64, 7, 7>;
pub type Matrix7x2 = SMatrix<f64, 7, 2>;
pub type Matrix4x2 = SMatrix<f64, 4, 2>;

/// Indices into the flattened joint state.
pub mod idx {
    pub const X_E: usize = 0;
    pub const Y_E: usize = 1;
    pub const PSI_E: usize = 2;
    pub const V_E: usize = 3;
    pub const X_S: usize = 4;
    pub const Y_S: usize = 5;
    pub const V_S: usize = 6;
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

impl EvState {
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.psi, self.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvInput {
    /// Longitudinal acceleration [m/s²].
    pub accel: f64,
    /// Steering angle [rad].
    pub steer: f64,
}

impl EvInput {
    pub const ZERO: EvInput = EvInput { accel: 0.0, steer: 0.0 };

    pub fn new(accel: f64, steer: f64) -> Self {
        Self { accel, steer }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.accel, self.steer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SvState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
}

/// Joint EV–SV state `z = [X_e, Y_e, ψ_e, v_e, X_s, Y_s, v_s]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct JointState {
    pub ev: EvState,
    pub sv: SvState,
}

impl JointState {
    pub fn to_vector(&self) -> Vector7 {
        Vector7::from([self.ev.x, self.ev.y, self.ev.psi, self.ev.v, self.sv.x, self.sv.y, self.sv.v])
    }

    pub fn from_vector(v: &Vector7) -> Self {
        Self {
            ev: EvState {
                x: v[0],
                y: v[1],
                psi: v[2],
                v: v[3],
            },
            sv: SvState { x: v[4], y: v[5], v: v[6] },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleGeometry {
    /// CG-to-rear-axle distance [m].
    pub l_r: f64,
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        Self { l_r: 2.0 }
    }
}

pub fn ev_drift(x: &EvState) -> Vector4<f64> {
    Vector4::new(x.v * x.psi.cos(), x.v * x.psi.sin(), 0.0, 0.0)
}

/// Small-angle input matrix `g(x)`; columns are `(a_e, δ_e)`.
pub fn ev_input_matrix(x: &EvState, geom: &VehicleGeometry) -> Matrix4x2 {
    let (s, c) = x.psi.sin_cos();
    Matrix4x2::new(
        0.0,
        -x.v * s, //
        0.0,
        x.v * c, //
        0.0,
        x.v / geom.l_r, //
        1.0,
        0.0,
    )
}

pub fn ev_derivative(x: &EvState, u: &EvInput, geom: &VehicleGeometry) -> Vector4<f64> {
    ev_drift(x) + ev_input_matrix(x, geom) * u.to_vector()
}

/// `∂(f(x) + g(x)u)/∂x` for a fixed input.
pub fn ev_state_jacobian(x: &EvState, u: &EvInput, geom: &VehicleGeometry) -> Matrix4<f64> {
    let (s, c) = x.psi.sin_cos();
    let d = u.steer;
    let mut j = Matrix4::zeros();
    j[(0, 2)] = -x.v * s - x.v * c * d;
    j[(0, 3)] = c - s * d;
    j[(1, 2)] = x.v * c - x.v * s * d;
    j[(1, 3)] = s + c * d;
    j[(2, 3)] = d / geom.l_r;
    j
}

/// How the SV's longitudinal acceleration is modelled inside the joint dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SvBehavior {
    /// Non-reactive constant-velocity SV.
    ConstantVelocity,
    /// Interaction-aware P-IDM response.
    Reactive(DriverModel),
}

/// SV acceleration with its gate value and partial derivatives
/// `(∂/∂X_e, ∂/∂v_e, ∂/∂X_s, ∂/∂v_s)` for the gate held fixed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SvAccel {
    pub accel: f64,
    pub gate: bool,
    pub overlap: bool,
    pub d_x_e: f64,
    pub d_v_e: f64,
    pub d_x_s: f64,
    pub d_v_s: f64,
}

/// The joint EV–SV model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointModel {
    pub geometry: VehicleGeometry,
    pub sv: SvBehavior,
    /// Step used by the gate's lateral predictor.
    pub predictor_dt: f64,
    /// IDM output when the longitudinal gap is not positive.
    pub gap_floor: f64,
}

impl JointModel {
    pub fn new(geometry: VehicleGeometry, sv: SvBehavior, predictor_dt: f64) -> Self {
        Self {
            geometry,
            sv,
            predictor_dt,
            gap_floor: DEFAULT_GAP_FLOOR,
        }
    }

    /// SV acceleration; `gate_override` freezes ω instead of evaluating it from `z`.
    pub fn sv_accel(&self, z: &JointState, gate_override: Option<bool>) -> SvAccel {
        let model = match &self.sv {
            SvBehavior::ConstantVelocity => return SvAccel::default(),
            SvBehavior::Reactive(m) => m,
        };
        let a = pidm_accel(&z.ev, &z.sv, model, self.predictor_dt, self.gap_floor, gate_override);
        let mut out = SvAccel {
            accel: a.accel,
            gate: a.gate,
            overlap: a.overlap,
            ..SvAccel::default()
        };
        if a.gate {
            let p = idm_accel_partials(z.sv.v, z.ev.x - z.sv.x, z.sv.v - z.ev.v, &model.idm);
            out.d_x_e = p.d_gap;
            out.d_x_s = -p.d_gap;
            out.d_v_e = p.d_v_e;
            out.d_v_s = p.d_v_s;
        } else {
            out.d_v_s = free_accel_dv(z.sv.v, &model.idm);
        }
        out
    }

    /// Gate value at `z` (always closed for the non-reactive SV).
    pub fn gate(&self, z: &JointState) -> bool {
        self.sv_accel(z, None).gate
    }

    pub fn sv_derivative(&self, z: &JointState, gate_override: Option<bool>) -> SvDerivative {
        let a = self.sv_accel(z, gate_override);
        SvDerivative {
            value: nalgebra::Vector3::new(z.sv.v, 0.0, a.accel),
            accel: a,
        }
    }

    /// Drift `F(z)`.
    pub fn drift(&self, z: &JointState, gate_override: Option<bool>) -> Vector7 {
        let f = ev_drift(&z.ev);
        let s = self.sv_derivative(z, gate_override).value;
        Vector7::from([f[0], f[1], f[2], f[3], s[0], s[1], s[2]])
    }

    /// Input matrix `G(z)`; SV rows are zero.
    pub fn input_matrix(&self, z: &JointState) -> Matrix7x2 {
        let g = ev_input_matrix(&z.ev, &self.geometry);
        let mut out = Matrix7x2::zeros();
        out.fixed_view_mut::<4, 2>(0, 0).copy_from(&g);
        out
    }

    pub fn joint_derivative(&self, z: &JointState, u: &EvInput) -> Vector7 {
        self.joint_derivative_gated(z, u, None)
    }

    pub fn joint_derivative_gated(&self, z: &JointState, u: &EvInput, gate_override: Option<bool>) -> Vector7 {
        self.drift(z, gate_override) + self.input_matrix(z) * u.to_vector()
    }

    /// `∂(F + Gu)/∂z` at fixed `u` and fixed gate.
    pub fn derivative_jacobian(&self, z: &JointState, u: &EvInput, gate_override: Option<bool>) -> Matrix7 {
        let mut j = Matrix7::zeros();
        j.fixed_view_mut::<4, 4>(0, 0)
            .copy_from(&ev_state_jacobian(&z.ev, u, &self.geometry));
        j[(idx::X_S, idx::V_S)] = 1.0;
        let a = self.sv_accel(z, gate_override);
        j[(idx::V_S, idx::X_E)] = a.d_x_e;
        j[(idx::V_S, idx::V_E)] = a.d_v_e;
        j[(idx::V_S, idx::X_S)] = a.d_x_s;
        j[(idx::V_S, idx::V_S)] = a.d_v_s;
        j
    }

    /// One explicit-Euler step.
    pub fn euler_step(&self, z: &JointState, u: &EvInput, dt: f64) -> JointState {
        self.euler_step_gated(z, u, dt, None)
    }

    pub fn euler_step_gated(&self, z: &JointState, u: &EvInput, dt: f64, gate_override: Option<bool>) -> JointState {
        let d = self.joint_derivative_gated(z, u, gate_override);
        JointState::from_vector(&(z.to_vector() + d * dt))
    }

    /// Euler step for the truth world; SV speed is clamped at zero.
    pub fn euler_step_clamped(&self, z: &JointState, u: &EvInput, dt: f64) -> JointState {
        let mut next = self.euler_step(z, u, dt);
        next.sv.v = next.sv.v.max(0.0);
        next
    }

    /// `∂(euler_step)/∂z = I + dt·∂(F + Gu)/∂z` with the gate frozen.
    pub fn step_jacobian(&self, z: &JointState, u: &EvInput, dt: f64, gate_override: Option<bool>) -> Matrix7 {
        Matrix7::identity() + self.derivative_jacobian(z, u, gate_override) * dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvDerivative {
    /// `(Ẋ_s, Ẏ_s, v̇_s)`.
    pub value: nalgebra::Vector3<f64>,
    pub accel: SvAccel,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver_models::{free_accel, idm_accel, GatewayPreset, IdmPreset, ModelLabel, PresetCatalog};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn scenario_state() -> JointState {
        JointState {
            ev: EvState {
                x: 20.0,
                y: 4.0,
                psi: 0.0,
                v: 10.0,
            },
            sv: SvState { x: 14.5, y: 0.0, v: 12.5 },
        }
    }

    fn reactive(gateway: GatewayPreset, idm: IdmPreset) -> JointModel {
        let m = PresetCatalog::default().model(ModelLabel { gateway, idm });
        JointModel::new(VehicleGeometry::default(), SvBehavior::Reactive(m), 0.1)
    }

    fn baseline() -> JointModel {
        JointModel::new(VehicleGeometry::default(), SvBehavior::ConstantVelocity, 0.1)
    }

    #[test]
    fn ev_derivative_examples() {
        let g = VehicleGeometry::default();
        let x = EvState {
            x: 0.0,
            y: 0.0,
            psi: 0.0,
            v: 10.0,
        };
        assert_eq!(ev_derivative(&x, &EvInput::ZERO, &g), Vector4::new(10.0, 0.0, 0.0, 0.0));
        assert_eq!(ev_derivative(&x, &EvInput::new(1.0, 0.0), &g), Vector4::new(10.0, 0.0, 0.0, 1.0));

        let x = EvState { psi: 0.1, ..x };
        let (v, psi, d) = (10.0_f64, 0.1_f64, 0.05_f64);
        let expected = Vector4::new(
            v * psi.cos() - v * psi.sin() * d,
            v * psi.sin() + v * psi.cos() * d,
            v / 2.0 * d,
            0.0,
        );
        let got = ev_derivative(&x, &EvInput::new(0.0, d), &g);
        assert_relative_eq!(got, expected, max_relative = 1e-14);
    }

    #[test]
    fn sv_derivative_examples() {
        let m = reactive(GatewayPreset::Cautious, IdmPreset::Conservative);
        // gate closed at the desired speed
        let mut z = scenario_state();
        z.sv.v = 10.0;
        assert_eq!(m.sv_derivative(&z, None).value, nalgebra::Vector3::new(10.0, 0.0, 0.0));
        z.sv.v = 0.0;
        assert_eq!(m.sv_derivative(&z, None).value, nalgebra::Vector3::new(0.0, 0.0, 2.0));

        // scenario start under aggressive/cooperative: gate closed → a_free(12.5)
        let m = reactive(GatewayPreset::Cooperative, IdmPreset::Aggressive);
        let z = scenario_state();
        let d = m.sv_derivative(&z, None);
        assert!(!d.accel.gate);
        assert_eq!(d.value[0], 12.5);
        assert_eq!(d.value[2], 6.0 * (1.0 - 1.25_f64.powi(4)));
        // with the EV already heading down the gate opens and IDM applies
        let mut z = z;
        z.ev.psi = -0.05;
        let d = m.sv_derivative(&z, None);
        assert!(d.accel.gate);
        let p = PresetCatalog::default().idm.aggressive;
        assert_eq!(d.value[2], idm_accel(12.5, 5.5, 2.5, &p, -9.0).value);
    }

    #[test]
    fn joint_derivative_structure() {
        let z = scenario_state();
        let m = reactive(GatewayPreset::Normal, IdmPreset::Normal);
        let d = m.joint_derivative(&z, &EvInput::ZERO);
        let f = ev_drift(&z.ev);
        let s = m.sv_derivative(&z, None).value;
        assert_eq!(d, Vector7::from([f[0], f[1], f[2], f[3], s[0], s[1], s[2]]));

        let b = baseline().joint_derivative(&z, &EvInput::new(0.3, -0.2));
        assert_eq!((b[4], b[5], b[6]), (12.5, 0.0, 0.0));
        assert_eq!(free_accel(12.5, &PresetCatalog::default().idm.normal), s[2]);
    }

    #[test]
    fn euler_step_examples() {
        let m = reactive(GatewayPreset::Normal, IdmPreset::Normal);
        let z = scenario_state();
        assert_eq!(m.euler_step(&z, &EvInput::new(0.5, 0.1), 0.0), z);
        let d = m.joint_derivative(&z, &EvInput::new(0.5, 0.1));
        let next = m.euler_step(&z, &EvInput::new(0.5, 0.1), 0.1);
        assert_relative_eq!(next.to_vector(), z.to_vector() + d * 0.1, max_relative = 1e-15);
    }

    #[test]
    fn euler_half_steps_are_second_order_close() {
        let m = reactive(GatewayPreset::Cautious, IdmPreset::Normal);
        let z = scenario_state();
        let u = EvInput::new(0.4, -0.1);
        let gap = |dt: f64| {
            let full = m.euler_step(&z, &u, dt).to_vector();
            let half = m.euler_step(&m.euler_step(&z, &u, dt / 2.0), &u, dt / 2.0).to_vector();
            (full - half).norm()
        };
        let (e1, e2) = (gap(0.02), gap(0.01));
        // halving dt quarters the one-step discrepancy
        assert_relative_eq!(e1 / e2, 4.0, max_relative = 0.05);
    }

    #[test]
    fn truth_step_clamps_speed() {
        let m = reactive(GatewayPreset::Cooperative, IdmPreset::Aggressive);
        let mut z = scenario_state();
        z.ev.psi = -0.05;
        let next = m.euler_step_clamped(&z, &EvInput::ZERO, 0.1);
        assert_eq!(next.sv.v, 0.0);
        assert!(m.euler_step(&z, &EvInput::ZERO, 0.1).sv.v < 0.0);
    }

    #[test]
    fn step_jacobian_examples() {
        let m = reactive(GatewayPreset::Normal, IdmPreset::Normal);
        let z = scenario_state();
        assert_eq!(m.step_jacobian(&z, &EvInput::new(0.1, 0.2), 0.0, None), Matrix7::identity());
        let j = baseline().derivative_jacobian(&z, &EvInput::new(0.1, 0.2), None);
        let sv_block = j.fixed_view::<3, 7>(4, 0);
        for r in 0..3 {
            for c in 0..7 {
                let expected = if (r, c) == (0, idx::V_S) { 1.0 } else { 0.0 };
                assert_eq!(sv_block[(r, c)], expected);
            }
        }
    }

    fn random_state(rng: &mut impl rand::Rng) -> (JointState, EvInput) {
        let z = JointState {
            ev: EvState {
                x: rng.gen_range(15.0..30.0),
                y: rng.gen_range(-1.0..5.0),
                psi: rng.gen_range(-0.6..0.6),
                v: rng.gen_range(2.0..15.0),
            },
            sv: SvState {
                x: rng.gen_range(0.0..14.0),
                y: rng.gen_range(-0.5..0.5),
                v: rng.gen_range(2.0..15.0),
            },
        };
        (z, EvInput::new(rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn step_jacobian_matches_central_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let models: Vec<JointModel> = PresetCatalog::default()
            .models()
            .into_iter()
            .map(|d| JointModel::new(VehicleGeometry::default(), SvBehavior::Reactive(d), 0.1))
            .chain(std::iter::once(baseline()))
            .collect();
        for i in 0..100 {
            let model = &models[i % models.len()];
            let (z, u) = random_state(&mut rng);
            let gate = model.gate(&z);
            let j = model.step_jacobian(&z, &u, 0.1, Some(gate));
            let z0 = z.to_vector();
            let h = 1e-6;
            for c in 0..7 {
                let mut zp = z0;
                let mut zm = z0;
                zp[c] += h;
                zm[c] -= h;
                let fp = model
                    .euler_step_gated(&JointState::from_vector(&zp), &u, 0.1, Some(gate))
                    .to_vector();
                let fm = model
                    .euler_step_gated(&JointState::from_vector(&zm), &u, 0.1, Some(gate))
                    .to_vector();
                let col = (fp - fm) / (2.0 * h);
                let err = (col - j.column(c)).norm() / j.column(c).norm().max(1.0);
                assert!(err <= 1e-5, "state {i} column {c}: rel err {err}");
            }
        }
    }

    proptest! {
        #[test]
        fn flatten_round_trip(v in proptest::array::uniform7(-1e6..1e6f64)) {
            let v = Vector7::from(v);
            prop_assert_eq!(JointState::from_vector(&v).to_vector(), v);
        }

        #[test]
        fn affine_in_input(
            psi in -1.0..1.0f64, vel in 0.0..20.0f64,
            a1 in -5.0..5.0f64, d1 in -1.8..1.8f64, a2 in -5.0..5.0f64, d2 in -1.8..1.8f64,
            a3 in -5.0..5.0f64, d3 in -1.8..1.8f64,
        ) {
            let m = reactive(GatewayPreset::Normal, IdmPreset::Aggressive);
            let mut z = scenario_state();
            z.ev.psi = psi;
            z.ev.v = vel;
            let u1 = EvInput::new(a1, d1);
            let sum = |x: EvInput, y: EvInput| EvInput::new(x.accel + y.accel, x.steer + y.steer);
            let diff_a = m.joint_derivative(&z, &sum(u1, EvInput::new(a2, d2))) - m.joint_derivative(&z, &EvInput::new(a2, d2));
            let diff_b = m.joint_derivative(&z, &sum(u1, EvInput::new(a3, d3))) - m.joint_derivative(&z, &EvInput::new(a3, d3));
            prop_assert!((diff_a - diff_b).norm() <= 1e-9 * (1.0 + diff_a.norm()));
            let g = m.input_matrix(&z);
            for r in 4..7 {
                prop_assert_eq!(g[(r, 0)], 0.0);
                prop_assert_eq!(g[(r, 1)], 0.0);
            }
        }
    }
}
