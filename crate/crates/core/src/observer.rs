//! Car-following mismatch observer and robust-case classification.
//!
//! The observer estimates `Δθ = a_true − a_idm(θ_nom)` from the SV speed:
//! `Δ̂θ = λ_s v_s − ξ` with `ξ̇ = λ_s (a_idm(θ_nom) + Δ̂θ)`, reset to
//! `ξ = λ_s v_s` whenever the interaction gate opens.

use serde::{Deserialize, Serialize};

use crate::driver_models::{free_accel, idm_accel, IdmParams, ModelLabel};
use crate::dynamics::{JointModel, JointState, SvBehavior};

/// Bounds `|Δθ| ≤ δ_b`, `|Δ̇θ| ≤ δ_L` and the observer gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBounds {
    pub delta_b: f64,
    pub delta_l: f64,
    pub lambda_s: f64,
}

impl Default for UncertaintyBounds {
    fn default() -> Self {
        Self {
            delta_b: 0.5,
            delta_l: 0.5,
            lambda_s: 10.0,
        }
    }
}

impl UncertaintyBounds {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("delta_b", self.delta_b), ("delta_L", self.delta_l), ("lambda_s", self.lambda_s)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    /// Whether the bound is nonincreasing in `t_cf`.
    pub fn is_monotone(&self) -> bool {
        self.delta_b >= self.delta_l / self.lambda_s
    }

    pub fn t_conv(&self) -> f64 {
        2.0 / self.lambda_s
    }

    pub fn asymptote(&self) -> f64 {
        self.delta_l / self.lambda_s
    }
}

/// `ē(t_cf) = (δ_b − δ_L/λ_s) e^{−λ_s t_cf} + δ_L/λ_s`.
pub fn error_bound(t_cf: f64, b: &UncertaintyBounds) -> f64 {
    debug_assert!(t_cf >= 0.0);
    let decay = (-b.lambda_s * t_cf).exp();
    b.delta_b * decay + b.asymptote() * (1.0 - decay)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObserverState {
    pub xi: f64,
    /// Time since the last reset.
    pub t_cf: f64,
    pub active: bool,
    /// `Δ̂θ` at the last update.
    pub estimate: f64,
    /// Steps since the last reset.
    pub steps: u32,
}

impl ObserverState {
    pub fn inactive() -> Self {
        Self::default()
    }
}

pub fn observer_reset(v_s: f64, lambda_s: f64) -> ObserverState {
    let xi = lambda_s * v_s;
    ObserverState {
        xi,
        t_cf: 0.0,
        active: true,
        estimate: lambda_s * v_s - xi,
        steps: 0,
    }
}

/// Advances the observer by one Euler step.
///
/// `a_idm_nominal` is the nominal car-following acceleration at the previous
/// sample and `v_s` the new speed measurement. Returns the new state and `Δ̂θ`.
pub fn observer_step(st: &ObserverState, v_s: f64, a_idm_nominal: f64, lambda_s: f64, dt: f64) -> (ObserverState, f64) {
    assert!(st.active, "observer stepped while inactive");
    assert!(dt > 0.0);
    let xi = st.xi + dt * lambda_s * (a_idm_nominal + st.estimate);
    let estimate = lambda_s * v_s - xi;
    let steps = st.steps + 1;
    let next = ObserverState {
        xi,
        t_cf: f64::from(steps) * dt,
        active: true,
        estimate,
        steps,
    };
    (next, estimate)
}

/// `a_idm + Δ̂θ < a_free − ε`.
pub fn braking_detected(a_idm_nominal: f64, estimate: f64, a_free: f64, epsilon: f64) -> bool {
    a_idm_nominal + estimate < a_free - epsilon
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseLabel {
    /// No interaction gate open, or observer converged without braking.
    Case1,
    /// Gate open, observer still transient.
    Case2,
    /// Observer converged and braking confirmed for the given pair.
    Case3(ModelLabel),
}

impl CaseLabel {
    pub fn number(&self) -> u8 {
        match self {
            CaseLabel::Case1 => 1,
            CaseLabel::Case2 => 2,
            CaseLabel::Case3(_) => 3,
        }
    }

    pub fn pair(&self) -> Option<ModelLabel> {
        match self {
            CaseLabel::Case3(p) => Some(*p),
            _ => None,
        }
    }
}

/// `braking` carries the observer's pair when `ℬ` holds for it.
pub fn classify_case(gates: &[bool], t_cf: f64, t_conv: f64, braking: Option<ModelLabel>) -> CaseLabel {
    if !gates.iter().any(|&g| g) {
        return CaseLabel::Case1;
    }
    if t_cf <= t_conv {
        return CaseLabel::Case2;
    }
    match braking {
        Some(pair) => CaseLabel::Case3(pair),
        None => CaseLabel::Case1,
    }
}

/// Realised `Δθ` of the truth SV and bound bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthUncertainty {
    pub theta_true: IdmParams,
    pub theta_nom: IdmParams,
    pub gap_floor: f64,
    pub trace: Vec<f64>,
    pub magnitude_violations: usize,
    pub rate_violations: usize,
}

impl TruthUncertainty {
    pub fn new(theta_true: IdmParams, theta_nom: IdmParams, gap_floor: f64) -> Self {
        Self {
            theta_true,
            theta_nom,
            gap_floor,
            trace: Vec::new(),
            magnitude_violations: 0,
            rate_violations: 0,
        }
    }

    /// Records `Δθ = a_idm(θ*) − a_idm(θ_nom)` at `(v_s, gap, Δv)`.
    pub fn record(&mut self, v_s: f64, gap: f64, dv: f64, bounds: &UncertaintyBounds, dt: f64) -> f64 {
        let d = idm_accel(v_s, gap, dv, &self.theta_true, self.gap_floor).value
            - idm_accel(v_s, gap, dv, &self.theta_nom, self.gap_floor).value;
        if d.abs() > bounds.delta_b {
            self.magnitude_violations += 1;
        }
        if let Some(prev) = self.trace.last() {
            if ((d - prev) / dt).abs() > bounds.delta_l {
                self.rate_violations += 1;
            }
        }
        self.trace.push(d);
        d
    }
}

/// Outcome of one [`GateObserver::update`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverUpdate {
    /// Gate value per catalog model.
    pub gates: Vec<bool>,
    pub key: Option<ModelLabel>,
    pub reset: bool,
    pub state: ObserverState,
    pub error_bound: f64,
    /// `a_idm(θ_key)` at the current sample.
    pub a_idm_nominal: f64,
    pub braking: bool,
    pub converged: bool,
    pub case: CaseLabel,
}

/// Single observer shared across the catalog and keyed to one pair.
///
/// The key is kept while its gate stays open. When it closes, the nominal pair
/// is chosen if its gate is open, otherwise the first open pair in catalog
/// order; switching keys resets the observer.
#[derive(Debug, Clone, PartialEq)]
pub struct GateObserver {
    pub bounds: UncertaintyBounds,
    pub epsilon: f64,
    pub nominal: ModelLabel,
    pub dt: f64,
    key: Option<usize>,
    state: ObserverState,
    last_nominal_accel: f64,
}

impl GateObserver {
    pub fn new(bounds: UncertaintyBounds, epsilon: f64, nominal: ModelLabel, dt: f64) -> Self {
        Self {
            bounds,
            epsilon,
            nominal,
            dt,
            key: None,
            state: ObserverState::inactive(),
            last_nominal_accel: 0.0,
        }
    }

    pub fn state(&self) -> &ObserverState {
        &self.state
    }

    /// Processes the measured joint state against the reactive `models`.
    pub fn update(&mut self, z: &JointState, models: &[JointModel]) -> ObserverUpdate {
        let gates: Vec<bool> = models.iter().map(|m| m.gate(z)).collect();
        let label = |i: usize| match &models[i].sv {
            SvBehavior::Reactive(m) => m,
            SvBehavior::ConstantVelocity => panic!("observer catalog must hold reactive models"),
        };

        let key = match self.key {
            Some(k) if gates[k] => Some(k),
            _ => (0..models.len())
                .find(|&i| gates[i] && label(i).label == self.nominal)
                .or_else(|| gates.iter().position(|&g| g)),
        };

        let mut reset = false;
        match key {
            None => self.state = ObserverState::inactive(),
            Some(k) if self.state.active && self.key == Some(k) => {
                let lambda = self.bounds.lambda_s;
                self.state = observer_step(&self.state, z.sv.v, self.last_nominal_accel, lambda, self.dt).0;
            }
            Some(_) => {
                self.state = observer_reset(z.sv.v, self.bounds.lambda_s);
                reset = true;
            }
        }
        self.key = key;

        let (a_nom, braking) = match key {
            Some(k) => {
                let m = label(k);
                let a = idm_accel(z.sv.v, z.ev.x - z.sv.x, z.sv.v - z.ev.v, &m.idm, models[k].gap_floor).value;
                let brake = braking_detected(a, self.state.estimate, free_accel(z.sv.v, &m.idm), self.epsilon);
                (a, brake)
            }
            None => (0.0, false),
        };
        self.last_nominal_accel = a_nom;

        let t_conv = self.bounds.t_conv();
        let converged = self.state.active && self.state.t_cf > t_conv;
        let pair = key.map(|k| label(k).label);
        let case = classify_case(&gates, self.state.t_cf, t_conv, if braking { pair } else { None });
        ObserverUpdate {
            gates,
            key: pair,
            reset,
            state: self.state,
            error_bound: if self.state.active {
                error_bound(self.state.t_cf, &self.bounds)
            } else {
                self.bounds.delta_b
            },
            a_idm_nominal: a_nom,
            braking,
            converged,
            case,
        }
    }
}
