//! Interaction-aware predictive control barrier functions for an emergency
//! lane change between an ego vehicle (EV), one reactive surrounding vehicle
//! (SV) and a static road user (RU).
//!
//! The crate provides the joint EV–SV model, P-IDM driver models, barrier and
//! Lyapunov functions, finite-horizon predictive barriers with chained
//! Jacobians, a gate-activated disturbance observer, the per-step QPs for the
//! baseline, nominal and robust controllers, and the closed-loop scenario.

pub mod barriers;
pub mod controller;
pub mod driver_models;
pub mod dynamics;
pub mod observer;
pub mod qp;
pub mod rollout;
pub mod sim;
