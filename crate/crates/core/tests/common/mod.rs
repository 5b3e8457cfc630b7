#![allow(dead_code)]

use lanecbf::barriers::RuConfig;
use lanecbf::dynamics::{EvState, JointModel, JointState, SvBehavior, SvState};
use lanecbf::qp::DenseQp;
use lanecbf::rollout::{rollout, RolloutConfig, RolloutOptions};
use lanecbf::sim::ScenarioConfig;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Joint state near the emergency lane-change geometry: EV between the
/// lanes ahead of the SV, RU further ahead in the upper lane. States whose
/// unclamped rollouts leave the physical range (negative SV speed or
/// overflow under any catalog model) are redrawn.
pub fn random_state(rng: &mut impl Rng) -> JointState {
    let s = scene();
    loop {
        let x_e = rng.gen_range(12.0..24.0);
        let z = JointState {
            ev: EvState {
                x: x_e,
                y: rng.gen_range(0.5..4.0),
                psi: rng.gen_range(-0.35..0.1),
                v: rng.gen_range(8.0..13.0),
            },
            sv: SvState {
                x: x_e - rng.gen_range(6.0..18.0),
                y: rng.gen_range(-0.3..0.3),
                v: rng.gen_range(8.0..13.0),
            },
        };
        let physical = s.catalog.iter().all(|m| {
            rollout(&z, m, &s.rollout, &s.ru, &RolloutOptions::default())
                .states
                .iter()
                .all(|x| x.is_finite() && x.sv.v >= 0.0)
        });
        if physical {
            return z;
        }
    }
}

pub struct Scene {
    pub cfg: ScenarioConfig,
    pub rollout: RolloutConfig,
    pub ru: RuConfig,
    pub catalog: Vec<JointModel>,
}

pub fn scene() -> Scene {
    let cfg = ScenarioConfig::default();
    let geom = cfg.geometry();
    let catalog = cfg
        .presets
        .models()
        .into_iter()
        .map(|m| JointModel {
            gap_floor: cfg.gap_floor,
            ..JointModel::new(geom, SvBehavior::Reactive(m), cfg.dt)
        })
        .collect();
    Scene {
        rollout: cfg.rollout_config(),
        ru: cfg.ru(),
        catalog,
        cfg,
    }
}

/// `a·lon² + b·lat² − 1` with the relative position rotated into the EV frame.
pub fn ellipse_value(z: &JointState, r_a: f64, r_b: f64) -> f64 {
    let (dx, dy) = (z.sv.x - z.ev.x, z.sv.y - z.ev.y);
    let lon = z.ev.psi.cos() * dx + z.ev.psi.sin() * dy;
    let lat = z.ev.psi.cos() * dy - z.ev.psi.sin() * dx;
    (lon / r_a).powi(2) + (lat / r_b).powi(2) - 1.0
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub objective: f64,
    pub active: Vec<usize>,
}

fn subsets(m: usize, max: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().map_or(0, |&l| l + 1);
            for i in start..m {
                let mut t = s.clone();
                t.push(i);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Exhaustive active-set enumeration: every row subset of size at most `n`
/// is tried as the active set of the equality-constrained KKT system; the
/// best primal- and dual-feasible point wins. `None` means no KKT point
/// exists, i.e. the QP is infeasible.
pub fn enumerate_qp(qp: &DenseQp, tol: f64) -> Option<OracleSolution> {
    let n = qp.hessian.nrows();
    let m = qp.rows.nrows();
    let mut best: Option<OracleSolution> = None;
    for s in subsets(m, n) {
        let k = s.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&qp.linear));
        for (j, &i) in s.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = qp.rows[(i, c)];
                kkt[(c, n + j)] = -qp.rows[(i, c)];
            }
            rhs[n + j] = qp.rhs[i];
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        if (&kkt * &sol - &rhs).amax() > 1e-9 * (1.0 + rhs.amax()) || !sol.iter().all(|v| v.is_finite()) {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        let mut lambda = DVector::zeros(m);
        for (j, &i) in s.iter().enumerate() {
            lambda[i] = sol[n + j];
        }
        let slack = &qp.rows * &x - &qp.rhs;
        let primal_ok = slack.iter().zip(qp.rhs.iter()).all(|(&sl, &b)| sl >= -tol * (1.0 + b.abs()));
        let dual_ok = lambda.iter().all(|&l| l >= -tol);
        if !(primal_ok && dual_ok) {
            continue;
        }
        let objective = 0.5 * x.dot(&(&qp.hessian * &x)) + qp.linear.dot(&x);
        if best.as_ref().is_none_or(|b| objective < b.objective) {
            best = Some(OracleSolution {
                x,
                lambda,
                objective,
                active: s,
            });
        }
    }
    best
}

/// Largest of the stationarity, primal, dual and complementarity residuals.
pub fn kkt_max(qp: &DenseQp, x: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    let grad = &qp.hessian * x + &qp.linear - qp.rows.transpose() * lambda;
    let slack = &qp.rows * x - &qp.rhs;
    let mut r = grad.amax();
    for i in 0..slack.len() {
        r = r.max(-slack[i]).max(-lambda[i]).max((lambda[i] * slack[i]).abs());
    }
    r
}
