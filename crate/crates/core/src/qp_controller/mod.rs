//! Slack-relaxed QP that turns a commanded EE twist into whole-body joint
//! velocities.
//!
//! Decision vector: `x = (ω, v, q̇_arm, δ)` with `δ ∈ R⁶` the twist slack.
//! The cost pulls toward small, error-adaptive weighted joint velocities,
//! turns the base toward the EE and climbs manipulability; the equality keeps
//! `J q̇ + δ = ν`. Inequalities are velocity dampers on arm joint limits and
//! one avoidance row per near body, `-∇ζ_kᵀ q̇ ≤ ξ (ζ_k − ψ)`.

mod solver;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use solver::{kkt_residuals, solve_qp, KktResiduals, QpProblem, QpSolution, QpStatus, SolverSettings};

use crate::error::{Error, Result};
use crate::kinematics::{base_to_ee_angle, manipulability, whole_body_jacobian, Configuration, JointVelocity, RobotModel, Twist};
use crate::perception::ClearanceSet;

pub const SLACK_DIM: usize = 6;
const SLACK_BOUND: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Quadratic weights on the six slack entries.
    pub slack_weights: [f64; 6],
    /// Clamp `[min, max]` for the error-adaptive joint weights.
    pub weight_clamp: [f64; 2],
    pub heading_gain: f64,
    /// Damper gain, 1/s.
    pub damper_gain: f64,
    /// Joint-limit influence distance, rad.
    pub influence: f64,
    /// Joint-limit stop distance, rad.
    pub stop: f64,
    /// Desired minimum obstacle distance, m.
    pub psi: f64,
    /// Avoidance gain, 1/s.
    pub avoidance_gain: f64,
    /// Avoidance rows are emitted below `psi + activation_margin`.
    pub activation_margin: f64,
    /// Control period, s.
    pub dt: f64,
    pub solver: SolverSettings,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            slack_weights: [1e4; 6],
            weight_clamp: [0.01, 100.0],
            heading_gain: 0.5,
            damper_gain: 1.0,
            influence: 0.35,
            stop: 0.05,
            psi: 0.1,
            avoidance_gain: 1.0,
            activation_margin: 0.5,
            dt: 0.05,
            solver: SolverSettings::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                path: "<controller>".into(),
                line: 0,
                field: format!("controller.{field}"),
                message: message.into(),
            })
        };
        if self.slack_weights.iter().any(|w| !(*w > 0.0)) {
            return bad("slack_weights", "weights must be positive");
        }
        if !(self.weight_clamp[0] > 0.0 && self.weight_clamp[0] < self.weight_clamp[1]) {
            return bad("weight_clamp", "need 0 < min < max");
        }
        for (name, v) in [
            ("heading_gain", self.heading_gain),
            ("damper_gain", self.damper_gain),
            ("influence", self.influence),
            ("avoidance_gain", self.avoidance_gain),
            ("dt", self.dt),
            ("psi", self.psi),
        ] {
            if !(v > 0.0) {
                return bad(name, "must be positive");
            }
        }
        if !(self.stop >= 0.0 && self.stop < self.influence) {
            return bad("stop", "stop distance must be below the influence distance");
        }
        Ok(())
    }

    fn clamp_weight(&self, w: f64) -> f64 {
        if w.is_nan() {
            return self.weight_clamp[1];
        }
        w.clamp(self.weight_clamp[0], self.weight_clamp[1])
    }
}

/// Builds the per-tick QP. `dev_norm` is the EE-to-goal distance.
pub fn build_qp(
    cfg: &ControllerConfig,
    model: &RobotModel,
    q: &Configuration,
    twist: &Twist,
    clearances: &ClearanceSet,
    dev_norm: f64,
) -> QpProblem {
    let nq = model.dof();
    let n = nq + SLACK_DIM;
    let na = model.arm_dof();

    let mut h = DMatrix::zeros(n, n);
    let base_w = cfg.clamp_weight(1.0 / dev_norm);
    let arm_w = cfg.clamp_weight(dev_norm);
    h[(0, 0)] = base_w;
    h[(1, 1)] = base_w;
    for i in 0..na {
        h[(2 + i, 2 + i)] = arm_w;
    }
    for i in 0..SLACK_DIM {
        h[(nq + i, nq + i)] = cfg.slack_weights[i];
    }

    let mut c = DVector::zeros(n);
    c[0] = -cfg.heading_gain * base_to_ee_angle(model, q);
    let manip = manipulability(model, &q.arm);
    for i in 0..na {
        c[2 + i] = -manip.gradient[i];
    }

    let jac = whole_body_jacobian(model, q);
    let mut a_eq = DMatrix::zeros(6, n);
    a_eq.view_mut((0, 0), (6, nq)).copy_from(&jac);
    for i in 0..SLACK_DIM {
        a_eq[(i, nq + i)] = 1.0;
    }
    let b_eq = twist.to_vector().into_owned();
    let b_eq = DVector::from_column_slice(b_eq.as_slice());

    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let span = cfg.influence - cfg.stop;
    for (i, j) in model.joints.iter().enumerate() {
        let to_upper = j.upper() - q.arm[i];
        if to_upper < cfg.influence {
            let mut r = DVector::zeros(n);
            r[2 + i] = 1.0;
            rows.push((r, cfg.damper_gain * (to_upper - cfg.stop) / span));
        }
        let to_lower = q.arm[i] - j.lower();
        if to_lower < cfg.influence {
            let mut r = DVector::zeros(n);
            r[2 + i] = -1.0;
            rows.push((r, cfg.damper_gain * (to_lower - cfg.stop) / span));
        }
    }
    let activation = cfg.psi + cfg.activation_margin;
    for k in 0..clearances.distances.len() {
        let zeta = clearances.distances[k];
        let grad = clearances.gradients.row(k);
        if zeta >= activation || grad.amax() == 0.0 {
            continue;
        }
        let mut r = DVector::zeros(n);
        for j in 0..nq {
            r[j] = -grad[j];
        }
        rows.push((r, cfg.avoidance_gain * (zeta - cfg.psi)));
    }
    let mut a_ineq = DMatrix::zeros(rows.len(), n);
    let mut b_ineq = DVector::zeros(rows.len());
    for (i, (r, b)) in rows.into_iter().enumerate() {
        a_ineq.row_mut(i).copy_from(&r.transpose());
        b_ineq[i] = b;
    }

    let limits = model.velocity_limits();
    let mut lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    for i in 0..nq {
        lower[i] = -limits[i];
        upper[i] = limits[i];
    }
    for i in nq..n {
        lower[i] = -SLACK_BOUND;
        upper[i] = SLACK_BOUND;
    }
    QpProblem {
        h,
        c,
        a_eq,
        b_eq,
        a_ineq,
        b_ineq,
        lower,
        upper,
    }
}

#[derive(Clone, Debug)]
pub struct ControlOutput {
    pub qdot: JointVelocity,
    pub slack: [f64; 6],
    pub status: QpStatus,
    pub iterations: usize,
    pub inequality_rows: usize,
}

/// Retreat problem: smallest joint velocity satisfying dampers, avoidance
/// and box bounds, with the tracking task dropped.
fn retreat_problem(full: &QpProblem, nq: usize) -> QpProblem {
    let h = DMatrix::identity(nq, nq);
    let c = DVector::zeros(nq);
    let a_ineq = full.a_ineq.columns(0, nq).into_owned();
    QpProblem {
        h,
        c,
        a_eq: DMatrix::zeros(0, nq),
        b_eq: DVector::zeros(0),
        a_ineq,
        b_ineq: full.b_ineq.clone(),
        lower: full.lower.rows(0, nq).into_owned(),
        upper: full.upper.rows(0, nq).into_owned(),
    }
}

/// One control tick. Falls back to a pure retreat when the tracking QP is
/// infeasible; in that case the reported slack is the whole commanded twist.
pub fn control_step(
    cfg: &ControllerConfig,
    model: &RobotModel,
    q: &Configuration,
    twist: &Twist,
    clearances: &ClearanceSet,
    dev_norm: f64,
) -> ControlOutput {
    let problem = build_qp(cfg, model, q, twist, clearances, dev_norm);
    solve_built(cfg, model, &problem)
}

/// Solves an already assembled controller QP (see [`build_qp`]).
pub fn solve_built(cfg: &ControllerConfig, model: &RobotModel, problem: &QpProblem) -> ControlOutput {
    let nq = model.dof();
    let limits = model.velocity_limits();
    let sol = solve_qp(problem, &cfg.solver);
    let rows = problem.a_ineq.nrows();
    let clip = |x: &DVector<f64>| {
        JointVelocity(DVector::from_fn(nq, |i, _| {
            let v = if x[i].is_finite() { x[i] } else { 0.0 };
            v.clamp(-limits[i], limits[i])
        }))
    };
    match sol.status {
        QpStatus::Optimal | QpStatus::MaxIterations => {
            let mut slack = [0.0; 6];
            for (i, s) in slack.iter_mut().enumerate() {
                *s = sol.x[nq + i];
            }
            ControlOutput {
                qdot: clip(&sol.x),
                slack,
                status: sol.status,
                iterations: sol.iterations,
                inequality_rows: rows,
            }
        }
        QpStatus::Infeasible => {
            let retreat = retreat_problem(problem, nq);
            let back = solve_qp(&retreat, &cfg.solver);
            let mut slack = [0.0; 6];
            for (i, s) in slack.iter_mut().enumerate() {
                *s = problem.b_eq[i];
            }
            ControlOutput {
                qdot: clip(&back.x),
                slack,
                status: QpStatus::Infeasible,
                iterations: sol.iterations + back.iterations,
                inequality_rows: rows,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::forward_kinematics;
    use nalgebra::Vector3;
    use std::f64::consts::PI;

    fn clear(model: &RobotModel) -> ClearanceSet {
        ClearanceSet::clear(model.bodies.len(), model.dof(), 10.0)
    }

    fn ready(model: &RobotModel) -> Configuration {
        Configuration::new(0.0, 0.0, 0.0, model.mid_range())
    }

    #[test]
    fn far_goal_moves_base_more_than_arm() {
        let model = RobotModel::default();
        let cfg = ControllerConfig::default();
        let q = ready(&model);
        let twist = Twist {
            linear: Vector3::new(0.5, 0.0, 0.0),
            angular: Vector3::zeros(),
        };
        let out = control_step(&cfg, &model, &q, &twist, &clear(&model), 5.0);
        assert_eq!(out.status, QpStatus::Optimal);
        let base = out.qdot.0.rows(0, 2).norm();
        let arm = out.qdot.arm().norm();
        assert!(base > arm, "base {base} arm {arm}");
    }

    #[test]
    fn no_obstacles_mid_range_has_no_inequalities() {
        let model = RobotModel::default();
        let p = build_qp(&ControllerConfig::default(), &model, &ready(&model), &Twist::zero(), &clear(&model), 1.0);
        assert_eq!(p.a_ineq.nrows(), 0);
        assert_eq!(p.h.shape(), (15, 15));
        assert_eq!(p.a_eq.shape(), (6, 15));
    }

    #[test]
    fn close_body_gets_retreat_row() {
        let model = RobotModel::default();
        let cfg = ControllerConfig::default();
        let q = ready(&model);
        let mut cl = clear(&model);
        let k = 8;
        cl.distances[k] = 0.05;
        let grad = DVector::from_vec(vec![0.1, 0.8, 0.0, 0.3, -0.2, 0.1, 0.0, 0.0, 0.0]);
        cl.gradients.row_mut(k).copy_from(&grad.transpose());
        let p = build_qp(&cfg, &model, &q, &Twist::zero(), &cl, 1.0);
        assert_eq!(p.a_ineq.nrows(), 1);
        assert!(p.b_ineq[0] < 0.0);
        let out = solve_built(&cfg, &model, &p);
        assert_eq!(out.status, QpStatus::Optimal);
        let rate = grad.dot(&out.qdot.0);
        assert!(rate >= cfg.avoidance_gain * (cfg.psi - 0.05) - 1e-6);
        assert!(rate > 0.0);
    }

    #[test]
    fn reachable_twist_is_tracked() {
        let model = RobotModel::default();
        let cfg = ControllerConfig {
            slack_weights: [1e8; 6],
            ..ControllerConfig::default()
        };
        let q = ready(&model);
        let twist = Twist {
            linear: Vector3::new(0.1, -0.05, 0.08),
            angular: Vector3::new(0.0, 0.1, -0.05),
        };
        let out = control_step(&cfg, &model, &q, &twist, &clear(&model), 0.5);
        assert_eq!(out.status, QpStatus::Optimal);
        let jac = whole_body_jacobian(&model, &q);
        let err = (&jac * &out.qdot.0 - DVector::from_column_slice(twist.to_vector().as_slice())).norm();
        let slack = out.slack.iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!(err <= 1e-5, "tracking error {err}");
        assert!(slack <= 1e-5, "slack {slack}");
    }

    #[test]
    fn zero_twist_matches_equality_kkt_solution() {
        let model = RobotModel::default();
        let cfg = ControllerConfig::default();
        let q = ready(&model);
        let p = build_qp(&cfg, &model, &q, &Twist::zero(), &clear(&model), 0.8);
        let n = p.dim();
        let mut kkt = DMatrix::zeros(n + 6, n + 6);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        kkt.view_mut((n, 0), (6, n)).copy_from(&p.a_eq);
        kkt.view_mut((0, n), (n, 6)).copy_from(&p.a_eq.transpose());
        let mut rhs = DVector::zeros(n + 6);
        rhs.rows_mut(0, n).copy_from(&(-&p.c));
        let closed = kkt.lu().solve(&rhs).unwrap();
        let out = solve_built(&cfg, &model, &p);
        for i in 0..model.dof() {
            assert!((out.qdot.0[i] - closed[i]).abs() < 1e-6);
        }
        assert!(out.qdot.arm().norm() > 0.0);
    }

    #[test]
    fn stationary_manipulability_and_heading_give_zero_velocity() {
        let model = RobotModel::planar_chain(2, 0.5);
        let cfg = ControllerConfig::default();
        let q = Configuration::new(0.0, 0.0, 0.0, vec![-PI / 4.0, PI / 2.0]);
        assert!(base_to_ee_angle(&model, &q).abs() < 1e-12);
        let fk = forward_kinematics(&model, &q);
        assert!(fk.ee_position().y.abs() < 1e-12);
        let out = control_step(&cfg, &model, &q, &Twist::zero(), &clear(&model), 1.0);
        assert_eq!(out.status, QpStatus::Optimal);
        assert!(out.qdot.0.amax() < 1e-7, "{:?}", out.qdot);
    }

    #[test]
    fn damper_rows_near_limits() {
        let model = RobotModel::default();
        let cfg = ControllerConfig::default();
        let mut q = ready(&model);
        q.arm[0] = model.joints[0].upper() - 0.1;
        q.arm[3] = model.joints[3].lower() + 0.2;
        let p = build_qp(&cfg, &model, &q, &Twist::zero(), &clear(&model), 1.0);
        assert_eq!(p.a_ineq.nrows(), 2);
        assert_eq!(p.a_ineq[(0, 2)], 1.0);
        assert_eq!(p.a_ineq[(1, 5)], -1.0);
        let expect = cfg.damper_gain * (0.1 - cfg.stop) / (cfg.influence - cfg.stop);
        assert!((p.b_ineq[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn infeasible_problem_falls_back_to_retreat() {
        let model = RobotModel::default();
        let cfg = ControllerConfig::default();
        let q = ready(&model);
        let mut cl = clear(&model);
        // Two bodies demanding opposite base motion beyond the speed limit.
        cl.distances[0] = -2.0;
        cl.gradients[(0, 1)] = 1.0;
        cl.distances[1] = -2.0;
        cl.gradients[(1, 1)] = -1.0;
        let twist = Twist {
            linear: Vector3::new(0.3, 0.0, 0.0),
            angular: Vector3::zeros(),
        };
        let out = control_step(&cfg, &model, &q, &twist, &cl, 1.0);
        assert_eq!(out.status, QpStatus::Infeasible);
        assert_eq!(out.slack, [0.3, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(out.qdot.within_limits(&model, 1e-12));
    }

    #[test]
    fn config_validation() {
        let mut cfg = ControllerConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.stop = cfg.influence;
        assert!(cfg.validate().is_err());
    }
}
