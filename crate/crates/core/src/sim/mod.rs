//! Kinematic closed-loop environment for the mobile manipulator.
//!
//! Each tick turns an action into joint velocities (through the QP controller
//! for EE-twist actions, or directly), Euler-integrates the unicycle base and
//! the arm, re-renders the depth camera, rebuilds the local point-cloud map
//! and recomputes clearances and the shaped reward.

pub mod toy;

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use nalgebra::{DVector, Isometry3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{
    forward_kinematics, point_jacobian, whole_body_jacobian, BodyParent, Configuration, JointVelocity, RobotModel, Twist,
};
use crate::perception::{
    accumulate_cloud, link_clearances, render_depth, true_clearances, ClearanceSet, DepthImage,
    DepthParams, PointCloud, Scene,
};
use crate::qp_controller::{control_step, ControllerConfig, QpStatus};

/// Flattened observation as consumed by the networks: depth in millimetres
/// and the low-dimensional state in single precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsVec {
    pub depth: Vec<u16>,
    pub state: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObsDims {
    pub depth: usize,
    pub state: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub obs: ObsVec,
    pub reward: f64,
    /// Episode ended by success or collision; bootstrapping stops here.
    pub terminal: bool,
    /// Episode ended by the step limit.
    pub truncated: bool,
    pub success: bool,
    pub collision: bool,
}

/// Reset/step contract shared by every environment the learner trains on.
pub trait Environment {
    fn dims(&self) -> ObsDims;
    fn action_dim(&self) -> usize;
    /// Symmetric bound of each action component.
    fn action_bounds(&self) -> Vec<f64>;
    /// Depth normalization range (m).
    fn max_range(&self) -> f64;
    fn reset(&mut self, seed: u64) -> Result<ObsVec>;
    fn step(&mut self, action: &[f64]) -> EnvStep;
}

pub(crate) fn quantize_depth(depth: f64) -> u16 {
    (depth * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub dev: f64,
    pub follow: f64,
    /// Success radius, m.
    pub success_radius: f64,
    /// Collision shaping distance, m.
    pub shaping_distance: f64,
    pub goal_bonus: f64,
    pub collision_penalty: f64,
    /// Use `ln(y)` inside the shaping band instead of `ln(y / s_d)`.
    pub raw_log_shaping: bool,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            dev: 1.0,
            follow: 0.5,
            success_radius: 0.05,
            shaping_distance: 0.3,
            goal_bonus: 25.0,
            collision_penalty: -25.0,
            raw_log_shaping: false,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.success_radius > 0.0) || !(self.shaping_distance > 0.0) {
            return Err(Error::Config {
                path: "<reward>".into(),
                line: 0,
                field: "reward.success_radius".into(),
                message: "success radius and shaping distance must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Piecewise collision shaping on the minimum clearance `y`: zero beyond
/// `s_d`, logarithmic inside the band, the collision penalty at contact.
pub fn collision_shaping(y: f64, weights: &RewardWeights) -> f64 {
    let sd = weights.shaping_distance;
    if y > sd {
        0.0
    } else if y > 0.0 {
        let v = if weights.raw_log_shaping { y.ln() } else { (y / sd).ln() };
        v.max(weights.collision_penalty)
    } else {
        weights.collision_penalty
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoGains {
    /// Proportional gain on the position error, 1/s.
    pub linear: f64,
    pub angular: f64,
    pub max_linear: f64,
    pub max_angular: f64,
}

impl Default for ServoGains {
    fn default() -> Self {
        ServoGains {
            linear: 2.0,
            angular: 1.0,
            max_linear: 1.0,
            max_angular: 1.0,
        }
    }
}

fn clamp_norm(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Position-based servo twist toward the goal, in the world frame. `dev` is
/// the EE-to-goal vector in the base frame.
pub fn position_servo(model: &RobotModel, dev: &Vector3<f64>, q: &Configuration, gains: &ServoGains, success_radius: f64) -> Twist {
    let fk = forward_kinematics(model, q);
    let dev_world = fk.base.rotation * dev;
    let linear = clamp_norm(dev_world * gains.linear, gains.max_linear);
    let dist = dev_world.norm();
    if dist < success_radius {
        return Twist {
            linear,
            angular: Vector3::zeros(),
        };
    }
    let approach = fk.ee.rotation * Vector3::z();
    let target = dev_world / dist;
    let axis = approach.cross(&target);
    let sin = axis.norm();
    let cos = approach.dot(&target);
    let angle = sin.atan2(cos);
    let rotvec = if sin > 1e-12 {
        axis * (angle / sin)
    } else if cos < 0.0 {
        // Opposite directions: any perpendicular axis works.
        let perp = if approach.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        approach.cross(&perp).normalize() * std::f64::consts::PI
    } else {
        Vector3::zeros()
    };
    Twist {
        linear,
        angular: clamp_norm(rotvec * gains.angular, gains.max_angular),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// Actions are world-frame EE twists resolved by the QP controller.
    #[default]
    Twist,
    /// Actions are whole-body joint velocities, clipped to the limits.
    Direct,
}

/// How avoidance rows are generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AvoidanceKind {
    /// One row per collision body from the robot-centric clearances.
    #[default]
    Capsules,
    /// One row per surface sample point of the robot.
    SampledPoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Steps per episode.
    pub horizon: usize,
    pub servo: ServoGains,
    pub placement_attempts: usize,
    /// Uniform perturbation of the ready pose at reset, rad.
    pub arm_start_noise: f64,
    /// Minimum initial EE-to-goal distance, m.
    pub goal_min_distance: f64,
    /// Ready pose; empty means mid-range.
    pub ready_pose: Vec<f64>,
    pub sample_points: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 1000,
            servo: ServoGains::default(),
            placement_attempts: 1000,
            arm_start_noise: 0.2,
            goal_min_distance: 1.0,
            ready_pose: vec![0.0, -0.6, 0.0, -2.2, 0.0, 1.8, 0.785],
            sample_points: 40,
        }
    }
}

/// Low-dimensional part of an observation plus the depth stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `(sin θ, cos θ, arm angles, previous action)`.
    pub proprio: Vec<f64>,
    /// Oldest first.
    pub depth_stack: Vec<DepthImage>,
    /// EE-to-goal vector in the base frame, m.
    pub dev: Vector3<f64>,
}

impl Observation {
    pub fn to_vec(&self) -> ObsVec {
        let depth = self
            .depth_stack
            .iter()
            .flat_map(|img| img.depths.iter().map(|d| quantize_depth(*d)))
            .collect();
        let state = self
            .proprio
            .iter()
            .chain(self.dev.iter())
            .map(|v| *v as f32)
            .collect();
        ObsVec { depth, state }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RewardParts {
    pub dev: f64,
    pub follow: f64,
    pub time: f64,
    pub goal: f64,
    pub collision: f64,
}

impl RewardParts {
    pub fn total(&self, w: &RewardWeights) -> f64 {
        w.dev * self.dev + w.follow * self.follow + self.time + self.goal + self.collision
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub parts: RewardParts,
    /// Exact minimum clearance to the scene geometry, m.
    pub min_clearance: f64,
    /// Minimum perceived clearance from the local map, m.
    pub min_perceived: f64,
    pub success: bool,
    pub collision: bool,
    pub truncated: bool,
    pub qp_status: Option<QpStatus>,
    pub qp_iterations: usize,
    pub qdot: JointVelocity,
    pub slack_norm: f64,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub base: [f64; 3],
    pub arm: Vec<f64>,
    pub ee: [f64; 3],
    pub action: Vec<f64>,
    pub reward: f64,
    pub min_clearance: f64,
    pub success: bool,
    pub collision: bool,
}

pub fn write_trajectory_csv(rows: &[TrajectoryRow], path: &Path) -> Result<()> {
    let mut out = String::new();
    let arm_n = rows.first().map_or(7, |r| r.arm.len());
    let act_n = rows.first().map_or(6, |r| r.action.len());
    out.push_str("t,base_x,base_y,base_theta");
    for i in 0..arm_n {
        out.push_str(&format!(",q{}", i + 1));
    }
    out.push_str(",ee_x,ee_y,ee_z");
    for i in 0..act_n {
        out.push_str(&format!(",a{i}"));
    }
    out.push_str(",reward,min_clearance,success,collision\n");
    for r in rows {
        out.push_str(&format!("{:.4},{:.9},{:.9},{:.9}", r.t, r.base[0], r.base[1], r.base[2]));
        for a in &r.arm {
            out.push_str(&format!(",{a:.9}"));
        }
        out.push_str(&format!(",{:.9},{:.9},{:.9}", r.ee[0], r.ee[1], r.ee[2]));
        for a in &r.action {
            out.push_str(&format!(",{a:.9}"));
        }
        out.push_str(&format!(
            ",{:.9},{:.9},{},{}\n",
            r.reward, r.min_clearance, r.success as u8, r.collision as u8
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Joint velocity chosen for an action, with controller diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub qdot: JointVelocity,
    pub status: Option<QpStatus>,
    pub iterations: usize,
    pub slack_norm: f64,
    /// EE twist the action stands for (the achieved one in direct mode).
    pub twist: Twist,
}

/// Everything the environment needs besides the scene.
#[derive(Clone, Debug)]
pub struct EnvSetup {
    pub model: RobotModel,
    pub controller: ControllerConfig,
    pub reward: RewardWeights,
    pub sim: SimConfig,
    pub depth: DepthParams,
    pub mode: ActionMode,
    pub avoidance: AvoidanceKind,
}

impl Default for EnvSetup {
    fn default() -> Self {
        EnvSetup {
            model: RobotModel::default(),
            controller: ControllerConfig::default(),
            reward: RewardWeights::default(),
            sim: SimConfig::default(),
            depth: DepthParams::default(),
            mode: ActionMode::Twist,
            avoidance: AvoidanceKind::Capsules,
        }
    }
}

struct Episode {
    q: Configuration,
    goal: Vector3<f64>,
    frames: VecDeque<(DepthImage, Isometry3<f64>)>,
    stack: VecDeque<DepthImage>,
    cloud: PointCloud,
    clearances: ClearanceSet,
    prev_action: Vec<f64>,
    t: usize,
    seed: u64,
    placement_attempts: usize,
    done: bool,
}

pub struct RobotEnv {
    pub setup: EnvSetup,
    pub scene: Scene,
    episode: Option<Episode>,
    trajectory: Option<Vec<TrajectoryRow>>,
    samples: Vec<(BodyParent, usize, f64)>,
}

impl RobotEnv {
    pub fn new(setup: EnvSetup, scene: Scene) -> Self {
        let samples = surface_samples(&setup.model, setup.sim.sample_points);
        RobotEnv {
            setup,
            scene,
            episode: None,
            trajectory: None,
            samples,
        }
    }

    pub fn record_trajectory(&mut self, on: bool) {
        self.trajectory = if on { Some(Vec::new()) } else { None };
    }

    pub fn trajectory(&self) -> &[TrajectoryRow] {
        self.trajectory.as_deref().unwrap_or(&[])
    }

    fn ep(&self) -> &Episode {
        self.episode.as_ref().expect("reset before use")
    }

    pub fn configuration(&self) -> &Configuration {
        &self.ep().q
    }

    pub fn goal(&self) -> Vector3<f64> {
        self.ep().goal
    }

    pub fn clearances(&self) -> &ClearanceSet {
        &self.ep().clearances
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.ep().cloud
    }

    pub fn placement_attempts(&self) -> usize {
        self.ep().placement_attempts
    }

    pub fn steps_taken(&self) -> usize {
        self.ep().t
    }

    pub fn ee_position(&self) -> Vector3<f64> {
        forward_kinematics(&self.setup.model, &self.ep().q).ee_position()
    }

    /// EE-to-goal vector in the base frame.
    pub fn dev(&self) -> Vector3<f64> {
        let ep = self.ep();
        dev_in_base(&self.setup.model, &ep.q, &ep.goal)
    }

    pub fn servo_twist(&self) -> Twist {
        let ep = self.ep();
        position_servo(
            &self.setup.model,
            &self.dev(),
            &ep.q,
            &self.setup.sim.servo,
            self.setup.reward.success_radius,
        )
    }

    pub fn min_true_clearance(&self) -> f64 {
        true_clearances(&self.setup.model, &self.ep().q, &self.scene).min()
    }

    pub fn action_dim_for(mode: ActionMode, model: &RobotModel) -> usize {
        match mode {
            ActionMode::Twist => 6,
            ActionMode::Direct => model.dof(),
        }
    }

    fn ready_pose(&self) -> Vec<f64> {
        let m = &self.setup.model;
        if self.setup.sim.ready_pose.len() == m.arm_dof() {
            self.setup.sim.ready_pose.clone()
        } else {
            m.mid_range()
        }
    }

    /// Seeded reset: rejection-samples a start configuration whose exact
    /// clearance exceeds `ψ`, then a goal at clearance above `ψ`.
    pub fn reset_episode(&mut self, seed: u64) -> Result<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = self.setup.controller.psi;
        let model = &self.setup.model;
        let ws = &self.scene.workspace;
        let margin = 0.5;
        let ready = self.ready_pose();
        let mut placed = None;
        for attempt in 1..=self.setup.sim.placement_attempts {
            let arm: Vec<f64> = ready
                .iter()
                .zip(&model.joints)
                .map(|(r, j)| {
                    let noise = self.setup.sim.arm_start_noise;
                    let v = r + if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
                    v.clamp(j.lower() + 0.05, j.upper() - 0.05)
                })
                .collect();
            let q = Configuration::new(
                rng.gen_range(ws.min[0] + margin..ws.max[0] - margin),
                rng.gen_range(ws.min[1] + margin..ws.max[1] - margin),
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
                arm,
            );
            if true_clearances(model, &q, &self.scene).min() > psi {
                placed = Some((q, attempt));
                break;
            }
        }
        let (q, attempts) = placed.ok_or(Error::Placement)?;
        let ee = forward_kinematics(model, &q).ee_position();
        let goal = match self.scene.goal {
            Some(g) => Vector3::from(g),
            None => {
                let region = self.scene.goal_region.clone().unwrap_or_else(|| ws.clone());
                let mut found = None;
                for _ in 0..self.setup.sim.placement_attempts {
                    let g = Vector3::new(
                        rng.gen_range(region.min[0]..region.max[0]),
                        rng.gen_range(region.min[1]..region.max[1]),
                        rng.gen_range(region.min[2]..region.max[2]),
                    );
                    if self.scene.sdf(&g) > psi + 0.1 && (g - ee).norm() >= self.setup.sim.goal_min_distance {
                        found = Some(g);
                        break;
                    }
                }
                found.ok_or(Error::Placement)?
            }
        };
        self.start_episode(q, goal, seed, attempts)
    }

    /// Starts an episode from an explicit configuration and goal.
    pub fn reset_to(&mut self, q: Configuration, goal: Vector3<f64>, seed: u64) -> Result<Observation> {
        self.start_episode(q, goal, seed, 0)
    }

    fn start_episode(&mut self, q: Configuration, goal: Vector3<f64>, seed: u64, attempts: usize) -> Result<Observation> {
        let action_dim = Self::action_dim_for(self.setup.mode, &self.setup.model);
        let frame = self.render(&q);
        let mut stack = VecDeque::new();
        for _ in 0..self.setup.depth.frames {
            stack.push_back(frame.0.clone());
        }
        let mut frames = VecDeque::new();
        frames.push_back(frame);
        let mut ep = Episode {
            q,
            goal,
            frames,
            stack,
            cloud: PointCloud::default(),
            clearances: ClearanceSet::clear(0, 0, 0.0),
            prev_action: vec![0.0; action_dim],
            t: 0,
            seed,
            placement_attempts: attempts,
            done: false,
        };
        self.refresh_map(&mut ep);
        self.episode = Some(ep);
        if let Some(tr) = self.trajectory.as_mut() {
            tr.clear();
        }
        Ok(self.observation())
    }

    fn render(&self, q: &Configuration) -> (DepthImage, Isometry3<f64>) {
        let cam = q.base.iso() * self.setup.model.camera_mount.iso();
        (render_depth(&self.scene, &cam, &self.setup.depth), cam)
    }

    fn refresh_map(&self, ep: &mut Episode) {
        let frames: Vec<_> = ep.frames.iter().cloned().collect();
        let seed = ep.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(ep.t as u64);
        ep.cloud = accumulate_cloud(&frames, self.setup.depth.cloud_cap, seed);
        ep.clearances = self.avoidance_rows(&ep.q, &ep.cloud);
    }

    /// Avoidance rows for the configured scheme.
    pub fn avoidance_rows(&self, q: &Configuration, cloud: &PointCloud) -> ClearanceSet {
        match self.setup.avoidance {
            AvoidanceKind::Capsules => link_clearances(&self.setup.model, q, cloud, self.setup.depth.max_range),
            AvoidanceKind::SampledPoints => sampled_point_rows(&self.setup.model, q, cloud, &self.samples, self.setup.depth.max_range),
        }
    }

    pub fn observation(&self) -> Observation {
        let ep = self.ep();
        let mut proprio = vec![ep.q.base.theta.sin(), ep.q.base.theta.cos()];
        proprio.extend_from_slice(&ep.q.arm);
        proprio.extend_from_slice(&ep.prev_action);
        Observation {
            proprio,
            depth_stack: ep.stack.iter().cloned().collect(),
            dev: self.dev(),
        }
    }

    /// Joint velocity the current action maps to, without stepping.
    pub fn resolve(&self, action: &[f64]) -> Resolved {
        let ep = self.ep();
        let model = &self.setup.model;
        match self.setup.mode {
            ActionMode::Twist => {
                let twist = Twist::from_slice(action);
                let dev_norm = self.dev().norm();
                let out = control_step(&self.setup.controller, model, &ep.q, &twist, &ep.clearances, dev_norm);
                Resolved {
                    slack_norm: out.slack.iter().map(|s| s * s).sum::<f64>().sqrt(),
                    qdot: out.qdot,
                    status: Some(out.status),
                    iterations: out.iterations,
                    twist,
                }
            }
            ActionMode::Direct => {
                let lim = model.velocity_limits();
                let qd = DVector::from_fn(model.dof(), |i, _| {
                    let a = action.get(i).copied().unwrap_or(0.0);
                    if a.is_finite() {
                        a.clamp(-lim[i], lim[i])
                    } else {
                        0.0
                    }
                });
                let jac = whole_body_jacobian(model, &ep.q);
                let twist = Twist::from_slice((&jac * &qd).as_slice());
                Resolved {
                    qdot: JointVelocity(qd),
                    status: None,
                    iterations: 0,
                    slack_norm: 0.0,
                    twist,
                }
            }
        }
    }

    pub fn step_episode(&mut self, action: &[f64]) -> StepResult {
        let resolved = self.resolve(action);
        self.apply(action, resolved)
    }

    /// Integrates a resolved action and scores the resulting state.
    pub fn apply(&mut self, action: &[f64], resolved: Resolved) -> StepResult {
        let Resolved {
            qdot,
            status,
            iterations,
            slack_norm,
            twist: applied_twist,
        } = resolved;
        let servo = self.servo_twist();
        let dt = self.setup.controller.dt;
        let w = self.setup.reward.clone();
        let mut ep = self.episode.take().expect("reset before step");
        assert!(!ep.done, "step after episode end");

        let mut next = ep.q.advanced(&qdot.0, dt);
        for (a, j) in next.arm.iter_mut().zip(&self.setup.model.joints) {
            *a = a.clamp(j.lower(), j.upper());
        }
        ep.q = next;
        ep.t += 1;
        let frame = self.render(&ep.q);
        ep.stack.push_back(frame.0.clone());
        while ep.stack.len() > self.setup.depth.frames {
            ep.stack.pop_front();
        }
        ep.frames.push_back(frame);
        while ep.frames.len() > self.setup.depth.frames {
            ep.frames.pop_front();
        }
        self.refresh_map(&mut ep);
        ep.prev_action = action.to_vec();

        let min_clearance = true_clearances(&self.setup.model, &ep.q, &self.scene).min();
        let dev = dev_in_base(&self.setup.model, &ep.q, &ep.goal);
        let dev_norm = dev.norm();
        let collision = min_clearance < 0.0;
        let success = !collision && dev_norm < w.success_radius;
        let follow_action = match self.setup.mode {
            ActionMode::Twist => Twist::from_slice(action),
            ActionMode::Direct => applied_twist,
        };
        let parts = RewardParts {
            dev: -dev_norm,
            follow: -(servo.to_vector() - follow_action.to_vector()).norm(),
            time: -dt,
            goal: if success { w.goal_bonus } else { 0.0 },
            collision: collision_shaping(min_clearance, &w),
        };
        let reward = parts.total(&w);
        let truncated = !success && !collision && ep.t >= self.setup.sim.horizon;
        let done = success || collision || truncated;
        ep.done = done;
        let min_perceived = if ep.clearances.distances.is_empty() {
            self.setup.depth.max_range
        } else {
            ep.clearances.min()
        };
        let fk = forward_kinematics(&self.setup.model, &ep.q);
        if let Some(tr) = self.trajectory.as_mut() {
            let ee = fk.ee_position();
            tr.push(TrajectoryRow {
                t: ep.t as f64 * dt,
                base: [ep.q.base.x, ep.q.base.y, ep.q.base.theta],
                arm: ep.q.arm.clone(),
                ee: [ee.x, ee.y, ee.z],
                action: action.to_vec(),
                reward,
                min_clearance,
                success,
                collision,
            });
        }
        self.episode = Some(ep);
        StepResult {
            obs: self.observation(),
            reward,
            done,
            info: StepInfo {
                parts,
                min_clearance,
                min_perceived,
                success,
                collision,
                truncated,
                qp_status: status,
                qp_iterations: iterations,
                qdot,
                slack_norm,
            },
        }
    }
}

pub fn dev_in_base(model: &RobotModel, q: &Configuration, goal: &Vector3<f64>) -> Vector3<f64> {
    let fk = forward_kinematics(model, q);
    fk.base.rotation.inverse() * (goal - fk.ee_position())
}

impl Environment for RobotEnv {
    fn dims(&self) -> ObsDims {
        let d = &self.setup.depth;
        let action_dim = Self::action_dim_for(self.setup.mode, &self.setup.model);
        ObsDims {
            depth: d.width * d.height * d.frames,
            state: 2 + self.setup.model.arm_dof() + action_dim + 3,
        }
    }

    fn action_dim(&self) -> usize {
        Self::action_dim_for(self.setup.mode, &self.setup.model)
    }

    fn action_bounds(&self) -> Vec<f64> {
        match self.setup.mode {
            ActionMode::Twist => vec![1.0; 6],
            ActionMode::Direct => self.setup.model.velocity_limits().iter().copied().collect(),
        }
    }

    fn max_range(&self) -> f64 {
        self.setup.depth.max_range
    }

    fn reset(&mut self, seed: u64) -> Result<ObsVec> {
        Ok(self.reset_episode(seed)?.to_vec())
    }

    fn step(&mut self, action: &[f64]) -> EnvStep {
        let r = self.step_episode(action);
        EnvStep {
            obs: r.obs.to_vec(),
            reward: r.reward,
            terminal: r.info.success || r.info.collision,
            truncated: r.info.truncated,
            success: r.info.success,
            collision: r.info.collision,
        }
    }
}

/// Cycles through several scenes; the reset seed picks the scene.
pub struct SceneCycle {
    pub envs: Vec<RobotEnv>,
    current: usize,
}

impl SceneCycle {
    pub fn new(setup: &EnvSetup, scenes: &[Scene]) -> Self {
        assert!(!scenes.is_empty());
        SceneCycle {
            envs: scenes.iter().map(|s| RobotEnv::new(setup.clone(), s.clone())).collect(),
            current: 0,
        }
    }
}

impl Environment for SceneCycle {
    fn dims(&self) -> ObsDims {
        self.envs[0].dims()
    }

    fn action_dim(&self) -> usize {
        self.envs[0].action_dim()
    }

    fn action_bounds(&self) -> Vec<f64> {
        self.envs[0].action_bounds()
    }

    fn max_range(&self) -> f64 {
        self.envs[0].max_range()
    }

    fn reset(&mut self, seed: u64) -> Result<ObsVec> {
        self.current = (seed % self.envs.len() as u64) as usize;
        self.envs[self.current].reset(seed)
    }

    fn step(&mut self, action: &[f64]) -> EnvStep {
        self.envs[self.current].step(action)
    }
}

/// Spreads `count` sample points along the capsule axes, proportional to
/// segment length with at least one per body. Entries are
/// `(parent, body index, segment parameter)`.
pub fn surface_samples(model: &RobotModel, count: usize) -> Vec<(BodyParent, usize, f64)> {
    let nb = model.bodies.len();
    if nb == 0 || count == 0 {
        return Vec::new();
    }
    let lens: Vec<f64> = model
        .bodies
        .iter()
        .map(|b| (Vector3::from(b.capsule.b) - Vector3::from(b.capsule.a)).norm() + b.capsule.radius)
        .collect();
    let total: f64 = lens.iter().sum();
    let mut per: Vec<usize> = vec![1; nb];
    let mut left = count.saturating_sub(nb);
    // Largest-remainder allocation of the rest.
    let shares: Vec<f64> = lens.iter().map(|l| l / total * left as f64).collect();
    for (p, s) in per.iter_mut().zip(&shares) {
        *p += s.floor() as usize;
    }
    left -= shares.iter().map(|s| s.floor() as usize).sum::<usize>();
    let mut order: Vec<usize> = (0..nb).collect();
    order.sort_by(|a, b| {
        let ra = shares[*a] - shares[*a].floor();
        let rb = shares[*b] - shares[*b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(b))
    });
    for i in order.into_iter().take(left) {
        per[i] += 1;
    }
    let mut out = Vec::with_capacity(count);
    for (k, n) in per.into_iter().enumerate() {
        let parent = model.bodies[k].parent_link();
        for s in 0..n {
            let t = if n == 1 { 0.5 } else { s as f64 / (n - 1) as f64 };
            out.push((parent, k, t));
        }
    }
    out
}

/// Avoidance rows from sampled robot points: for each point, its distance to
/// the nearest cloud point (minus the body radius) and the directional
/// point-Jacobian row `nᵀ J_p`.
pub fn sampled_point_rows(
    model: &RobotModel,
    q: &Configuration,
    cloud: &PointCloud,
    samples: &[(BodyParent, usize, f64)],
    sentinel: f64,
) -> ClearanceSet {
    let n = model.dof();
    let mut out = ClearanceSet::clear(samples.len(), n, sentinel);
    if cloud.is_empty() {
        return out;
    }
    let fk = forward_kinematics(model, q);
    for (row, (parent, body, t)) in samples.iter().enumerate() {
        let b = &model.bodies[*body];
        let pose = fk.parent_pose(*parent);
        let a = pose.transform_point(&b.capsule.a()).coords;
        let bb = pose.transform_point(&b.capsule.b()).coords;
        let p = a + (bb - a) * *t;
        let mut best = f64::INFINITY;
        let mut nearest = Vector3::zeros();
        for c in &cloud.points {
            let d = (p - c).norm();
            if d < best {
                best = d;
                nearest = *c;
            }
        }
        out.distances[row] = best - b.capsule.radius;
        if best > 1e-12 {
            let dir = (p - nearest) / best;
            let jp = point_jacobian(model, &fk, *parent, &p);
            let g = jp.transpose() * dir;
            for j in 0..n {
                out.gradients[(row, j)] = g[j];
            }
        }
    }
    out
}
