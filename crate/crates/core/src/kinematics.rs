//! Serial-chain model of a differential-drive base carrying an arm.
//!
//! The base is a unicycle: it contributes two velocity columns to the
//! whole-body Jacobian, rotation `ω` about the base z axis and forward speed
//! `v` along the heading. Arm joints are revolute, each described by a fixed
//! transform from the previous frame followed by a rotation about a unit axis.
//! Column order everywhere is `(ω, v, q̇_1 .. q̇_n)`; twist row order is
//! `(v_x, v_y, v_z, ω_x, ω_y, ω_z)`, expressed in the world frame.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{
    DMatrix, DVector, Isometry3, Point3, Translation3, Unit, UnitQuaternion, Vector3, Vector6,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid transform stored with the human-readable form it was built from, so
/// configuration echoes reproduce the input exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub xyz: [f64; 3],
    pub rpy: [f64; 3],
    iso: Isometry3<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PoseRepr {
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default)]
    rpy: [f64; 3],
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        Pose::new(r.xyz, r.rpy)
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr {
            xyz: p.xyz,
            rpy: p.rpy,
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::new([0.0; 3], [0.0; 3])
    }
}

impl Pose {
    pub fn new(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        let iso = Isometry3::from_parts(
            Translation3::new(xyz[0], xyz[1], xyz[2]),
            UnitQuaternion::from_euler_angles(rpy[0], rpy[1], rpy[2]),
        );
        Pose { xyz, rpy, iso }
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Pose::new([x, y, z], [0.0; 3])
    }

    pub fn iso(&self) -> &Isometry3<f64> {
        &self.iso
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    /// Segment endpoints in the parent frame.
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub radius: f64,
}

impl Capsule {
    pub fn a(&self) -> Point3<f64> {
        Point3::from(self.a)
    }

    pub fn b(&self) -> Point3<f64> {
        Point3::from(self.b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmJoint {
    pub name: String,
    /// Fixed transform from the previous frame to this joint frame.
    pub origin: Pose,
    pub axis: [f64; 3],
    pub limits: [f64; 2],
    pub max_velocity: f64,
}

impl ArmJoint {
    pub fn lower(&self) -> f64 {
        self.limits[0]
    }

    pub fn upper(&self) -> f64 {
        self.limits[1]
    }

    fn unit_axis(&self) -> Unit<Vector3<f64>> {
        Unit::new_normalize(Vector3::from(self.axis))
    }
}

/// Where a collision body is attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BodyParent {
    Base,
    Joint(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionBody {
    pub name: String,
    /// `"base"` or the name of an arm joint.
    pub parent: String,
    pub capsule: Capsule,
    #[serde(skip)]
    resolved: Option<BodyParent>,
}

impl CollisionBody {
    pub fn new(name: &str, parent: &str, capsule: Capsule) -> Self {
        CollisionBody {
            name: name.to_owned(),
            parent: parent.to_owned(),
            capsule,
            resolved: None,
        }
    }

    pub fn parent_link(&self) -> BodyParent {
        self.resolved.expect("model not validated")
    }
}

fn default_rows() -> Vec<usize> {
    (0..6).collect()
}

/// Kinematic description of the mobile manipulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    /// Velocity limits of the base as `[ω_max, v_max]`.
    pub base_velocity_limits: [f64; 2],
    /// Arm mount relative to the base frame.
    pub mount: Pose,
    pub joints: Vec<ArmJoint>,
    /// Last joint frame to end-effector.
    pub tool: Pose,
    pub bodies: Vec<CollisionBody>,
    /// Camera optical frame (z forward, x right, y down) relative to the base.
    pub camera_mount: Pose,
    /// Twist rows entering the manipulability measure.
    #[serde(default = "default_rows")]
    pub manipulability_rows: Vec<usize>,
}

impl RobotModel {
    /// Validates the model and resolves body parents. Every constructor and
    /// loader goes through here.
    pub fn validated(mut self) -> Result<Self> {
        if self.joints.is_empty() {
            return Err(Error::InvalidModel("arm needs at least one joint".into()));
        }
        for j in &self.joints {
            if !(j.lower() < j.upper()) {
                return Err(Error::InvalidModel(format!(
                    "joint {}: lower limit must be below upper",
                    j.name
                )));
            }
            if !(j.max_velocity > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "joint {}: max_velocity must be positive",
                    j.name
                )));
            }
            if Vector3::from(j.axis).norm() < 1e-9 {
                return Err(Error::InvalidModel(format!("joint {}: zero axis", j.name)));
            }
        }
        if self.base_velocity_limits.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidModel("base velocity limits must be positive".into()));
        }
        if self.manipulability_rows.is_empty() || self.manipulability_rows.iter().any(|r| *r > 5) {
            return Err(Error::InvalidModel("manipulability rows must be within 0..6".into()));
        }
        for body in &mut self.bodies {
            if !(body.capsule.radius > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "body {}: capsule radius must be positive",
                    body.name
                )));
            }
            let parent = if body.parent == "base" {
                BodyParent::Base
            } else {
                match self.joints.iter().position(|j| j.name == body.parent) {
                    Some(i) => BodyParent::Joint(i),
                    None => {
                        return Err(Error::InvalidModel(format!(
                            "body {}: unknown parent {}",
                            body.name, body.parent
                        )))
                    }
                }
            };
            body.resolved = Some(parent);
        }
        Ok(self)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let model: RobotModel = toml::from_str(text).map_err(|e| Error::InvalidModel(e.to_string()))?;
        model.validated()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        crate::config::parse_toml::<RobotModel>(path, &text)?.validated()
    }

    pub fn arm_dof(&self) -> usize {
        self.joints.len()
    }

    /// Total velocity degrees of freedom, base included.
    pub fn dof(&self) -> usize {
        self.joints.len() + 2
    }

    pub fn velocity_limits(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dof());
        v[0] = self.base_velocity_limits[0];
        v[1] = self.base_velocity_limits[1];
        for (i, j) in self.joints.iter().enumerate() {
            v[2 + i] = j.max_velocity;
        }
        v
    }

    /// Midpoint of every arm joint range.
    pub fn mid_range(&self) -> Vec<f64> {
        self.joints.iter().map(|j| 0.5 * (j.lower() + j.upper())).collect()
    }

    /// Franka-Panda-like 7-joint arm on a differential-drive base, with nine
    /// collision capsules (base, seven links, hand).
    pub fn panda_on_diff_drive() -> Self {
        let h = PI / 2.0;
        let joint = |name: &str, xyz: [f64; 3], roll: f64, limits: [f64; 2], vmax: f64| ArmJoint {
            name: name.into(),
            origin: Pose::new(xyz, [roll, 0.0, 0.0]),
            axis: [0.0, 0.0, 1.0],
            limits,
            max_velocity: vmax,
        };
        // Modified DH chain: Rx(alpha) Tx(a) then Tz(d), expressed as xyz
        // after the roll. Tz(d) after Rx(alpha) is rotated, so the
        // translations below are already in the parent frame.
        let joints = vec![
            joint("j1", [0.0, 0.0, 0.333], 0.0, [-2.8973, 2.8973], 2.175),
            joint("j2", [0.0, 0.0, 0.0], -h, [-1.7628, 1.7628], 2.175),
            joint("j3", [0.0, -0.316, 0.0], h, [-2.8973, 2.8973], 2.175),
            joint("j4", [0.0825, 0.0, 0.0], h, [-3.0718, -0.0698], 2.175),
            joint("j5", [-0.0825, 0.384, 0.0], -h, [-2.8973, 2.8973], 2.61),
            joint("j6", [0.0, 0.0, 0.0], h, [-0.0175, 3.7525], 2.61),
            joint("j7", [0.088, 0.0, 0.0], h, [-2.8973, 2.8973], 2.61),
        ];
        let cap = |a: [f64; 3], b: [f64; 3], r: f64| Capsule { a, b, radius: r };
        let bodies = vec![
            CollisionBody::new("base", "base", cap([-0.2, 0.0, 0.25], [0.2, 0.0, 0.25], 0.25)),
            CollisionBody::new("link1", "j1", cap([0.0, 0.0, -0.25], [0.0, 0.0, 0.0], 0.07)),
            CollisionBody::new("link2", "j2", cap([0.0, 0.0, 0.0], [0.0, -0.25, 0.0], 0.07)),
            CollisionBody::new("link3", "j3", cap([0.0, 0.0, -0.1], [0.0825, 0.0, 0.0], 0.065)),
            CollisionBody::new("link4", "j4", cap([0.0, 0.0, 0.0], [-0.0825, 0.3, 0.0], 0.065)),
            CollisionBody::new("link5", "j5", cap([0.0, 0.0, -0.15], [0.0, 0.0, 0.0], 0.06)),
            CollisionBody::new("link6", "j6", cap([0.0, 0.0, 0.0], [0.088, 0.0, 0.0], 0.055)),
            CollisionBody::new("link7", "j7", cap([0.0, 0.0, 0.0], [0.0, 0.0, 0.1], 0.05)),
            CollisionBody::new("hand", "j7", cap([0.0, 0.0, 0.12], [0.0, 0.0, 0.19], 0.055)),
        ];
        // Camera frame axes expressed in the base frame: x_c = -y_b,
        // y_c = -z_b rotated by the downward tilt, z_c = +x_b tilted down.
        let tilt = 0.5;
        RobotModel {
            base_velocity_limits: [1.0, 1.0],
            mount: Pose::translation(0.1, 0.0, 0.5),
            joints,
            tool: Pose::new([0.0, 0.0, 0.2104], [0.0, 0.0, -PI / 4.0]),
            bodies,
            camera_mount: Pose::new([0.3, 0.0, 1.0], [-h - tilt, 0.0, -h]),
            manipulability_rows: default_rows(),
        }
        .validated()
        .expect("built-in model is valid")
    }

    /// Planar chain of `n` equal links of length `len` rotating about z; used
    /// by analytic checks.
    pub fn planar_chain(n: usize, len: f64) -> Self {
        let joints = (0..n)
            .map(|i| ArmJoint {
                name: format!("j{}", i + 1),
                origin: if i == 0 {
                    Pose::default()
                } else {
                    Pose::translation(len, 0.0, 0.0)
                },
                axis: [0.0, 0.0, 1.0],
                limits: [-PI, PI],
                max_velocity: 2.0,
            })
            .collect::<Vec<_>>();
        let mut bodies = vec![CollisionBody::new(
            "base",
            "base",
            Capsule {
                a: [0.0, 0.0, 0.0],
                b: [0.0, 0.0, 0.0],
                radius: 0.1,
            },
        )];
        for j in &joints {
            bodies.push(CollisionBody::new(
                &format!("link_{}", j.name),
                &j.name,
                Capsule {
                    a: [0.0; 3],
                    b: [len, 0.0, 0.0],
                    radius: 0.05,
                },
            ));
        }
        RobotModel {
            base_velocity_limits: [1.0, 1.0],
            mount: Pose::default(),
            joints,
            tool: Pose::translation(len, 0.0, 0.0),
            bodies,
            camera_mount: Pose::new([0.0, 0.0, 0.5], [-h_pi(), 0.0, -h_pi()]),
            manipulability_rows: vec![0, 1],
        }
        .validated()
        .expect("planar chain is valid")
    }
}

fn h_pi() -> f64 {
    PI / 2.0
}

impl Default for RobotModel {
    fn default() -> Self {
        RobotModel::panda_on_diff_drive()
    }
}

/// Maps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BasePose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl BasePose {
    pub fn iso(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(self.x, self.y, 0.0),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), self.theta),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub base: BasePose,
    pub arm: Vec<f64>,
}

impl Configuration {
    pub fn new(x: f64, y: f64, theta: f64, arm: Vec<f64>) -> Self {
        Configuration {
            base: BasePose {
                x,
                y,
                theta: wrap_angle(theta),
            },
            arm,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.base.x.is_finite()
            && self.base.y.is_finite()
            && self.base.theta.is_finite()
            && self.arm.iter().all(|a| a.is_finite())
    }

    /// Configuration reached by applying joint velocity `qd` for `dt` with a
    /// first-order unicycle step. Arm angles are not clipped here.
    pub fn advanced(&self, qd: &DVector<f64>, dt: f64) -> Configuration {
        let (s, c) = self.base.theta.sin_cos();
        let v = qd[1];
        let mut arm = self.arm.clone();
        for (i, a) in arm.iter_mut().enumerate() {
            *a += qd[2 + i] * dt;
        }
        Configuration {
            base: BasePose {
                x: self.base.x + v * c * dt,
                y: self.base.y + v * s * dt,
                theta: wrap_angle(self.base.theta + qd[0] * dt),
            },
            arm,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist::default()
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Twist {
            linear: Vector3::new(a[0], a[1], a[2]),
            angular: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        )
    }

    pub fn to_array(&self) -> [f64; 6] {
        let v = self.to_vector();
        [v[0], v[1], v[2], v[3], v[4], v[5]]
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|x| x.is_finite())
    }
}

/// Whole-body joint velocity `(ω, v, q̇_arm)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointVelocity(pub DVector<f64>);

impl JointVelocity {
    pub fn zeros(dof: usize) -> Self {
        JointVelocity(DVector::zeros(dof))
    }

    pub fn base_omega(&self) -> f64 {
        self.0[0]
    }

    pub fn base_v(&self) -> f64 {
        self.0[1]
    }

    pub fn arm(&self) -> nalgebra::DVectorView<'_, f64> {
        self.0.rows(2, self.0.len() - 2)
    }

    pub fn within_limits(&self, model: &RobotModel, tol: f64) -> bool {
        let lim = model.velocity_limits();
        self.0.iter().zip(lim.iter()).all(|(v, l)| v.abs() <= l + tol)
    }
}

/// Result of forward kinematics.
#[derive(Clone, Debug)]
pub struct ChainPoses {
    pub base: Isometry3<f64>,
    /// World pose of each arm joint frame, after its rotation.
    pub joints: Vec<Isometry3<f64>>,
    pub ee: Isometry3<f64>,
}

impl ChainPoses {
    /// Base body followed by every arm link.
    pub fn link_poses(&self) -> Vec<Isometry3<f64>> {
        std::iter::once(self.base).chain(self.joints.iter().copied()).collect()
    }

    pub fn parent_pose(&self, parent: BodyParent) -> &Isometry3<f64> {
        match parent {
            BodyParent::Base => &self.base,
            BodyParent::Joint(i) => &self.joints[i],
        }
    }

    pub fn ee_position(&self) -> Vector3<f64> {
        self.ee.translation.vector
    }
}

fn chain_from(model: &RobotModel, root: Isometry3<f64>, arm: &[f64]) -> (Vec<Isometry3<f64>>, Isometry3<f64>) {
    let mut t = root * model.mount.iso();
    let mut frames = Vec::with_capacity(model.joints.len());
    for (j, q) in model.joints.iter().zip(arm) {
        t = t * j.origin.iso() * UnitQuaternion::from_axis_angle(&j.unit_axis(), *q);
        frames.push(t);
    }
    let ee = t * model.tool.iso();
    (frames, ee)
}

pub fn forward_kinematics(model: &RobotModel, q: &Configuration) -> ChainPoses {
    debug_assert_eq!(q.arm.len(), model.arm_dof());
    let base = q.base.iso();
    let (joints, ee) = chain_from(model, base, &q.arm);
    ChainPoses { base, joints, ee }
}

/// World-frame linear velocity Jacobian (3 × dof) of a point rigidly attached
/// to `parent`. Columns of joints distal to the parent are zero.
pub fn point_jacobian(
    model: &RobotModel,
    poses: &ChainPoses,
    parent: BodyParent,
    point: &Vector3<f64>,
) -> DMatrix<f64> {
    let n = model.dof();
    let mut jac = DMatrix::zeros(3, n);
    let base_p = poses.base.translation.vector;
    let z = Vector3::z();
    let r = point - base_p;
    let w = z.cross(&r);
    let heading = poses.base.rotation * Vector3::x();
    for k in 0..3 {
        jac[(k, 0)] = w[k];
        jac[(k, 1)] = heading[k];
    }
    let last = match parent {
        BodyParent::Base => return jac,
        BodyParent::Joint(i) => i,
    };
    for (i, j) in model.joints.iter().enumerate().take(last + 1) {
        let frame = &poses.joints[i];
        let axis = frame.rotation * j.unit_axis().into_inner();
        let col = axis.cross(&(point - frame.translation.vector));
        for k in 0..3 {
            jac[(k, 2 + i)] = col[k];
        }
    }
    jac
}

fn geometric_jacobian(model: &RobotModel, poses: &ChainPoses, with_base: bool) -> DMatrix<f64> {
    let off = if with_base { 2 } else { 0 };
    let n = model.arm_dof() + off;
    let mut jac = DMatrix::zeros(6, n);
    let p = poses.ee_position();
    if with_base {
        let r = p - poses.base.translation.vector;
        let lin = Vector3::z().cross(&r);
        let heading = poses.base.rotation * Vector3::x();
        for k in 0..3 {
            jac[(k, 0)] = lin[k];
            jac[(k, 1)] = heading[k];
        }
        jac[(5, 0)] = 1.0;
    }
    for (i, j) in model.joints.iter().enumerate() {
        let frame = &poses.joints[i];
        let axis = frame.rotation * j.unit_axis().into_inner();
        let lin = axis.cross(&(p - frame.translation.vector));
        for k in 0..3 {
            jac[(k, off + i)] = lin[k];
            jac[(3 + k, off + i)] = axis[k];
        }
    }
    jac
}

/// 6 × dof Jacobian mapping `(ω, v, q̇_arm)` to the world-frame EE twist.
pub fn whole_body_jacobian(model: &RobotModel, q: &Configuration) -> DMatrix<f64> {
    let poses = forward_kinematics(model, q);
    geometric_jacobian(model, &poses, true)
}

/// Arm-only Jacobian expressed in the mount frame.
pub fn arm_jacobian(model: &RobotModel, arm: &[f64]) -> DMatrix<f64> {
    let (joints, ee) = chain_from(model, Isometry3::identity(), arm);
    let poses = ChainPoses {
        base: Isometry3::identity(),
        joints,
        ee,
    };
    geometric_jacobian(model, &poses, false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manipulability {
    pub value: f64,
    pub gradient: DVector<f64>,
}

const SINGULAR_DET: f64 = 1e-12;
const MANIP_FD_STEP: f64 = 1e-6;

fn manipulability_det(model: &RobotModel, arm: &[f64]) -> f64 {
    let full = arm_jacobian(model, arm);
    let rows = &model.manipulability_rows;
    let j = DMatrix::from_fn(rows.len(), full.ncols(), |r, c| full[(rows[r], c)]);
    (&j * j.transpose()).determinant()
}

/// Yoshikawa measure `sqrt(det(J Jᵀ))` of the arm and its central-difference
/// gradient. Returns zeros at singular configurations.
pub fn manipulability(model: &RobotModel, arm: &[f64]) -> Manipulability {
    let n = model.arm_dof();
    let det = manipulability_det(model, arm);
    if det <= SINGULAR_DET {
        return Manipulability {
            value: 0.0,
            gradient: DVector::zeros(n),
        };
    }
    let value = det.sqrt();
    let mut q = arm.to_vec();
    let gradient = DVector::from_fn(n, |i, _| {
        let orig = q[i];
        q[i] = orig + MANIP_FD_STEP;
        let up = manipulability_det(model, &q).max(0.0).sqrt();
        q[i] = orig - MANIP_FD_STEP;
        let down = manipulability_det(model, &q).max(0.0).sqrt();
        q[i] = orig;
        (up - down) / (2.0 * MANIP_FD_STEP)
    });
    Manipulability { value, gradient }
}

/// Heading of the EE as seen from the base: `atan2(y, x)` of the EE position
/// in the base frame, in `(-π, π]`. Zero when the EE sits on the base axis.
pub fn base_to_ee_angle(model: &RobotModel, q: &Configuration) -> f64 {
    let poses = forward_kinematics(model, q);
    let local = poses.base.inverse_transform_point(&Point3::from(poses.ee_position()));
    if local.x.abs() < 1e-9 && local.y.abs() < 1e-9 {
        return 0.0;
    }
    let a = local.y.atan2(local.x);
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_config(model: &RobotModel, rng: &mut ChaCha8Rng) -> Configuration {
        let arm = model
            .joints
            .iter()
            .map(|j| rng.gen_range(j.lower()..j.upper()))
            .collect();
        Configuration::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-PI..PI),
            arm,
        )
    }

    fn homogeneous(rpy: [f64; 3], xyz: [f64; 3]) -> Matrix4<f64> {
        let (r, p, y) = (rpy[0], rpy[1], rpy[2]);
        let rx = Matrix4::new(
            1.0, 0.0, 0.0, 0.0, 0.0, r.cos(), -r.sin(), 0.0, 0.0, r.sin(), r.cos(), 0.0, 0.0, 0.0, 0.0, 1.0,
        );
        let ry = Matrix4::new(
            p.cos(), 0.0, p.sin(), 0.0, 0.0, 1.0, 0.0, 0.0, -p.sin(), 0.0, p.cos(), 0.0, 0.0, 0.0, 0.0, 1.0,
        );
        let rz = Matrix4::new(
            y.cos(), -y.sin(), 0.0, 0.0, y.sin(), y.cos(), 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
        );
        let mut t = Matrix4::identity();
        t[(0, 3)] = xyz[0];
        t[(1, 3)] = xyz[1];
        t[(2, 3)] = xyz[2];
        t * rz * ry * rx
    }

    /// Plain 4×4 matrix product of the chain; all joint axes of the test
    /// models are z.
    fn oracle_ee(model: &RobotModel, q: &Configuration) -> Matrix4<f64> {
        let mut t = homogeneous([0.0, 0.0, q.base.theta], [q.base.x, q.base.y, 0.0]);
        t *= homogeneous(model.mount.rpy, model.mount.xyz);
        for (j, a) in model.joints.iter().zip(&q.arm) {
            assert_eq!(j.axis, [0.0, 0.0, 1.0]);
            t = t * homogeneous(j.origin.rpy, j.origin.xyz) * homogeneous([0.0, 0.0, *a], [0.0; 3]);
        }
        t * homogeneous(model.tool.rpy, model.tool.xyz)
    }

    #[test]
    fn zero_angles_compose_fixed_transforms() {
        let model = RobotModel::planar_chain(2, 0.5);
        let q = Configuration::new(0.0, 0.0, 0.0, vec![0.0, 0.0]);
        let fk = forward_kinematics(&model, &q);
        assert_relative_eq!(fk.ee_position(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn base_translation_shifts_ee() {
        let model = RobotModel::default();
        let arm = vec![0.1, -0.5, 0.2, -2.0, 0.3, 1.6, 0.4];
        let a = forward_kinematics(&model, &Configuration::new(0.0, 0.0, 0.0, arm.clone()));
        let b = forward_kinematics(&model, &Configuration::new(1.0, 2.0, 0.0, arm));
        assert_relative_eq!(
            b.ee_position() - a.ee_position(),
            Vector3::new(1.0, 2.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn fk_matches_matrix_product_oracle() {
        let model = RobotModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random_config(&model, &mut rng);
            let fk = forward_kinematics(&model, &q).ee.to_homogeneous();
            let oracle = oracle_ee(&model, &q);
            assert!((fk - oracle).abs().max() < 1e-12);
        }
    }

    #[test]
    fn link_poses_are_rigid() {
        let model = RobotModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_config(&model, &mut rng);
        let fk = forward_kinematics(&model, &q);
        let poses = fk.link_poses();
        assert_eq!(poses.len(), 8);
        for p in poses {
            let r = p.rotation.to_rotation_matrix().into_inner();
            assert!((r.transpose() * r - nalgebra::Matrix3::identity()).abs().max() < 1e-12);
            assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn pure_forward_base_motion() {
        let model = RobotModel::default();
        let q = Configuration::new(0.3, -0.2, 0.7, model.mid_range());
        let jac = whole_body_jacobian(&model, &q);
        let col = jac.column(1);
        assert_relative_eq!(col[0], 0.7f64.cos(), epsilon = 1e-14);
        assert_relative_eq!(col[1], 0.7f64.sin(), epsilon = 1e-14);
        assert_eq!(col[2], 0.0);
        assert!(col.rows(3, 3).norm() == 0.0);
    }

    #[test]
    fn pure_base_rotation() {
        let model = RobotModel::default();
        let q = Configuration::new(0.3, -0.2, 0.7, model.mid_range());
        let jac = whole_body_jacobian(&model, &q);
        let fk = forward_kinematics(&model, &q);
        let expected = Vector3::z().cross(&(fk.ee_position() - Vector3::new(0.3, -0.2, 0.0)));
        let col = jac.column(0);
        assert_relative_eq!(Vector3::new(col[0], col[1], col[2]), expected, epsilon = 1e-14);
        assert_relative_eq!(Vector3::new(col[3], col[4], col[5]), Vector3::z(), epsilon = 1e-14);
    }

    #[test]
    fn two_link_manipulability_closed_form() {
        let len = 0.7;
        let model = RobotModel::planar_chain(2, len);
        for q2 in [0.3, 1.0, 1.5707963, 2.5, -1.2] {
            let m = manipulability(&model, &[0.4, q2]);
            assert_relative_eq!(m.value, len * len * f64::sin(q2).abs(), epsilon = 1e-12);
        }
    }

    #[test]
    fn singular_manipulability_is_zero() {
        let model = RobotModel::planar_chain(2, 0.7);
        let m = manipulability(&model, &[0.4, 0.0]);
        assert_eq!(m.value, 0.0);
        assert!(m.gradient.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn manipulability_ignores_base_pose() {
        let model = RobotModel::default();
        let arm = vec![0.1, -0.5, 0.2, -2.0, 0.3, 1.6, 0.4];
        let a = manipulability(&model, &arm);
        assert!(a.value > 0.0);
        // Same arm on a moved base yields the same arm Jacobian.
        let q = Configuration::new(2.0, -1.0, 2.5, arm.clone());
        let full = whole_body_jacobian(&model, &q);
        let arm_part = full.columns(2, 7).into_owned();
        let rot = forward_kinematics(&model, &q).base.rotation.to_rotation_matrix().into_inner();
        let mut block = DMatrix::zeros(6, 6);
        block.view_mut((0, 0), (3, 3)).copy_from(&rot.transpose());
        block.view_mut((3, 3), (3, 3)).copy_from(&rot.transpose());
        let local = block * arm_part;
        let v = (&local * local.transpose()).determinant().sqrt();
        assert_relative_eq!(v, a.value, epsilon = 1e-12);
    }

    #[test]
    fn base_to_ee_heading_cases() {
        let model = RobotModel::planar_chain(1, 1.0);
        let ahead = Configuration::new(0.0, 0.0, 0.0, vec![0.0]);
        assert_relative_eq!(base_to_ee_angle(&model, &ahead), 0.0);
        let left = Configuration::new(0.0, 0.0, 0.0, vec![PI / 2.0]);
        assert_relative_eq!(base_to_ee_angle(&model, &left), PI / 2.0, epsilon = 1e-12);
        // EE at (1, 1): one link of length sqrt(2) at 45 degrees.
        let diag = RobotModel::planar_chain(1, 2f64.sqrt());
        let q = Configuration::new(0.0, 0.0, 0.0, vec![PI / 4.0]);
        assert_relative_eq!(base_to_ee_angle(&diag, &q), PI / 4.0, epsilon = 1e-12);
        let behind = Configuration::new(0.0, 0.0, 0.0, vec![PI]);
        assert_relative_eq!(base_to_ee_angle(&model, &behind), PI, epsilon = 1e-12);
    }

    #[test]
    fn heading_degenerate_on_axis() {
        let mut model = RobotModel::planar_chain(1, 1.0);
        model.tool = Pose::translation(0.0, 0.0, 0.3);
        let q = Configuration::new(1.0, 1.0, 0.2, vec![0.3]);
        assert_eq!(base_to_ee_angle(&model, &q), 0.0);
    }

    #[test]
    fn wrap_angle_range() {
        assert_relative_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(0.5), 0.5);
        assert!(wrap_angle(-PI + 1e-9) < 0.0);
    }

    #[test]
    fn model_validation_rejects_bad_limits() {
        let mut m = RobotModel::default();
        m.joints[2].limits = [1.0, -1.0];
        assert!(m.validated().is_err());
        let mut m = RobotModel::default();
        m.bodies[0].capsule.radius = 0.0;
        assert!(m.validated().is_err());
    }

    #[test]
    fn model_round_trips_through_toml() {
        let m = RobotModel::default();
        let text = toml::to_string(&m).unwrap();
        let back = RobotModel::from_toml_str(&text).unwrap();
        assert_eq!(m, back);
    }
}
