//! Depth rendering, local point-cloud map, and robot-centric clearances.
//!
//! Each collision body is a capsule. The clearance of body `k` is the signed
//! distance from its capsule to the nearest point of the accumulated cloud;
//! its joint-space gradient is taken by central differences with the nearest
//! cloud point held fixed.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Isometry3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, BodyParent, ChainPoses, Configuration, RobotModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Obstacle {
    Sphere { center: [f64; 3], radius: f64 },
    Box { min: [f64; 3], max: [f64; 3] },
}

impl Obstacle {
    /// Signed distance from `p` to the obstacle surface.
    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Obstacle::Sphere { center, radius } => (p - Vector3::from(*center)).norm() - radius,
            Obstacle::Box { min, max } => {
                let c = (Vector3::from(*min) + Vector3::from(*max)) * 0.5;
                let h = (Vector3::from(*max) - Vector3::from(*min)) * 0.5;
                let d = (p - c).abs() - h;
                let outside = d.map(|x| x.max(0.0)).norm();
                let inside = d.max().min(0.0);
                outside + inside
            }
        }
    }

    /// Smallest positive ray parameter at which the unit ray hits the surface.
    pub fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-12;
        match self {
            Obstacle::Sphere { center, radius } => {
                let oc = origin - Vector3::from(*center);
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = -b - s;
                let t1 = -b + s;
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Obstacle::Box { min, max } => {
                let mut tmin = f64::NEG_INFINITY;
                let mut tmax = f64::INFINITY;
                for k in 0..3 {
                    if dir[k].abs() < 1e-300 {
                        if origin[k] < min[k] || origin[k] > max[k] {
                            return None;
                        }
                    } else {
                        let inv = 1.0 / dir[k];
                        let mut t1 = (min[k] - origin[k]) * inv;
                        let mut t2 = (max[k] - origin[k]) * inv;
                        if t1 > t2 {
                            std::mem::swap(&mut t1, &mut t2);
                        }
                        tmin = tmin.max(t1);
                        tmax = tmax.min(t2);
                    }
                }
                if tmax < tmin {
                    return None;
                }
                if tmin > EPS {
                    Some(tmin)
                } else if tmax > EPS {
                    Some(tmax)
                } else {
                    None
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Obstacle::Sphere { center, radius } => {
                if !(*radius > 0.0) || center.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidScene("sphere radius must be positive".into()));
                }
            }
            Obstacle::Box { min, max } => {
                if (0..3).any(|k| !(min[k] < max[k])) {
                    return Err(Error::InvalidScene("box min must be below max".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Workspace {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    #[serde(default)]
    pub name: String,
    pub workspace: Workspace,
    /// Region goals are sampled from; defaults to the workspace.
    #[serde(default)]
    pub goal_region: Option<Workspace>,
    /// Fixed EE goal. When absent, `reset` samples one.
    #[serde(default)]
    pub goal: Option<[f64; 3]>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

impl Scene {
    pub fn empty(workspace: Workspace) -> Self {
        Scene {
            name: "empty".into(),
            workspace,
            goal_region: None,
            goal: None,
            obstacles: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|k| !(self.workspace.min[k] < self.workspace.max[k])) {
            return Err(Error::InvalidScene("workspace min must be below max".into()));
        }
        for o in &self.obstacles {
            o.validate()?;
        }
        if let Some(g) = self.goal {
            if !self.workspace.contains(&Vector3::from(g)) {
                return Err(Error::InvalidScene("goal outside workspace".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scene: Scene = crate::config::parse_toml(path, &text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Exact signed distance between a capsule and the scene. Obstacle SDFs
    /// are convex, so their restriction to the segment is minimized by
    /// golden-section search.
    pub fn capsule_distance(&self, a: &Vector3<f64>, b: &Vector3<f64>, radius: f64) -> f64 {
        let mut best = f64::INFINITY;
        for o in &self.obstacles {
            let d = match o {
                Obstacle::Sphere { center, radius: r } => {
                    point_segment_distance(&Vector3::from(*center), a, b) - r
                }
                Obstacle::Box { .. } => {
                    let f = |t: f64| o.sdf(&(a + (b - a) * t));
                    golden_min(f, 0.0, 1.0)
                }
            };
            best = best.min(d - radius);
        }
        best
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..80 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    f(lo).min(f(hi)).min(f1).min(f2)
}

pub fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + ab * t)).norm()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthParams {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in radians.
    pub fov: f64,
    pub max_range: f64,
    /// Frames kept in the local map and the observation stack.
    pub frames: usize,
    pub cloud_cap: usize,
}

impl Default for DepthParams {
    fn default() -> Self {
        DepthParams {
            width: 16,
            height: 16,
            fov: std::f64::consts::FRAC_PI_2,
            max_range: 10.0,
            frames: 5,
            cloud_cap: 8192,
        }
    }
}

impl DepthParams {
    /// Unit ray through the center of pixel `(u, v)` in the camera frame
    /// (z forward, x right, y down).
    pub fn ray(&self, u: usize, v: usize) -> Vector3<f64> {
        let f = (self.fov * 0.5).tan();
        let aspect = self.height as f64 / self.width as f64;
        let x = ((u as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * f;
        let y = ((v as f64 + 0.5) / self.height as f64 * 2.0 - 1.0) * f * aspect;
        Vector3::new(x, y, 1.0).normalize()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub fov: f64,
    pub max_range: f64,
    /// Row-major range along each pixel ray, meters.
    pub depths: Vec<f64>,
}

impl DepthImage {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depths[v * self.width + u]
    }
}

pub fn render_depth(scene: &Scene, camera_pose: &Isometry3<f64>, params: &DepthParams) -> DepthImage {
    let origin = camera_pose.translation.vector;
    let mut depths = Vec::with_capacity(params.width * params.height);
    for v in 0..params.height {
        for u in 0..params.width {
            let dir = camera_pose.rotation * params.ray(u, v);
            let hit = scene
                .obstacles
                .iter()
                .filter_map(|o| o.ray_hit(&origin, &dir))
                .fold(params.max_range, f64::min);
            depths.push(hit.min(params.max_range));
        }
    }
    DepthImage {
        width: params.width,
        height: params.height,
        fov: params.fov,
        max_range: params.max_range,
        depths,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn write_xyz(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for p in &self.points {
            writeln!(f, "{:.9} {:.9} {:.9}", p.x, p.y, p.z).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Back-projects every hit pixel of the given frames into the world frame.
/// When more than `cap` points result, a seeded reservoir sample is kept.
pub fn accumulate_cloud(frames: &[(DepthImage, Isometry3<f64>)], cap: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Vector3<f64>> = Vec::new();
    let mut seen = 0usize;
    for (img, pose) in frames {
        let params = DepthParams {
            width: img.width,
            height: img.height,
            fov: img.fov,
            max_range: img.max_range,
            ..DepthParams::default()
        };
        for v in 0..img.height {
            for u in 0..img.width {
                let d = img.at(u, v);
                if d >= img.max_range {
                    continue;
                }
                let p = pose.transform_point(&Point3::from(params.ray(u, v) * d)).coords;
                if points.len() < cap {
                    points.push(p);
                } else {
                    let j = rng.gen_range(0..=seen);
                    if j < cap {
                        points[j] = p;
                    }
                }
                seen += 1;
            }
        }
    }
    PointCloud { points }
}

/// Per-body clearances and their gradients with respect to `(ω, v, q̇_arm)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClearanceSet {
    pub distances: DVector<f64>,
    /// Row `k` is the gradient of clearance `k`.
    pub gradients: DMatrix<f64>,
}

impl ClearanceSet {
    pub fn min(&self) -> f64 {
        self.distances.min()
    }

    /// All bodies at the sentinel clearance with zero gradients.
    pub fn clear(bodies: usize, dof: usize, sentinel: f64) -> Self {
        ClearanceSet {
            distances: DVector::from_element(bodies, sentinel),
            gradients: DMatrix::zeros(bodies, dof),
        }
    }
}

const CLEARANCE_FD_STEP: f64 = 1e-5;
const TIE_TOL: f64 = 1e-9;

fn capsule_world(poses: &ChainPoses, parent: BodyParent, a: &Point3<f64>, b: &Point3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let t = poses.parent_pose(parent);
    (t.transform_point(a).coords, t.transform_point(b).coords)
}

/// Configuration displaced by `h` along velocity coordinate `dof`.
pub fn displaced(q: &Configuration, dof: usize, h: f64) -> Configuration {
    let mut out = q.clone();
    match dof {
        0 => out.base.theta += h,
        1 => {
            out.base.x += h * q.base.theta.cos();
            out.base.y += h * q.base.theta.sin();
        }
        i => out.arm[i - 2] += h,
    }
    out
}

fn depends_on(parent: BodyParent, dof: usize) -> bool {
    match parent {
        BodyParent::Base => dof < 2,
        BodyParent::Joint(j) => dof < 2 || dof - 2 <= j,
    }
}

struct Nearest {
    index: usize,
    distance: f64,
}

fn nearest_point(cloud: &PointCloud, a: &Vector3<f64>, b: &Vector3<f64>, radius: f64) -> Option<Nearest> {
    let mut min = f64::INFINITY;
    for p in &cloud.points {
        min = min.min(point_segment_distance(p, a, b));
    }
    if !min.is_finite() {
        return None;
    }
    // First point in order within the tie tolerance of the minimum.
    let index = cloud
        .points
        .iter()
        .position(|p| point_segment_distance(p, a, b) <= min + TIE_TOL)?;
    Some(Nearest {
        index,
        distance: min - radius,
    })
}

fn body_clearance(
    model: &RobotModel,
    poses: &ChainPoses,
    displaced_poses: &[(ChainPoses, ChainPoses)],
    cloud: &PointCloud,
    body: usize,
    sentinel: f64,
) -> (f64, Vec<f64>) {
    let n = model.dof();
    let b = &model.bodies[body];
    let parent = b.parent_link();
    let (ca, cb) = (b.capsule.a(), b.capsule.b());
    let (wa, wb) = capsule_world(poses, parent, &ca, &cb);
    let Some(near) = nearest_point(cloud, &wa, &wb, b.capsule.radius) else {
        return (sentinel, vec![0.0; n]);
    };
    let p = cloud.points[near.index];
    let mut grad = vec![0.0; n];
    for (dof, (up, down)) in displaced_poses.iter().enumerate() {
        if !depends_on(parent, dof) {
            continue;
        }
        let (ua, ub) = capsule_world(up, parent, &ca, &cb);
        let (da, db) = capsule_world(down, parent, &ca, &cb);
        let fu = point_segment_distance(&p, &ua, &ub);
        let fd = point_segment_distance(&p, &da, &db);
        grad[dof] = (fu - fd) / (2.0 * CLEARANCE_FD_STEP);
    }
    (near.distance, grad)
}

fn displaced_chain(model: &RobotModel, q: &Configuration) -> Vec<(ChainPoses, ChainPoses)> {
    (0..model.dof())
        .map(|dof| {
            (
                forward_kinematics(model, &displaced(q, dof, CLEARANCE_FD_STEP)),
                forward_kinematics(model, &displaced(q, dof, -CLEARANCE_FD_STEP)),
            )
        })
        .collect()
}

/// Clearance of every collision body against the cloud. An empty cloud
/// yields `sentinel` (the depth range) with zero gradients.
pub fn link_clearances(model: &RobotModel, q: &Configuration, cloud: &PointCloud, sentinel: f64) -> ClearanceSet {
    let nb = model.bodies.len();
    if cloud.is_empty() {
        return ClearanceSet::clear(nb, model.dof(), sentinel);
    }
    let poses = forward_kinematics(model, q);
    let disp = displaced_chain(model, q);
    let rows: Vec<_> = (0..nb)
        .map(|k| body_clearance(model, &poses, &disp, cloud, k, sentinel))
        .collect();
    assemble(rows, model.dof())
}

/// Same as [`link_clearances`] with bodies evaluated on the rayon pool.
pub fn link_clearances_par(model: &RobotModel, q: &Configuration, cloud: &PointCloud, sentinel: f64) -> ClearanceSet {
    let nb = model.bodies.len();
    if cloud.is_empty() {
        return ClearanceSet::clear(nb, model.dof(), sentinel);
    }
    let poses = forward_kinematics(model, q);
    let disp = displaced_chain(model, q);
    let rows: Vec<_> = (0..nb)
        .into_par_iter()
        .map(|k| body_clearance(model, &poses, &disp, cloud, k, sentinel))
        .collect();
    assemble(rows, model.dof())
}

fn assemble(rows: Vec<(f64, Vec<f64>)>, dof: usize) -> ClearanceSet {
    let nb = rows.len();
    let mut distances = DVector::zeros(nb);
    let mut gradients = DMatrix::zeros(nb, dof);
    for (k, (d, g)) in rows.into_iter().enumerate() {
        distances[k] = d;
        for (j, v) in g.into_iter().enumerate() {
            gradients[(k, j)] = v;
        }
    }
    ClearanceSet { distances, gradients }
}

/// Exact clearance of every body against the scene geometry.
pub fn true_clearances(model: &RobotModel, q: &Configuration, scene: &Scene) -> DVector<f64> {
    let poses = forward_kinematics(model, q);
    DVector::from_iterator(
        model.bodies.len(),
        model.bodies.iter().map(|b| {
            let (wa, wb) = capsule_world(&poses, b.parent_link(), &b.capsule.a(), &b.capsule.b());
            scene.capsule_distance(&wa, &wb, b.capsule.radius)
        }),
    )
}
