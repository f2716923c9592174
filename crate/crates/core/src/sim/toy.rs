//! Toy reaching task for learner comparisons: a point end effector driven by
//! velocity commands toward a goal among spheres, observed through a single
//! low-resolution depth camera that looks at the goal.

use nalgebra::{Isometry3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{collision_shaping, quantize_depth, EnvStep, Environment, ObsDims, ObsVec, RewardWeights};
use crate::error::{Error, Result};
use crate::perception::{render_depth, DepthParams, Obstacle, Scene, Workspace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Half extent of the cubic workspace, m.
    pub half_extent: f64,
    pub obstacles: usize,
    pub obstacle_radius: f64,
    /// Radius of the point body used for clearance, m.
    pub body_radius: f64,
    pub max_speed: f64,
    pub depth: DepthParams,
    pub reward: RewardWeights,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            horizon: 50,
            dt: 0.1,
            half_extent: 1.0,
            obstacles: 2,
            obstacle_radius: 0.2,
            body_radius: 0.05,
            max_speed: 1.0,
            depth: DepthParams {
                width: 16,
                height: 16,
                max_range: 3.0,
                frames: 1,
                ..DepthParams::default()
            },
            reward: RewardWeights {
                success_radius: 0.1,
                shaping_distance: 0.2,
                ..RewardWeights::default()
            },
        }
    }
}

pub struct ToyReach {
    pub cfg: ToyConfig,
    scene: Scene,
    pos: Vector3<f64>,
    goal: Vector3<f64>,
    prev_action: Vector3<f64>,
    t: usize,
}

impl ToyReach {
    pub fn new(cfg: ToyConfig) -> Self {
        let h = cfg.half_extent;
        ToyReach {
            scene: Scene::empty(Workspace {
                min: [-h; 3],
                max: [h; 3],
            }),
            cfg,
            pos: Vector3::zeros(),
            goal: Vector3::zeros(),
            prev_action: Vector3::zeros(),
            t: 0,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pos
    }

    pub fn goal(&self) -> Vector3<f64> {
        self.goal
    }

    pub fn clearance(&self) -> f64 {
        self.scene.sdf(&self.pos) - self.cfg.body_radius
    }

    fn camera(&self) -> Isometry3<f64> {
        let dir = self.goal - self.pos;
        let target = if dir.norm() > 1e-9 { self.goal } else { self.pos + Vector3::x() };
        let up = if dir.normalize().z.abs() > 0.99 { Vector3::x() } else { -Vector3::z() };
        // Camera z forward, y down.
        Isometry3::face_towards(&Point3::from(self.pos), &Point3::from(target), &up)
    }

    fn observe(&self) -> ObsVec {
        let img = render_depth(&self.scene, &self.camera(), &self.cfg.depth);
        let mut depth = Vec::with_capacity(img.depths.len() * self.cfg.depth.frames);
        for _ in 0..self.cfg.depth.frames {
            depth.extend(img.depths.iter().map(|d| quantize_depth(*d)));
        }
        let dev = self.goal - self.pos;
        let state = dev
            .iter()
            .chain(self.pos.iter())
            .chain(self.prev_action.iter())
            .map(|v| *v as f32)
            .collect();
        ObsVec { depth, state }
    }
}

impl Environment for ToyReach {
    fn dims(&self) -> ObsDims {
        let d = &self.cfg.depth;
        ObsDims {
            depth: d.width * d.height * d.frames,
            state: 9,
        }
    }

    fn action_dim(&self) -> usize {
        3
    }

    fn action_bounds(&self) -> Vec<f64> {
        vec![self.cfg.max_speed; 3]
    }

    fn max_range(&self) -> f64 {
        self.cfg.depth.max_range
    }

    fn reset(&mut self, seed: u64) -> Result<ObsVec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = self.cfg.half_extent * 0.8;
        let r = self.cfg.obstacle_radius;
        let margin = r + self.cfg.body_radius + 0.1;
        for _ in 0..1000 {
            let mut p = || Vector3::new(rng.gen_range(-h..h), rng.gen_range(-h..h), rng.gen_range(-h..h));
            let start = p();
            let goal = p();
            if (goal - start).norm() < self.cfg.half_extent {
                continue;
            }
            let obstacles: Vec<Obstacle> = (0..self.cfg.obstacles)
                .map(|_| {
                    // Obstacles sit near the segment between start and goal.
                    let s = rng.gen_range(0.3..0.7);
                    let jitter = Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
                    let c = start + (goal - start) * s + jitter;
                    Obstacle::Sphere {
                        center: [c.x, c.y, c.z],
                        radius: r,
                    }
                })
                .collect();
            let clear = |x: &Vector3<f64>| obstacles.iter().all(|o| o.sdf(x) > margin);
            if clear(&start) && clear(&goal) {
                self.scene.obstacles = obstacles;
                self.pos = start;
                self.goal = goal;
                self.prev_action = Vector3::zeros();
                self.t = 0;
                return Ok(self.observe());
            }
        }
        Err(Error::Placement)
    }

    fn step(&mut self, action: &[f64]) -> EnvStep {
        let m = self.cfg.max_speed;
        let a = Vector3::from_fn(|i, _| {
            let v = action.get(i).copied().unwrap_or(0.0);
            if v.is_finite() {
                v.clamp(-m, m)
            } else {
                0.0
            }
        });
        let h = self.cfg.half_extent;
        self.pos = (self.pos + a * self.cfg.dt).map(|v| v.clamp(-h, h));
        self.prev_action = a;
        self.t += 1;
        let w = &self.cfg.reward;
        let dist = (self.goal - self.pos).norm();
        let y = self.clearance();
        let collision = y < 0.0;
        let success = !collision && dist < w.success_radius;
        let mut reward = -w.dev * dist - self.cfg.dt + collision_shaping(y, w);
        if success {
            reward += w.goal_bonus;
        }
        let truncated = !success && !collision && self.t >= self.cfg.horizon;
        EnvStep {
            obs: self.observe(),
            reward,
            terminal: success || collision,
            truncated,
            success,
            collision,
        }
    }
}
