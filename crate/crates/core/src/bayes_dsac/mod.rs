//! Distributional soft actor-critic with twin Gaussian value heads.
//!
//! The two critic heads are combined by precision weighting (`bayes`), by
//! picking the head with the smaller mean (`min`), or treated as plain scalar
//! Q-functions with a min over the pair (`scalar_double_q`).

mod agent;
pub mod nn;
pub mod replay;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use agent::{
    policy_sample, squashed_log_prob, Agent, Batch, CriticDiagnostics, CriticGrads, CriticTargets, Networks, UpdateDiagnostics,
};
pub use replay::{ReplayBuffer, Transition};
pub use train::{evaluate, load_checkpoint, train, write_curve_csv, Checkpoint, CurvePoint, TrainOutcome, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Bayes,
    Min,
    ScalarDoubleQ,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Bayes => "bayes",
            FusionMode::Min => "min",
            FusionMode::ScalarDoubleQ => "scalar_double_q",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub gamma: f64,
    pub alpha_init: f64,
    pub auto_alpha: bool,
    /// Defaults to minus the action dimension.
    pub target_entropy: Option<f64>,
    pub tau: f64,
    /// Clip boundary of the variance-term target, return units.
    pub clip_b: f64,
    pub lr: f64,
    pub batch: usize,
    pub capacity: usize,
    pub replay_ratio: usize,
    pub fusion_mode: FusionMode,
    pub seed: u64,
    pub total_steps: usize,
    /// Uniform random actions before the first update.
    pub warmup_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            gamma: 0.99,
            alpha_init: 0.2,
            auto_alpha: true,
            target_entropy: None,
            tau: 0.005,
            clip_b: 10.0,
            lr: 3e-4,
            batch: 256,
            capacity: 200_000,
            replay_ratio: 1,
            fusion_mode: FusionMode::Bayes,
            seed: 0,
            total_steps: 100_000,
            warmup_steps: 1000,
            eval_interval: 6000,
            eval_episodes: 2,
            hidden: vec![128, 128],
            latent: 32,
            sigma_min: 1e-3,
            sigma_max: 1e3,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                path: "<training>".into(),
                line: 0,
                field: format!("training.{field}"),
                message: message.into(),
            })
        };
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma", "must lie in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau", "must lie in (0, 1]");
        }
        if !(self.clip_b > 0.0) {
            return bad("clip_b", "must be positive");
        }
        if self.replay_ratio < 1 {
            return bad("replay_ratio", "must be at least 1");
        }
        if self.batch == 0 || self.capacity == 0 || self.eval_interval == 0 {
            return bad("batch", "batch, capacity and eval_interval must be positive");
        }
        if !(self.alpha_init > 0.0) || !(self.lr > 0.0) {
            return bad("alpha_init", "temperature and step size must be positive");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return bad("sigma_min", "need 0 < sigma_min < sigma_max");
        }
        Ok(())
    }
}

/// Gaussian estimate of the soft return.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueDistribution {
    pub mean: f64,
    pub std: f64,
}

impl ValueDistribution {
    pub fn new(mean: f64, std: f64) -> Self {
        ValueDistribution { mean, std }
    }
}

/// Precision-weighted product of two Gaussians, before clamping.
pub fn bayes_fuse_raw(d1: ValueDistribution, d2: ValueDistribution) -> ValueDistribution {
    let v1 = d1.std * d1.std;
    let v2 = d2.std * d2.std;
    let mean = (d1.mean * v2 + d2.mean * v1) / (v1 + v2);
    let var = v1 * v2 / (v1 + v2);
    ValueDistribution { mean, std: var.sqrt() }
}

pub fn bayes_fuse(d1: ValueDistribution, d2: ValueDistribution, sigma_min: f64, sigma_max: f64) -> ValueDistribution {
    let f = bayes_fuse_raw(d1, d2);
    ValueDistribution {
        mean: f.mean,
        std: f.std.clamp(sigma_min, sigma_max),
    }
}

/// Combined head for a fusion mode. Ties in `min` go to the first head.
pub fn fuse(mode: FusionMode, d1: ValueDistribution, d2: ValueDistribution, sigma_min: f64, sigma_max: f64) -> ValueDistribution {
    match mode {
        FusionMode::Bayes => bayes_fuse(d1, d2, sigma_min, sigma_max),
        FusionMode::Min => {
            if d2.mean < d1.mean {
                d2
            } else {
                d1
            }
        }
        FusionMode::ScalarDoubleQ => ValueDistribution {
            mean: d1.mean.min(d2.mean),
            std: 0.0,
        },
    }
}

/// Soft targets for one transition given the fused next-state head.
/// `z` is one draw from that head (ignored by the scalar mode).
pub fn target_return(reward: f64, done: bool, gamma: f64, alpha: f64, next: ValueDistribution, next_log_prob: f64, z: f64) -> (f64, f64) {
    let mask = if done { 0.0 } else { gamma };
    let tq = reward + mask * (next.mean - alpha * next_log_prob);
    let tz = reward + mask * (z - alpha * next_log_prob);
    (tq, tz)
}

/// One Adam step on `log α`, descending `−log α·(log π + H̄)`.
pub fn temperature_update(log_alpha: &mut f64, opt: &mut nn::Adam, mean_log_prob: f64, target_entropy: f64) {
    let grad = -(mean_log_prob + target_entropy);
    let mut p = [*log_alpha];
    opt.step(vec![&mut p[..]], vec![&[grad][..]]);
    *log_alpha = p[0];
}
