use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{Agent, Batch, UpdateDiagnostics};
use super::replay::{ReplayBuffer, Transition};
use super::TrainingConfig;
use crate::error::{Error, Result};
use crate::sim::Environment;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mean_q: f64,
    pub mean_sigma: f64,
    pub alpha: f64,
}

pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    pub agent: Agent,
    pub rng: ChaCha8Rng,
    pub episodes: usize,
    pub skipped_updates: usize,
    /// Set when any update produced a non-finite gradient.
    pub failure: Option<String>,
}

impl TrainOutcome {
    pub fn final_return(&self) -> Option<f64> {
        self.curve.last().map(|p| p.mean_return)
    }

    pub fn checkpoint(&self, step: usize) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step,
            config: self.agent.cfg.clone(),
            agent: self.agent.clone(),
            rng: self.rng.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub config: TrainingConfig,
    pub agent: Agent,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {} is not supported (expected {CHECKPOINT_VERSION})",
            path.display(),
            ck.version
        )));
    }
    Ok(ck)
}

fn episode_seed(seed: u64, episode: u64) -> u64 {
    (seed << 32) ^ episode
}

fn eval_seed(seed: u64, k: u64) -> u64 {
    (seed << 32) ^ (0xE7A1_0000 + k)
}

/// Undiscounted returns of deterministic (mean-action) episodes.
pub fn evaluate(agent: &Agent, env: &mut dyn Environment, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut obs = env.reset(eval_seed(seed, k as u64))?;
        let mut total = 0.0;
        loop {
            let (a, _, _) = agent.act(&obs, true, &mut rng);
            let s = env.step(&a);
            total += s.reward;
            if s.terminal || s.truncated {
                break;
            }
            obs = s.obs;
        }
        returns.push(total);
    }
    Ok(returns)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Off-policy training with periodic deterministic evaluation on `eval_env`.
pub fn train(env: &mut dyn Environment, eval_env: &mut dyn Environment, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = env.dims();
    let bounds = env.action_bounds();
    let mut agent = Agent::new(dims.depth, dims.state, bounds.clone(), env.max_range(), cfg, &mut rng);
    let mut buf = ReplayBuffer::new(cfg.capacity, dims.depth, dims.state, bounds.len());
    let mut episode = 0u64;
    let mut obs = env.reset(episode_seed(cfg.seed, episode))?;
    let mut curve = Vec::new();
    let mut skipped = 0;
    let mut failure = None;
    let mut window: Vec<UpdateDiagnostics> = Vec::new();
    for step in 1..=cfg.total_steps {
        let (action, raw) = if step <= cfg.warmup_steps {
            let a: Vec<f64> = bounds.iter().map(|b| rng.gen_range(-*b..*b)).collect();
            let raw = a
                .iter()
                .zip(&bounds)
                .map(|(v, b)| (v / b).clamp(-1.0 + 1e-6, 1.0 - 1e-6).atanh())
                .collect();
            (a, raw)
        } else {
            let (a, raw, _) = agent.act(&obs, false, &mut rng);
            (a, raw)
        };
        let s = env.step(&action);
        let next = s.obs.clone();
        buf.push(&Transition {
            obs: std::mem::replace(&mut obs, s.obs),
            action,
            raw_action: raw,
            reward: s.reward,
            next_obs: next,
            done: s.terminal,
        });
        if s.terminal || s.truncated {
            episode += 1;
            obs = env.reset(episode_seed(cfg.seed, episode))?;
        }
        if step > cfg.warmup_steps && buf.len() >= cfg.batch {
            for _ in 0..cfg.replay_ratio {
                let idx = buf.sample_indices(cfg.batch, &mut rng);
                let batch = Batch::from_buffer(&buf, &idx, agent.max_range);
                match agent.update(&batch, &mut rng) {
                    Ok(d) => window.push(d),
                    Err(e) => {
                        log::warn!("step {step}: {e}; update skipped");
                        skipped += 1;
                        failure.get_or_insert_with(|| format!("step {step}: {e}"));
                    }
                }
            }
        }
        if step % cfg.eval_interval == 0 {
            let returns = evaluate(&agent, eval_env, cfg.eval_episodes, cfg.seed)?;
            let (mean_return, std_return) = mean_std(&returns);
            let n = window.len().max(1) as f64;
            curve.push(CurvePoint {
                step,
                mean_return,
                std_return,
                mean_q: window.iter().map(|d| d.critic.mean_q).sum::<f64>() / n,
                mean_sigma: window.iter().map(|d| d.critic.mean_sigma).sum::<f64>() / n,
                alpha: agent.alpha(),
            });
            window.clear();
        }
    }
    Ok(TrainOutcome {
        curve,
        agent,
        rng,
        episodes: episode as usize,
        skipped_updates: skipped,
        failure,
    })
}

pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut out = String::from("step,mean_return,std_return,mean_q,mean_sigma,alpha\n");
    for p in curve {
        out.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            p.step, p.mean_return, p.std_return, p.mean_q, p.mean_sigma, p.alpha
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
