use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::nn::{cols, hcat, Activation, Adam, Mlp, MlpCache};
use super::replay::ReplayBuffer;
use super::{fuse, target_return, temperature_update, FusionMode, TrainingConfig, ValueDistribution};
use crate::error::{Error, Result};
use crate::sim::{ObsDims, ObsVec};

const LOG_STD_MIN: f64 = -20.0;
const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log density of `bound·tanh(u)` where `u ~ N(mean, exp(log_std)²)`.
pub fn squashed_log_prob(u: f64, mean: f64, log_std: f64, bound: f64) -> f64 {
    let e = (u - mean) / log_std.exp();
    -0.5 * e * e - log_std - HALF_LN_2PI - bound.ln() - 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Reparameterized draw: returns `(action, u, log_prob)` for unit noise `eps`.
pub fn policy_sample(mean: f64, log_std: f64, eps: f64, bound: f64) -> (f64, f64, f64) {
    let ls = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
    let u = mean + ls.exp() * eps;
    let logp = -0.5 * eps * eps - ls - HALF_LN_2PI - bound.ln() - 2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u));
    (bound * u.tanh(), u, logp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    /// Depth stack to latent features; shared by actor and critics.
    pub encoder: Mlp,
    pub actor: Mlp,
    pub critics: [Mlp; 2],
}

impl Networks {
    pub fn new<R: Rng>(depth_dim: usize, state_dim: usize, action_dim: usize, cfg: &TrainingConfig, rng: &mut R) -> Self {
        let latent = cfg.latent;
        let encoder = Mlp::new(&[depth_dim, latent], Activation::Tanh, Activation::Tanh, rng);
        let trunk = |inputs: usize, outputs: usize, rng: &mut R| {
            let mut sizes = vec![inputs];
            sizes.extend_from_slice(&cfg.hidden);
            sizes.push(outputs);
            Mlp::new(&sizes, Activation::Silu, Activation::Identity, rng)
        };
        let actor = trunk(latent + state_dim, 2 * action_dim, rng);
        let c1 = trunk(latent + state_dim + action_dim, 2, rng);
        let c2 = trunk(latent + state_dim + action_dim, 2, rng);
        Networks {
            encoder,
            actor,
            critics: [c1, c2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.actor.is_finite() && self.critics.iter().all(Mlp::is_finite)
    }

    fn soft_update(&mut self, online: &Networks, tau: f64) {
        self.encoder.soft_update(&online.encoder, tau);
        self.actor.soft_update(&online.actor, tau);
        for k in 0..2 {
            self.critics[k].soft_update(&online.critics[k], tau);
        }
    }
}

/// Network-ready minibatch; depth is normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub depth: Array2<f64>,
    pub state: Array2<f64>,
    pub action: Array2<f64>,
    pub reward: Array1<f64>,
    /// 1 for terminal transitions.
    pub done: Array1<f64>,
    pub next_depth: Array2<f64>,
    pub next_state: Array2<f64>,
}

fn depth_matrix<'a>(rows: impl Iterator<Item = &'a [u16]>, n: usize, dim: usize, max_range: f64) -> Array2<f64> {
    let scale = 1.0 / (1000.0 * max_range);
    let mut m = Array2::zeros((n, dim));
    for (i, r) in rows.enumerate() {
        for (j, v) in r.iter().enumerate() {
            m[(i, j)] = *v as f64 * scale;
        }
    }
    m
}

fn state_matrix<'a>(rows: impl Iterator<Item = &'a [f32]>, n: usize, dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((n, dim));
    for (i, r) in rows.enumerate() {
        for (j, v) in r.iter().enumerate() {
            m[(i, j)] = *v as f64;
        }
    }
    m
}

impl Batch {
    pub fn from_buffer(buf: &ReplayBuffer, idx: &[usize], max_range: f64) -> Self {
        let n = idx.len();
        let first = buf.get(idx[0]);
        let (dd, sd, ad) = (first.obs.depth.len(), first.obs.state.len(), first.action.len());
        let mut action = Array2::zeros((n, ad));
        for (i, k) in idx.iter().enumerate() {
            for (j, v) in buf.action_row(*k).iter().enumerate() {
                action[(i, j)] = *v;
            }
        }
        Batch {
            depth: depth_matrix(idx.iter().map(|k| buf.depth_row(*k, false)), n, dd, max_range),
            state: state_matrix(idx.iter().map(|k| buf.state_row(*k, false)), n, sd),
            action,
            reward: idx.iter().map(|k| buf.reward_at(*k)).collect(),
            done: idx.iter().map(|k| if buf.done_at(*k) { 1.0 } else { 0.0 }).collect(),
            next_depth: depth_matrix(idx.iter().map(|k| buf.depth_row(*k, true)), n, dd, max_range),
            next_state: state_matrix(idx.iter().map(|k| buf.state_row(*k, true)), n, sd),
        }
    }

    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticTargets {
    pub tq: Array1<f64>,
    pub tz: Array1<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CriticDiagnostics {
    /// Mean of `T_q − Q` over both heads.
    pub mean_td: f64,
    pub mean_sigma: f64,
    /// Mean fused Q of the online heads.
    pub mean_q: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateDiagnostics {
    pub critic: CriticDiagnostics,
    pub mean_log_prob: f64,
    pub alpha: f64,
}

pub struct CriticGrads {
    pub encoder: Mlp,
    pub critics: [Mlp; 2],
}

struct Heads {
    mean: Array1<f64>,
    sigma: Array1<f64>,
    /// Log-std inside the clamp range, so gradients pass.
    active: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub cfg: TrainingConfig,
    pub action_bounds: Vec<f64>,
    pub max_range: f64,
    pub online: Networks,
    pub target: Networks,
    pub log_alpha: f64,
    pub target_entropy: f64,
    opt_critic: Adam,
    opt_actor: Adam,
    opt_alpha: Adam,
}

impl Agent {
    pub fn new<R: Rng>(depth_dim: usize, state_dim: usize, action_bounds: Vec<f64>, max_range: f64, cfg: &TrainingConfig, rng: &mut R) -> Self {
        let a = action_bounds.len();
        let online = Networks::new(depth_dim, state_dim, a, cfg, rng);
        Agent {
            target: online.clone(),
            online,
            action_bounds,
            max_range,
            log_alpha: cfg.alpha_init.ln(),
            target_entropy: cfg.target_entropy.unwrap_or(-(a as f64)),
            opt_critic: Adam::new(cfg.lr),
            opt_actor: Adam::new(cfg.lr),
            opt_alpha: Adam::new(cfg.lr),
            cfg: cfg.clone(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn action_dim(&self) -> usize {
        self.action_bounds.len()
    }

    /// Observation shape the networks were built for.
    pub fn obs_dims(&self) -> ObsDims {
        let depth = self.online.encoder.layers[0].w.nrows();
        let state = self.online.actor.layers[0].w.nrows() - self.cfg.latent;
        ObsDims { depth, state }
    }

    fn heads(&self, out: &Array2<f64>) -> Heads {
        let (lo, hi) = (self.cfg.sigma_min.ln(), self.cfg.sigma_max.ln());
        let raw = out.column(1);
        Heads {
            mean: out.column(0).to_owned(),
            sigma: raw.mapv(|l| l.clamp(lo, hi).exp()),
            active: raw.iter().map(|l| *l > lo && *l < hi).collect(),
        }
    }

    /// Squashed actions and log-probabilities for actor outputs and noise.
    fn squash(&self, out: &Array2<f64>, eps: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let (n, a) = eps.dim();
        let mut act = Array2::zeros((n, a));
        let mut logp = Array1::zeros(n);
        for i in 0..n {
            for j in 0..a {
                let (v, _, lp) = policy_sample(out[(i, j)], out[(i, a + j)], eps[(i, j)], self.action_bounds[j]);
                act[(i, j)] = v;
                logp[i] += lp;
            }
        }
        (act, logp)
    }

    pub fn noise<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, self.action_dim()), || rng.sample(StandardNormal))
    }

    /// Bootstrapped targets from the target encoder, actor and critics.
    pub fn compute_targets<R: Rng>(&self, batch: &Batch, rng: &mut R) -> CriticTargets {
        let n = batch.len();
        let t = &self.target;
        let z = t.encoder.forward(batch.next_depth.view());
        let xa = hcat(&[z.view(), batch.next_state.view()]);
        let out = t.actor.forward(xa.view());
        let eps = self.noise(n, rng);
        let (act, logp) = self.squash(&out, &eps);
        let xc = hcat(&[z.view(), batch.next_state.view(), act.view()]);
        let h1 = self.heads(&t.critics[0].forward(xc.view()));
        let h2 = self.heads(&t.critics[1].forward(xc.view()));
        let alpha = self.alpha();
        let mut tq = Array1::zeros(n);
        let mut tz = Array1::zeros(n);
        for i in 0..n {
            let d1 = ValueDistribution::new(h1.mean[i], h1.sigma[i]);
            let d2 = ValueDistribution::new(h2.mean[i], h2.sigma[i]);
            let f = fuse(self.cfg.fusion_mode, d1, d2, self.cfg.sigma_min, self.cfg.sigma_max);
            let xi: f64 = rng.sample(StandardNormal);
            let (q, zr) = target_return(batch.reward[i], batch.done[i] > 0.5, self.cfg.gamma, alpha, f, logp[i], f.mean + f.std * xi);
            tq[i] = q;
            tz[i] = if self.cfg.fusion_mode == FusionMode::ScalarDoubleQ { q } else { zr };
        }
        CriticTargets { tq, tz }
    }

    /// Online head means and deviations, used as the detached coefficients.
    pub fn critic_detached(&self, nets: &Networks, batch: &Batch) -> [(Array1<f64>, Array1<f64>); 2] {
        let z = nets.encoder.forward(batch.depth.view());
        let x = hcat(&[z.view(), batch.state.view(), batch.action.view()]);
        let mut out = [(Array1::zeros(0), Array1::zeros(0)), (Array1::zeros(0), Array1::zeros(0))];
        for k in 0..2 {
            let h = self.heads(&nets.critics[k].forward(x.view()));
            out[k] = (h.mean, h.sigma);
        }
        out
    }

    /// Per-sample coefficients `(∂L/∂Q, ∂L/∂σ)` with targets and the
    /// detached head values held constant.
    fn critic_coefficients(&self, tq: f64, tz: f64, qd: f64, sd: f64) -> (f64, f64) {
        if self.cfg.fusion_mode == FusionMode::ScalarDoubleQ {
            return (qd - tq, 0.0);
        }
        let b = self.cfg.clip_b;
        let tzc = tz.clamp(qd - b, qd + b);
        assert!(tzc >= qd - b && tzc <= qd + b, "clipped target outside [Q - b, Q + b]");
        let v = sd * sd;
        (-(tq - qd) / v, -((tzc - qd).powi(2) - v) / (v * sd))
    }

    /// Surrogate critic loss with frozen coefficients (its gradient is the
    /// update direction).
    pub fn critic_surrogate(&self, nets: &Networks, batch: &Batch, targets: &CriticTargets, detached: &[(Array1<f64>, Array1<f64>); 2]) -> f64 {
        let n = batch.len() as f64;
        let z = nets.encoder.forward(batch.depth.view());
        let x = hcat(&[z.view(), batch.state.view(), batch.action.view()]);
        let mut loss = 0.0;
        for k in 0..2 {
            let h = self.heads(&nets.critics[k].forward(x.view()));
            for i in 0..batch.len() {
                if self.cfg.fusion_mode == FusionMode::ScalarDoubleQ {
                    loss += 0.5 * (h.mean[i] - targets.tq[i]).powi(2) / n;
                } else {
                    let (cq, cs) = self.critic_coefficients(targets.tq[i], targets.tz[i], detached[k].0[i], detached[k].1[i]);
                    loss += (cq * h.mean[i] + cs * h.sigma[i]) / n;
                }
            }
        }
        loss
    }

    pub fn critic_gradients(&self, batch: &Batch, targets: &CriticTargets) -> (CriticGrads, CriticDiagnostics) {
        let nets = &self.online;
        let n = batch.len();
        let latent = nets.encoder.outputs();
        let (z, enc_cache) = nets.encoder.forward_cached(batch.depth.view());
        let x = hcat(&[z.view(), batch.state.view(), batch.action.view()]);
        let mut grads = CriticGrads {
            encoder: nets.encoder.zeros_like(),
            critics: [nets.critics[0].zeros_like(), nets.critics[1].zeros_like()],
        };
        let mut dz = Array2::zeros((n, latent));
        let mut diag = CriticDiagnostics::default();
        let mut heads = Vec::with_capacity(2);
        for k in 0..2 {
            let (out, cache) = nets.critics[k].forward_cached(x.view());
            let h = self.heads(&out);
            let mut dout = Array2::zeros((n, 2));
            for i in 0..n {
                let (q, sd) = (h.mean[i], h.sigma[i]);
                let (cq, cs) = self.critic_coefficients(targets.tq[i], targets.tz[i], q, sd);
                dout[(i, 0)] = cq / n as f64;
                if h.active[i] {
                    dout[(i, 1)] = cs * sd / n as f64;
                }
                diag.mean_td += (targets.tq[i] - q) / (2 * n) as f64;
            }
            let dx = nets.critics[k].backward(&cache, dout, &mut grads.critics[k]);
            dz += &dx.slice(s![.., 0..latent]);
            heads.push(h);
        }
        nets.encoder.backward(&enc_cache, dz, &mut grads.encoder);
        for i in 0..n {
            let d1 = ValueDistribution::new(heads[0].mean[i], heads[0].sigma[i]);
            let d2 = ValueDistribution::new(heads[1].mean[i], heads[1].sigma[i]);
            let f = fuse(self.cfg.fusion_mode, d1, d2, self.cfg.sigma_min, self.cfg.sigma_max);
            diag.mean_q += f.mean / n as f64;
            diag.mean_sigma += f.std / n as f64;
        }
        (grads, diag)
    }

    /// Fused Q and its partials `(∂Q/∂μ_k, ∂Q/∂σ_k)` for one sample.
    fn fused_q(&self, m: [f64; 2], sd: [f64; 2]) -> (f64, [f64; 2], [f64; 2]) {
        match self.cfg.fusion_mode {
            FusionMode::Bayes => {
                let v = [sd[0] * sd[0], sd[1] * sd[1]];
                let s = v[0] + v[1];
                let q = (m[0] * v[1] + m[1] * v[0]) / s;
                let dv0 = v[1] * (m[1] - m[0]) / (s * s);
                let dv1 = v[0] * (m[0] - m[1]) / (s * s);
                (q, [v[1] / s, v[0] / s], [dv0 * 2.0 * sd[0], dv1 * 2.0 * sd[1]])
            }
            FusionMode::Min | FusionMode::ScalarDoubleQ => {
                if m[1] < m[0] {
                    (m[1], [0.0, 1.0], [0.0; 2])
                } else {
                    (m[0], [1.0, 0.0], [0.0; 2])
                }
            }
        }
    }

    /// `mean(α·log π − Q_fused)` under fixed noise, critics and encoder.
    pub fn actor_objective(&self, nets: &Networks, batch: &Batch, eps: &Array2<f64>, alpha: f64) -> f64 {
        let z = nets.encoder.forward(batch.depth.view());
        let xa = hcat(&[z.view(), batch.state.view()]);
        let out = nets.actor.forward(xa.view());
        let (act, logp) = self.squash(&out, eps);
        let xc = hcat(&[z.view(), batch.state.view(), act.view()]);
        let h1 = self.heads(&nets.critics[0].forward(xc.view()));
        let h2 = self.heads(&nets.critics[1].forward(xc.view()));
        let n = batch.len();
        (0..n)
            .map(|i| {
                let (q, _, _) = self.fused_q([h1.mean[i], h2.mean[i]], [h1.sigma[i], h2.sigma[i]]);
                alpha * logp[i] - q
            })
            .sum::<f64>()
            / n as f64
    }

    /// Actor parameter gradient, mean log-probability and objective value.
    pub fn actor_gradients(&self, batch: &Batch, eps: &Array2<f64>, alpha: f64) -> (Mlp, f64, f64) {
        let nets = &self.online;
        let n = batch.len();
        let a = self.action_dim();
        let nf = n as f64;
        let z = nets.encoder.forward(batch.depth.view());
        let xa = hcat(&[z.view(), batch.state.view()]);
        let (out, acache) = nets.actor.forward_cached(xa.view());
        let (act, logp) = self.squash(&out, eps);
        let xc = hcat(&[z.view(), batch.state.view(), act.view()]);
        let from = z.ncols() + batch.state.ncols();
        let mut caches = Vec::with_capacity(2);
        let mut heads = Vec::with_capacity(2);
        for k in 0..2 {
            let (o, c) = nets.critics[k].forward_cached(xc.view());
            heads.push(self.heads(&o));
            caches.push(c);
        }
        let mut douts = [Array2::zeros((n, 2)), Array2::zeros((n, 2))];
        let mut objective = 0.0;
        for i in 0..n {
            let m = [heads[0].mean[i], heads[1].mean[i]];
            let sd = [heads[0].sigma[i], heads[1].sigma[i]];
            let (q, dm, ds) = self.fused_q(m, sd);
            objective += (alpha * logp[i] - q) / nf;
            for k in 0..2 {
                douts[k][(i, 0)] = -dm[k] / nf;
                if heads[k].active[i] {
                    // σ = exp(raw), so ∂σ/∂raw = σ.
                    douts[k][(i, 1)] = -ds[k] * sd[k] / nf;
                }
            }
        }
        let mut da = Array2::<f64>::zeros((n, a));
        let [d0, d1] = douts;
        for (k, d) in [d0, d1].into_iter().enumerate() {
            let mut scratch = nets.critics[k].zeros_like();
            let dx = nets.critics[k].backward(&caches[k], d, &mut scratch);
            da += &cols(&dx, from, from + a);
        }
        let grad = self.actor_backward(&out, &acache, eps, &da, alpha);
        (grad, logp.mean().unwrap_or(0.0), objective)
    }

    /// Backpropagates `dJ/da` plus the entropy term through the squash and
    /// the actor trunk.
    fn actor_backward(&self, out: &Array2<f64>, cache: &MlpCache, eps: &Array2<f64>, da: &Array2<f64>, alpha: f64) -> Mlp {
        let (n, a) = eps.dim();
        let nf = n as f64;
        let mut dout = Array2::zeros((n, 2 * a));
        for i in 0..n {
            for j in 0..a {
                let raw_ls = out[(i, a + j)];
                let ls = raw_ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
                let std = ls.exp();
                let u = out[(i, j)] + std * eps[(i, j)];
                let t = u.tanh();
                let du = da[(i, j)] * self.action_bounds[j] * (1.0 - t * t) + alpha / nf * 2.0 * t;
                dout[(i, j)] = du;
                if raw_ls > LOG_STD_MIN && raw_ls < LOG_STD_MAX {
                    dout[(i, a + j)] = du * std * eps[(i, j)] - alpha / nf;
                }
            }
        }
        let mut grad = self.online.actor.zeros_like();
        self.online.actor.backward(cache, dout, &mut grad);
        grad
    }

    /// One full update: critics and encoder, actor, temperature, targets.
    /// A non-finite gradient skips the remaining steps.
    pub fn update<R: Rng>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateDiagnostics> {
        let targets = self.compute_targets(batch, rng);
        let (cg, critic) = self.critic_gradients(batch, &targets);
        if !(cg.encoder.is_finite() && cg.critics.iter().all(Mlp::is_finite)) {
            return Err(Error::NonFiniteGradient("critic"));
        }
        {
            let Networks { encoder, critics, .. } = &mut self.online;
            let [c0, c1] = critics;
            let mut params = encoder.tensors_mut();
            params.extend(c0.tensors_mut());
            params.extend(c1.tensors_mut());
            let mut grads = cg.encoder.tensors();
            grads.extend(cg.critics[0].tensors());
            grads.extend(cg.critics[1].tensors());
            self.opt_critic.step(params, grads);
        }
        let eps = self.noise(batch.len(), rng);
        let (ag, mean_log_prob, _) = self.actor_gradients(batch, &eps, self.alpha());
        if !ag.is_finite() || !mean_log_prob.is_finite() {
            return Err(Error::NonFiniteGradient("actor"));
        }
        self.opt_actor.step(self.online.actor.tensors_mut(), ag.tensors());
        if self.cfg.auto_alpha {
            temperature_update(&mut self.log_alpha, &mut self.opt_alpha, mean_log_prob, self.target_entropy);
        }
        self.target.soft_update(&self.online, self.cfg.tau);
        Ok(UpdateDiagnostics {
            critic,
            mean_log_prob,
            alpha: self.alpha(),
        })
    }

    fn actor_out(&self, obs: &ObsVec) -> Array1<f64> {
        let depth = depth_matrix(std::iter::once(obs.depth.as_slice()), 1, obs.depth.len(), self.max_range);
        let state = state_matrix(std::iter::once(obs.state.as_slice()), 1, obs.state.len());
        let z = self.online.encoder.forward(depth.view());
        let x = hcat(&[z.view(), state.view()]);
        self.online.actor.forward(x.view()).index_axis_move(Axis(0), 0)
    }

    /// Action for one observation: `(squashed, pre-squash, log π)`. The
    /// deterministic variant returns the squashed mean.
    pub fn act<R: Rng>(&self, obs: &ObsVec, deterministic: bool, rng: &mut R) -> (Vec<f64>, Vec<f64>, f64) {
        let out = self.actor_out(obs);
        let a = self.action_dim();
        let mut action = Vec::with_capacity(a);
        let mut raw = Vec::with_capacity(a);
        let mut logp = 0.0;
        for j in 0..a {
            let eps = if deterministic { 0.0 } else { rng.sample(StandardNormal) };
            let (v, u, lp) = policy_sample(out[j], out[a + j], eps, self.action_bounds[j]);
            action.push(v);
            raw.push(u);
            logp += lp;
        }
        (action, raw, logp)
    }

    /// Stochastic action with noise drawn from `noise_seed`.
    pub fn policy_forward(&self, obs: &ObsVec, noise_seed: u64) -> (Vec<f64>, f64) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise_seed);
        let (a, _, lp) = self.act(obs, false, &mut rng);
        (a, lp)
    }
}
