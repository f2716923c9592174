//! Small fully connected networks with hand-written reverse mode and Adam.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Silu,
}

impl Activation {
    fn apply(self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => x.clone(),
            Activation::Tanh => x.mapv(f64::tanh),
            Activation::Silu => x.mapv(|v| v / (1.0 + (-v).exp())),
        }
    }

    /// `dL/dpre` from `dL/dpost`.
    fn backward(self, pre: &Array2<f64>, d_post: Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => d_post,
            Activation::Tanh => {
                let mut d = d_post;
                d.zip_mut_with(pre, |g, x| {
                    let t = x.tanh();
                    *g *= 1.0 - t * t;
                });
                d
            }
            Activation::Silu => {
                let mut d = d_post;
                d.zip_mut_with(pre, |g, x| {
                    let sg = 1.0 / (1.0 + (-x).exp());
                    *g *= sg * (1.0 + x * (1.0 - sg));
                });
                d
            }
        }
    }
}

/// `y = x·W + b` with `W` stored input-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let k = 1.0 / (inputs as f64).sqrt();
        Linear {
            w: Array2::from_shape_fn((inputs, outputs), |_| rng.gen_range(-k..k)),
            b: Array1::from_shape_fn(outputs, |_| rng.gen_range(-k..k)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Per-layer inputs and pre-activations kept for the backward pass.
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes` lists every width including input and output.
    pub fn new<R: Rng>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2);
        Mlp {
            layers: sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
            hidden,
            output,
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    fn act(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let pre = h.dot(&l.w) + &l.b;
            h = self.act(i).apply(&pre);
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let pre = h.dot(&l.w) + &l.b;
            let next = self.act(i).apply(&pre);
            cache.inputs.push(h);
            cache.pre.push(pre);
            h = next;
        }
        (h, cache)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, d_out: Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let mut d = d_out;
        for i in (0..self.layers.len()).rev() {
            let dpre = self.act(i).backward(&cache.pre[i], d);
            let g = &mut grad.layers[i];
            g.w += &cache.inputs[i].t().dot(&dpre);
            g.b += &dpre.sum_axis(Axis(0));
            d = dpre.dot(&self.layers[i].w.t());
        }
        d
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice().unwrap(), l.b.as_slice().unwrap()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_slice_mut().unwrap(), l.b.as_slice_mut().unwrap()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self ← (1 − τ)·self + τ·online`.
    pub fn soft_update(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.tensors_mut().into_iter().zip(online.tensors()) {
            for (a, b) in t.iter_mut().zip(o) {
                *a = (1.0 - tau) * *a + tau * b;
            }
        }
    }
}

/// Horizontal concatenation of row-aligned blocks.
pub fn hcat(parts: &[ArrayView2<f64>]) -> Array2<f64> {
    concatenate(Axis(1), parts).expect("row counts match")
}

/// Columns `[from, to)`.
pub fn cols(x: &Array2<f64>, from: usize, to: usize) -> Array2<f64> {
    x.slice(s![.., from..to]).to_owned()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Mlp, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (net.forward(x.view()) * w).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (hidden, output) in [(Activation::Silu, Activation::Identity), (Activation::Tanh, Activation::Tanh)] {
            let net = Mlp::new(&[3, 5, 4, 2], hidden, output, &mut rng);
            let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
            let w = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
            let (_, cache) = net.forward_cached(x.view());
            let mut grad = net.zeros_like();
            let dx = net.backward(&cache, w.clone(), &mut grad);
            let h = 1e-6;
            let mut probe = net.clone();
            let analytic: Vec<f64> = grad.tensors().concat();
            let mut k = 0;
            for t in 0..probe.tensors().len() {
                for i in 0..probe.tensors()[t].len() {
                    let orig = probe.tensors()[t][i];
                    probe.tensors_mut()[t][i] = orig + h;
                    let lp = loss(&probe, &x, &w);
                    probe.tensors_mut()[t][i] = orig - h;
                    let lm = loss(&probe, &x, &w);
                    probe.tensors_mut()[t][i] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    assert!((fd - analytic[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", analytic[k]);
                    k += 1;
                }
            }
            for i in 0..4 {
                for j in 0..3 {
                    let mut xp = x.clone();
                    xp[(i, j)] += h;
                    let mut xm = x.clone();
                    xm[(i, j)] -= h;
                    let fd = (loss(&net, &xp, &w) - loss(&net, &xm, &w)) / (2.0 * h);
                    assert!((fd - dx[(i, j)]).abs() <= 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn soft_update_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Mlp::new(&[2, 3, 1], Activation::Silu, Activation::Identity, &mut rng);
        let b = Mlp::new(&[2, 3, 1], Activation::Silu, Activation::Identity, &mut rng);
        let mut t = a.clone();
        t.soft_update(&b, 0.0);
        assert_eq!(t, a);
        t.soft_update(&b, 1.0);
        assert_eq!(t, b);
        let mut z = a.zeros_like();
        let mut two = a.zeros_like();
        for p in two.tensors_mut() {
            p.fill(2.0);
        }
        z.soft_update(&two, 0.5);
        assert!(z.tensors().iter().all(|t| t.iter().all(|v| *v == 1.0)));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(vec![x.as_mut_slice()], vec![g.as_slice()]);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3), "{x:?}");
        // A zero gradient on a fresh optimizer leaves parameters unchanged.
        let mut y = vec![1.5];
        Adam::new(0.1).step(vec![y.as_mut_slice()], vec![&[0.0][..]]);
        assert_eq!(y, vec![1.5]);
    }
}
