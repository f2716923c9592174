//! Dense operator-splitting QP solver.
//!
//! Solves `min ½xᵀHx + cᵀx` subject to `A_eq x = b_eq`, `A_ineq x ≤ b_ineq`
//! and `lower ≤ x ≤ upper`. All constraints are stacked into a single
//! `l ≤ A x ≤ u` block and handled by ADMM with Ruiz equilibration, adaptive
//! step size and an active-set polishing pass that recovers a high-accuracy
//! solution once the active set has settled.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Problem with only a cost and box bounds.
    pub fn unconstrained(h: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        QpProblem {
            h,
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_ineq: DMatrix::zeros(0, n),
            b_ineq: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.c.dot(x)
    }

    /// Largest violation of any constraint at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let eq = (&self.a_eq * x - &self.b_eq).amax();
        let ineq = (&self.a_ineq * x - &self.b_ineq).iter().fold(0.0f64, |m, v| m.max(*v));
        let bx = x
            .iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .fold(0.0f64, |m, (v, (l, u))| m.max(l - v).max(v - u));
        eq.max(ineq).max(bx)
    }

    pub fn is_consistent(&self) -> bool {
        let n = self.dim();
        self.h.shape() == (n, n)
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_ineq.ncols() == n
            && self.a_ineq.nrows() == self.b_ineq.len()
            && self.lower.len() == n
            && self.upper.len() == n
    }

    fn stacked(&self) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let n = self.dim();
        let me = self.a_eq.nrows();
        let mi = self.a_ineq.nrows();
        let m = me + mi + n;
        let mut a = DMatrix::zeros(m, n);
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        a.view_mut((0, 0), (me, n)).copy_from(&self.a_eq);
        a.view_mut((me, 0), (mi, n)).copy_from(&self.a_ineq);
        for i in 0..n {
            a[(me + mi + i, i)] = 1.0;
        }
        for i in 0..me {
            l[i] = self.b_eq[i];
            u[i] = self.b_eq[i];
        }
        for i in 0..mi {
            l[me + i] = f64::NEG_INFINITY;
            u[me + i] = self.b_ineq[i];
        }
        for i in 0..n {
            l[me + mi + i] = self.lower[i];
            u[me + mi + i] = self.upper[i];
        }
        (a, l, u)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Multipliers; positive entries push against upper bounds.
    pub y_eq: DVector<f64>,
    pub y_ineq: DVector<f64>,
    pub y_box: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_infeasible: f64,
    pub check_every: usize,
    pub polish: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_infeasible: 1e-7,
            check_every: 10,
            polish: true,
        }
    }
}

const RHO_EQ_SCALE: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const INF_BOUND: f64 = 1e19;

struct Scaling {
    d: DVector<f64>,
    e: DVector<f64>,
    cost: f64,
}

/// Ruiz equilibration of the KKT matrix `[H Aᵀ; A 0]`.
fn ruiz(h: &DMatrix<f64>, a: &DMatrix<f64>, c: &DVector<f64>) -> Scaling {
    let n = h.nrows();
    let m = a.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut hs = h.clone();
    let mut as_ = a.clone();
    let mut cost = 1.0;
    let mut cs = c.clone();
    for _ in 0..15 {
        let mut dd = DVector::zeros(n);
        for j in 0..n {
            let mut norm = hs.column(j).amax();
            norm = norm.max(as_.column(j).amax());
            dd[j] = if norm > 1e-8 { 1.0 / norm.sqrt() } else { 1.0 };
        }
        let mut de = DVector::zeros(m);
        for i in 0..m {
            let norm = as_.row(i).amax();
            de[i] = if norm > 1e-8 { 1.0 / norm.sqrt() } else { 1.0 };
        }
        for j in 0..n {
            for i in 0..n {
                hs[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..m {
                as_[(i, j)] *= de[i] * dd[j];
            }
            cs[j] *= dd[j];
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
        // Cost scaling keeps the objective terms near unit size.
        let hmean = (0..n).map(|j| hs.column(j).amax()).sum::<f64>() / n.max(1) as f64;
        let gamma = 1.0 / hmean.max(cs.amax()).max(1e-4);
        let gamma = gamma.min(1e4);
        hs *= gamma;
        cs *= gamma;
        cost *= gamma;
    }
    Scaling { d, e, cost }
}

struct Admm<'a> {
    p: &'a QpProblem,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    // Scaled data.
    hs: DMatrix<f64>,
    cs: DVector<f64>,
    as_: DMatrix<f64>,
    ls: DVector<f64>,
    us: DVector<f64>,
    sc: Scaling,
    rho: DVector<f64>,
    settings: SolverSettings,
}

impl<'a> Admm<'a> {
    fn new(p: &'a QpProblem, settings: SolverSettings) -> Self {
        let (a, l, u) = p.stacked();
        let sc = ruiz(&p.h, &a, &p.c);
        let n = p.dim();
        let m = a.nrows();
        let mut hs = p.h.clone();
        let mut as_ = a.clone();
        let mut cs = p.c.clone();
        for j in 0..n {
            for i in 0..n {
                hs[(i, j)] *= sc.d[i] * sc.d[j] * sc.cost;
            }
            for i in 0..m {
                as_[(i, j)] *= sc.e[i] * sc.d[j];
            }
            cs[j] *= sc.d[j] * sc.cost;
        }
        let scale_bound = |v: f64, s: f64| if v.abs() >= INF_BOUND || v.is_infinite() { v } else { v * s };
        let ls = DVector::from_fn(m, |i, _| scale_bound(l[i], sc.e[i]));
        let us = DVector::from_fn(m, |i, _| scale_bound(u[i], sc.e[i]));
        let rho = DVector::from_fn(m, |i, _| row_rho(settings.rho, l[i], u[i]));
        Admm {
            p,
            a,
            l,
            u,
            hs,
            cs,
            as_,
            ls,
            us,
            sc,
            rho,
            settings,
        }
    }

    fn factor(&self) -> nalgebra::Cholesky<f64, nalgebra::Dyn> {
        let n = self.hs.nrows();
        let mut k = self.hs.clone();
        for i in 0..n {
            k[(i, i)] += self.settings.sigma;
        }
        let mut ar = self.as_.clone();
        for i in 0..ar.nrows() {
            let r = self.rho[i];
            ar.row_mut(i).scale_mut(r);
        }
        k += self.as_.transpose() * ar;
        nalgebra::Cholesky::new(k).expect("ADMM system is positive definite")
    }

    fn unscale(&self, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let xu = x.component_mul(&self.sc.d);
        let zu = z.component_div(&self.sc.e);
        let yu = y.component_mul(&self.sc.e) / self.sc.cost;
        (xu, zu, yu)
    }

    fn residuals(&self, xu: &DVector<f64>, zu: &DVector<f64>, yu: &DVector<f64>) -> Residuals {
        let ax = &self.a * xu;
        let hx = &self.p.h * xu;
        let aty = self.a.transpose() * yu;
        let prim = (&ax - zu).amax();
        let dual = (&hx + &self.p.c + &aty).amax();
        let prim_scale = ax.amax().max(zu.amax());
        let dual_scale = hx.amax().max(aty.amax()).max(self.p.c.amax());
        Residuals {
            prim,
            dual,
            prim_scale,
            dual_scale,
        }
    }

    fn solve(&mut self) -> QpSolution {
        let n = self.p.dim();
        let m = self.a.nrows();
        let s = self.settings;
        let mut x = DVector::zeros(n);
        let mut z = DVector::zeros(m);
        let mut y = DVector::zeros(m);
        let mut chol = self.factor();
        let mut best: Option<QpSolution> = None;
        let mut polish_tried_at = usize::MAX;
        for iter in 1..=s.max_iter {
            let y_prev = y.clone();
            let rhs = &x * s.sigma - &self.cs + self.as_.transpose() * (self.rho.component_mul(&z) - &y);
            let xt = chol.solve(&rhs);
            let zt = &self.as_ * &xt;
            x = &xt * s.alpha + &x * (1.0 - s.alpha);
            let zr = &zt * s.alpha + &z * (1.0 - s.alpha);
            let mut znew = &zr + y.component_div(&self.rho);
            for i in 0..m {
                znew[i] = znew[i].clamp(self.ls[i], self.us[i]);
            }
            y += self.rho.component_mul(&(&zr - &znew));
            z = znew;

            if iter % s.check_every != 0 && iter != s.max_iter {
                continue;
            }
            let (xu, zu, yu) = self.unscale(&x, &z, &y);
            let r = self.residuals(&xu, &zu, &yu);
            let eps_p = s.eps_abs + s.eps_rel * r.prim_scale;
            let eps_d = s.eps_abs + s.eps_rel * r.dual_scale;

            if r.prim <= eps_p && r.dual <= eps_d {
                let mut sol = self.finish(xu.clone(), yu.clone(), QpStatus::Optimal, iter, r);
                if s.polish {
                    if let Some(p) = self.polish(&sol) {
                        sol = p;
                    }
                }
                if self.p.max_violation(&sol.x) <= s.eps_abs {
                    return sol;
                }
            }
            if s.polish && r.prim < 1e-3 * (1.0 + r.prim_scale) && r.dual < 1e-3 * (1.0 + r.dual_scale) && polish_tried_at != iter {
                polish_tried_at = iter;
                let cand = self.finish(xu.clone(), yu.clone(), QpStatus::Optimal, iter, r);
                if let Some(p) = self.polish(&cand) {
                    return p;
                }
            }
            if self.infeasible(&(&y - &y_prev)) {
                return self.finish(xu, yu, QpStatus::Infeasible, iter, r);
            }
            let cand = self.finish(xu, yu, QpStatus::MaxIterations, iter, r);
            let better = best
                .as_ref()
                .map_or(true, |b| cand.primal_residual.max(cand.dual_residual) < b.primal_residual.max(b.dual_residual));
            if better {
                best = Some(cand);
            }
            // Step-size adaptation on the scaled residual ratio.
            if iter % (s.check_every * 5) == 0 {
                let ratio = ((r.prim / r.prim_scale.max(1e-10)) / (r.dual / r.dual_scale.max(1e-10)).max(1e-12)).sqrt();
                if ratio.is_finite() && !(0.2..=5.0).contains(&ratio) {
                    for i in 0..m {
                        self.rho[i] = (self.rho[i] * ratio).clamp(RHO_MIN, RHO_MAX * if self.l[i] == self.u[i] { RHO_EQ_SCALE } else { 1.0 });
                    }
                    chol = self.factor();
                }
            }
        }
        let mut out = best.expect("at least one check ran");
        out.status = QpStatus::MaxIterations;
        for i in 0..n {
            out.x[i] = out.x[i].clamp(self.p.lower[i], self.p.upper[i]);
        }
        out
    }

    /// Primal infeasibility certificate from the multiplier increment.
    fn infeasible(&self, dy_scaled: &DVector<f64>) -> bool {
        let dy = dy_scaled.component_mul(&self.sc.e);
        let norm = dy.amax();
        if norm < 1e-14 {
            return false;
        }
        let eps = self.settings.eps_infeasible;
        if (self.a.transpose() * &dy).amax() > eps * norm {
            return false;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            let v = dy[i];
            if v > 0.0 {
                if self.u[i].is_infinite() {
                    if v > eps * norm {
                        return false;
                    }
                } else {
                    support += self.u[i] * v;
                }
            } else if v < 0.0 {
                if self.l[i].is_infinite() {
                    if -v > eps * norm {
                        return false;
                    }
                } else {
                    support += self.l[i] * v;
                }
            }
        }
        support < -eps * norm
    }

    fn finish(&self, xu: DVector<f64>, yu: DVector<f64>, status: QpStatus, iterations: usize, r: Residuals) -> QpSolution {
        let me = self.p.a_eq.nrows();
        let mi = self.p.a_ineq.nrows();
        let n = self.p.dim();
        QpSolution {
            x: xu,
            status,
            primal_residual: r.prim,
            dual_residual: r.dual,
            iterations,
            y_eq: yu.rows(0, me).into_owned(),
            y_ineq: yu.rows(me, mi).into_owned(),
            y_box: yu.rows(me + mi, n).into_owned(),
        }
    }

    /// Solves the equality-constrained problem on the guessed active set and
    /// accepts it when it is primal and dual feasible.
    fn polish(&self, sol: &QpSolution) -> Option<QpSolution> {
        let n = self.p.dim();
        let me = self.p.a_eq.nrows();
        let y = stack(&sol.y_eq, &sol.y_ineq, &sol.y_box);
        let z = &self.a * &sol.x;
        let mut active = Vec::new();
        for i in 0..self.a.nrows() {
            if i < me {
                active.push(i);
                continue;
            }
            let lower_active = self.l[i].is_finite() && z[i] - self.l[i] < -y[i];
            let upper_active = self.u[i].is_finite() && self.u[i] - z[i] < y[i];
            if lower_active || upper_active {
                active.push(i);
            }
        }
        let k = active.len();
        let dim = n + k;
        let delta = 1e-9;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.p.h);
        let mut rhs = DVector::zeros(dim);
        for j in 0..n {
            rhs[j] = -self.p.c[j];
        }
        let mut bound = DVector::zeros(k);
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = self.a[(i, j)];
                kkt[(j, n + r)] = self.a[(i, j)];
            }
            bound[r] = if i < me {
                self.l[i]
            } else if self.l[i].is_finite() && (!self.u[i].is_finite() || y[i] < 0.0) {
                self.l[i]
            } else {
                self.u[i]
            };
            rhs[n + r] = bound[r];
        }
        let exact = kkt.clone();
        let mut reg = kkt;
        for j in 0..n {
            reg[(j, j)] += delta;
        }
        for r in 0..k {
            reg[(n + r, n + r)] -= delta;
        }
        let lu = reg.lu();
        let mut sol_vec = lu.solve(&rhs)?;
        for _ in 0..5 {
            let res = &rhs - &exact * &sol_vec;
            let corr = lu.solve(&res)?;
            sol_vec += corr;
        }
        if sol_vec.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let x = sol_vec.rows(0, n).into_owned();
        let mut yfull = DVector::zeros(self.a.nrows());
        for (r, &i) in active.iter().enumerate() {
            yfull[i] = sol_vec[n + r];
        }
        // Multiplier signs must match the side each constraint is active on.
        let tol = 1e-9 * (1.0 + yfull.amax());
        for (r, &i) in active.iter().enumerate() {
            if i < me {
                continue;
            }
            let yi = sol_vec[n + r];
            if bound[r] == self.u[i] && self.l[i] != self.u[i] && yi < -tol {
                return None;
            }
            if bound[r] == self.l[i] && self.l[i] != self.u[i] && yi > tol {
                return None;
            }
        }
        if self.p.max_violation(&x) > self.settings.eps_abs {
            return None;
        }
        let z = &self.a * &x;
        let r = self.residuals(&x, &z, &yfull);
        if r.dual > self.settings.eps_abs + self.settings.eps_rel * r.dual_scale {
            return None;
        }
        let mut out = self.finish(x, yfull, QpStatus::Optimal, sol.iterations, r);
        for i in 0..n {
            out.x[i] = out.x[i].clamp(self.p.lower[i], self.p.upper[i]);
        }
        out.primal_residual = self.p.max_violation(&out.x);
        Some(out)
    }
}

#[derive(Clone, Copy)]
struct Residuals {
    prim: f64,
    dual: f64,
    prim_scale: f64,
    dual_scale: f64,
}

fn row_rho(rho: f64, l: f64, u: f64) -> f64 {
    if l == u {
        rho * RHO_EQ_SCALE
    } else if l.is_infinite() && u.is_infinite() {
        RHO_MIN
    } else {
        rho
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len() + c.len(), a.iter().chain(b.iter()).chain(c.iter()).copied())
}

/// Solves `p`. `H` must be positive semidefinite.
pub fn solve_qp(p: &QpProblem, settings: &SolverSettings) -> QpSolution {
    assert!(p.is_consistent(), "inconsistent QP dimensions");
    Admm::new(p, *settings).solve()
}

/// First-order optimality residuals of a candidate solution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KktResiduals {
    /// `‖Hx + c + A_eqᵀy_eq + A_inᵀy_in + y_box‖∞`.
    pub stationarity: f64,
    pub primal: f64,
    /// Largest multiplier with the wrong sign.
    pub dual_sign: f64,
    /// Largest `|multiplier × slack|` over inequality and box rows.
    pub complementarity: f64,
}

pub fn kkt_residuals(p: &QpProblem, s: &QpSolution) -> KktResiduals {
    let x = &s.x;
    let stat = &p.h * x + &p.c + p.a_eq.transpose() * &s.y_eq + p.a_ineq.transpose() * &s.y_ineq + &s.y_box;
    let slack = &p.b_ineq - &p.a_ineq * x;
    let mut dual_sign = s.y_ineq.iter().fold(0.0f64, |m, y| m.max(-y));
    let mut comp = s.y_ineq.iter().zip(slack.iter()).fold(0.0f64, |m, (y, g)| m.max((y * g).abs()));
    for i in 0..x.len() {
        let y = s.y_box[i];
        let gap = if y >= 0.0 { p.upper[i] - x[i] } else { x[i] - p.lower[i] };
        comp = comp.max((y * gap).abs());
        if p.upper[i] == f64::INFINITY && y > 0.0 || p.lower[i] == f64::NEG_INFINITY && y < 0.0 {
            dual_sign = dual_sign.max(y.abs());
        }
    }
    KktResiduals {
        stationarity: stat.amax(),
        primal: p.max_violation(x),
        dual_sign,
        complementarity: comp,
    }
}
