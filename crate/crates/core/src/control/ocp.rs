//! Deterministic optimal control on a time grid, shared by every
//! boundary-value problem in this crate.
//!
//! The problems all have the form
//!
//! ```text
//! maximise  Phi(x(T)) - int_0^T sum_j (q_j u_j^2 + l_j(t) u_j + c(t)) dt
//! subject to  x' = f(t, x) + sigma u,  x(0) = x0,
//! ```
//!
//! with one control component per state component. Two solvers are layered:
//!
//! 1. single shooting on the Pontryagin system (state forward, adjoint
//!    `p' = -J_f^T p`, `u_j = (sigma p_j - l_j) / (2 q_j)`) for the unknown
//!    initial adjoint, with damped Newton and a finite-difference Jacobian;
//! 2. a Newton refinement on the gradient of the grid objective, where the
//!    control is piecewise constant and the state is advanced by one RK4
//!    step per cell. This makes the returned control an exact stationary
//!    point of the objective that is actually evaluated.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sim::TimeGrid;

use super::BvpOptions;

pub(crate) trait Dynamics {
    fn dim(&self) -> usize;
    fn grid(&self) -> &TimeGrid;
    fn x0(&self) -> Vec<f64>;
    fn sigma(&self) -> f64;
    /// Uncontrolled vector field on cell `k` at time `t`.
    fn field(&self, k: usize, t: f64, x: &[f64], out: &mut [f64]);
    /// Row-major Jacobian `jac[i * d + j] = d f_i / d x_j`.
    fn jacobian(&self, k: usize, t: f64, x: &[f64], jac: &mut [f64]);
    /// `Phi(x)`, may be `-inf`.
    fn terminal_reward(&self, x: &[f64]) -> f64;
    fn terminal_gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Running cost per unit time on cell `k`:
/// `sum_j q_j u_j^2 + l_{k,j} u_j + c_k`.
#[derive(Debug, Clone)]
pub(crate) struct QuadraticCost {
    pub quadratic: Vec<f64>,
    /// `n_steps x d`, empty for zero.
    pub linear: Vec<f64>,
    /// `n_steps`, empty for zero.
    pub constant: Vec<f64>,
}

impl QuadraticCost {
    pub fn pure(quadratic: Vec<f64>) -> Self {
        Self { quadratic, linear: Vec::new(), constant: Vec::new() }
    }

    fn linear_at(&self, k: usize, j: usize) -> f64 {
        if self.linear.is_empty() {
            0.0
        } else {
            self.linear[k * self.quadratic.len() + j]
        }
    }

    fn value(&self, k: usize, u: &[f64]) -> f64 {
        let c = if self.constant.is_empty() { 0.0 } else { self.constant[k] };
        u.iter()
            .enumerate()
            .map(|(j, &uj)| self.quadratic[j] * uj * uj + self.linear_at(k, j) * uj)
            .sum::<f64>()
            + c
    }

    /// Pontryagin maximiser of `sigma p.u - cost`.
    fn optimal_control(&self, k: usize, sigma: f64, p: &[f64], out: &mut [f64]) {
        for j in 0..out.len() {
            out[j] = (sigma * p[j] - self.linear_at(k, j)) / (2.0 * self.quadratic[j]);
        }
    }
}

/// Result of one shooting pass from a given initial adjoint.
pub(crate) struct Shot {
    pub residual: Vec<f64>,
    /// Cell averages of the continuous control (RK4 stage weights).
    pub control: Vec<f64>,
}

/// Integrates the Pontryagin system from `(x0, p0)` and returns the
/// terminal residual `p(T) - grad Phi(x(T))`.
pub(crate) fn shoot<D: Dynamics>(dynamics: &D, cost: &QuadraticCost, p0: &[f64]) -> Result<Shot> {
    let d = dynamics.dim();
    let grid = dynamics.grid();
    let n = grid.n_steps();
    let h = grid.dt();
    let sigma = dynamics.sigma();

    let mut y = dynamics.x0();
    y.extend_from_slice(p0);
    let mut control = vec![0.0; n * d];

    let mut f = vec![0.0; d];
    let mut jac = vec![0.0; d * d];
    let mut u = vec![0.0; d];
    // (x', p') and the stage control for state y on cell k.
    let mut rhs = |k: usize, t: f64, y: &[f64], dy: &mut [f64], u_out: &mut [f64]| {
        let (x, p) = y.split_at(d);
        dynamics.field(k, t, x, &mut f);
        dynamics.jacobian(k, t, x, &mut jac);
        cost.optimal_control(k, sigma, p, &mut u);
        for i in 0..d {
            dy[i] = f[i] + sigma * u[i];
            // p' = -J^T p
            dy[d + i] = -(0..d).map(|r| jac[r * d + i] * p[r]).sum::<f64>();
            u_out[i] = u[i];
        }
    };

    let m = 2 * d;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let (mut u1, mut u2, mut u3, mut u4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; m];
    for k in 0..n {
        let t = grid.time(k);
        rhs(k, t, &y, &mut k1, &mut u1);
        for i in 0..m {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        rhs(k, t + 0.5 * h, &tmp, &mut k2, &mut u2);
        for i in 0..m {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        rhs(k, t + 0.5 * h, &tmp, &mut k3, &mut u3);
        for i in 0..m {
            tmp[i] = y[i] + h * k3[i];
        }
        rhs(k, t + h, &tmp, &mut k4, &mut u4);
        for i in 0..m {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        for j in 0..d {
            control[k * d + j] = (u1[j] + 2.0 * u2[j] + 2.0 * u3[j] + u4[j]) / 6.0;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonConvergence { iterations: 0, residual: f64::INFINITY });
        }
    }
    let (x, p) = y.split_at(d);
    let target = dynamics.terminal_gradient(x)?;
    let residual = p.iter().zip(&target).map(|(a, b)| a - b).collect();
    Ok(Shot { residual, control })
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub(crate) struct ShootingOutcome {
    pub initial_adjoint: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub control: Vec<f64>,
}

/// Damped Newton on the initial adjoint.
pub(crate) fn solve_shooting<D: Dynamics>(
    dynamics: &D,
    cost: &QuadraticCost,
    guess: Vec<f64>,
    opts: &BvpOptions,
) -> Result<ShootingOutcome> {
    let d = dynamics.dim();
    let mut p0 = guess;
    let mut shot = shoot(dynamics, cost, &p0)?;
    let mut norm = sup_norm(&shot.residual);
    let mut iterations = 0;
    while norm > opts.tolerance {
        if iterations == opts.max_iterations {
            return Err(Error::NonConvergence { iterations, residual: norm });
        }
        iterations += 1;

        let mut jac = DMatrix::<f64>::zeros(d, d);
        for j in 0..d {
            let step = opts.fd_step * p0[j].abs().max(1.0);
            let mut probe = p0.clone();
            probe[j] += step;
            let r = shoot(dynamics, cost, &probe)?.residual;
            for i in 0..d {
                jac[(i, j)] = (r[i] - shot.residual[i]) / step;
            }
        }
        let rhs = -DVector::from_column_slice(&shot.residual);
        let delta = jac.lu().solve(&rhs).ok_or(Error::SingularJacobian)?;
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularJacobian);
        }

        let mut lambda = 1.0;
        let mut accepted = None;
        let mut fallback = None;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = p0.iter().zip(delta.iter()).map(|(p, dp)| p + lambda * dp).collect();
            if let Ok(s) = shoot(dynamics, cost, &cand) {
                let n_c = sup_norm(&s.residual);
                if n_c.is_finite() {
                    if n_c < norm {
                        accepted = Some((cand, s, n_c));
                        break;
                    }
                    fallback = Some((cand, s, n_c));
                }
            }
            lambda *= 0.5;
        }
        // With no decrease after all halvings, keep the shortest step and
        // let the iteration cap decide.
        let (cand, s, n_c) = accepted.or(fallback).ok_or(Error::NonConvergence { iterations, residual: norm })?;
        p0 = cand;
        shot = s;
        norm = n_c;
    }
    Ok(ShootingOutcome { initial_adjoint: p0, residual_norm: norm, iterations, control: shot.control })
}

/// Piecewise-constant-control trajectory plus, optionally, the RK4 step
/// sensitivities `A_k = dx_{k+1}/dx_k` and `B_k = dx_{k+1}/du_k`.
pub(crate) struct Rollout {
    /// `(n_steps + 1) x d`
    pub states: Vec<f64>,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

pub(crate) fn rollout<D: Dynamics>(dynamics: &D, control: &[f64], sensitivities: bool) -> Rollout {
    let d = dynamics.dim();
    let grid = dynamics.grid();
    let n = grid.n_steps();
    let h = grid.dt();
    let sigma = dynamics.sigma();
    let eye = DMatrix::<f64>::identity(d, d);

    let mut states = Vec::with_capacity((n + 1) * d);
    states.extend(dynamics.x0());
    let mut a_all = Vec::new();
    let mut b_all = Vec::new();

    let mut jac_buf = vec![0.0; d * d];
    let mut jacobian = |k: usize, t: f64, x: &[f64]| {
        dynamics.jacobian(k, t, x, &mut jac_buf);
        DMatrix::from_row_slice(d, d, &jac_buf)
    };
    let mut x = DVector::from_column_slice(&states[..d]);
    let mut f = vec![0.0; d];
    for k in 0..n {
        let t = grid.time(k);
        let u = DVector::from_column_slice(&control[k * d..(k + 1) * d]);
        let mut stage = |t: f64, x: &DVector<f64>| {
            dynamics.field(k, t, x.as_slice(), &mut f);
            DVector::from_column_slice(&f) + sigma * &u
        };
        let x1 = x.clone();
        let k1 = stage(t, &x1);
        let x2 = &x + 0.5 * h * &k1;
        let k2 = stage(t + 0.5 * h, &x2);
        let x3 = &x + 0.5 * h * &k2;
        let k3 = stage(t + 0.5 * h, &x3);
        let x4 = &x + h * &k3;
        let k4 = stage(t + h, &x4);
        let next = &x + h / 6.0 * (&k1 + 2.0 * &k2 + 2.0 * &k3 + &k4);

        if sensitivities {
            let j1 = jacobian(k, t, x1.as_slice());
            let j2 = jacobian(k, t + 0.5 * h, x2.as_slice());
            let j3 = jacobian(k, t + 0.5 * h, x3.as_slice());
            let j4 = jacobian(k, t + h, x4.as_slice());
            let s1 = j1.clone();
            let s2 = &j2 * (&eye + 0.5 * h * &s1);
            let s3 = &j3 * (&eye + 0.5 * h * &s2);
            let s4 = &j4 * (&eye + h * &s3);
            a_all.push(&eye + h / 6.0 * (&s1 + 2.0 * &s2 + 2.0 * &s3 + &s4));
            let l1 = sigma * &eye;
            let l2 = &j2 * (0.5 * h * &l1) + sigma * &eye;
            let l3 = &j3 * (0.5 * h * &l2) + sigma * &eye;
            let l4 = &j4 * (h * &l3) + sigma * &eye;
            b_all.push(h / 6.0 * (&l1 + 2.0 * &l2 + 2.0 * &l3 + &l4));
        }
        x = next;
        states.extend(x.iter());
    }
    Rollout { states, a: a_all, b: b_all }
}

pub(crate) fn objective<D: Dynamics>(dynamics: &D, cost: &QuadraticCost, control: &[f64]) -> f64 {
    let d = dynamics.dim();
    let n = dynamics.grid().n_steps();
    let dt = dynamics.grid().dt();
    let r = rollout(dynamics, control, false);
    let running: f64 = (0..n).map(|k| cost.value(k, &control[k * d..(k + 1) * d])).sum::<f64>() * dt;
    dynamics.terminal_reward(&r.states[n * d..]) - running
}

pub(crate) struct Gradient {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Discrete adjoints `lambda_k = dPhi / dx_k`, `(n_steps + 1) x d`.
    pub adjoints: Vec<f64>,
    pub states: Vec<f64>,
}

/// Exact gradient of [`objective`] by the discrete adjoint recursion.
pub(crate) fn gradient<D: Dynamics>(dynamics: &D, cost: &QuadraticCost, control: &[f64]) -> Result<Gradient> {
    let d = dynamics.dim();
    let n = dynamics.grid().n_steps();
    let dt = dynamics.grid().dt();
    let r = rollout(dynamics, control, true);
    let xn = &r.states[n * d..];
    let mut lambda = DVector::from_vec(dynamics.terminal_gradient(xn)?);
    let mut adjoints = vec![0.0; (n + 1) * d];
    adjoints[n * d..].copy_from_slice(lambda.as_slice());
    let mut grad = vec![0.0; n * d];
    for k in (0..n).rev() {
        let gk = r.b[k].transpose() * &lambda;
        for j in 0..d {
            let u = control[k * d + j];
            grad[k * d + j] = gk[j] - dt * (2.0 * cost.quadratic[j] * u + cost.linear_at(k, j));
        }
        lambda = r.a[k].transpose() * &lambda;
        adjoints[k * d..(k + 1) * d].copy_from_slice(lambda.as_slice());
    }
    let running: f64 = (0..n).map(|k| cost.value(k, &control[k * d..(k + 1) * d])).sum::<f64>() * dt;
    Ok(Gradient {
        value: dynamics.terminal_reward(xn) - running,
        gradient: grad,
        adjoints,
        states: r.states,
    })
}

pub(crate) struct Refined {
    pub control: Vec<f64>,
    pub grad: Gradient,
    pub gradient_norm: f64,
}

/// Newton iteration on the grid-objective gradient, Hessian by central
/// differences of the exact gradient.
pub(crate) fn refine<D: Dynamics>(
    dynamics: &D,
    cost: &QuadraticCost,
    start: Vec<f64>,
    opts: &BvpOptions,
) -> Result<Refined> {
    let m = start.len();
    let mut u = start;
    let mut g = gradient(dynamics, cost, &u)?;
    let mut gnorm = sup_norm(&g.gradient);
    const EPS: f64 = 1e-5;
    for _ in 0..opts.max_refine_iterations {
        if gnorm <= opts.refine_tolerance {
            break;
        }
        let mut hess = DMatrix::<f64>::zeros(m, m);
        for c in 0..m {
            let mut up = u.clone();
            up[c] += EPS;
            let mut dn = u.clone();
            dn[c] -= EPS;
            let gp = gradient(dynamics, cost, &up)?.gradient;
            let gm = gradient(dynamics, cost, &dn)?.gradient;
            for r in 0..m {
                hess[(r, c)] = (gp[r] - gm[r]) / (2.0 * EPS);
            }
        }
        let hess = 0.5 * (&hess + hess.transpose());
        let rhs = -DVector::from_column_slice(&g.gradient);
        let Some(step) = hess.lu().solve(&rhs) else { break };
        if step.iter().any(|v| !v.is_finite()) {
            break;
        }
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..=opts.max_halvings {
            let cand: Vec<f64> = u.iter().zip(step.iter()).map(|(a, s)| a + alpha * s).collect();
            if let Ok(gc) = gradient(dynamics, cost, &cand) {
                let nc = sup_norm(&gc.gradient);
                // Near a stationary point the objective is flat to rounding;
                // accept any step that reduces the gradient without giving up value.
                if gc.value.is_finite() && nc < gnorm && gc.value >= g.value - 1e-12 * g.value.abs().max(1.0) {
                    u = cand;
                    g = gc;
                    gnorm = nc;
                    improved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(Refined { control: u, grad: g, gradient_norm: gnorm })
}
