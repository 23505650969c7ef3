//! The two controlled deterministic systems: one particle in a frozen law,
//! and the tagged-particle pair of the complete measure change.

use crate::error::Result;
use crate::models::{MeanField, ModelSpec, Payoff};
use crate::sim::TimeGrid;

use super::ocp::Dynamics;

/// `X' = b(t, X, mu_k) + sigma u` with the law frozen on each cell.
pub(crate) struct Decoupled<'a> {
    pub model: &'a ModelSpec,
    pub fields: Vec<MeanField<'a>>,
    pub grid: TimeGrid,
    pub x0: f64,
    pub payoff: &'a Payoff,
}

impl Dynamics for Decoupled<'_> {
    fn dim(&self) -> usize {
        1
    }
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    fn x0(&self) -> Vec<f64> {
        vec![self.x0]
    }
    fn sigma(&self) -> f64 {
        self.model.sigma()
    }
    fn field(&self, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = self.fields[k].drift(self.model, t, x[0]);
    }
    fn jacobian(&self, k: usize, t: f64, x: &[f64], jac: &mut [f64]) {
        jac[0] = self.fields[k].drift_dx(self.model, t, x[0]);
    }
    fn terminal_reward(&self, x: &[f64]) -> f64 {
        2.0 * self.payoff.log_eval(x[0])
    }
    fn terminal_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.payoff.terminal_adjoint(x[0])?])
    }
}

/// State `(X1, Xhat)`: the tagged particle and the common value of the
/// other `N - 1`, interacting through `delta_{X1} / N + (N - 1) delta_{Xhat} / N`.
pub(crate) struct Complete<'a> {
    pub model: &'a ModelSpec,
    pub n_particles: usize,
    pub grid: TimeGrid,
    pub x0: f64,
    pub payoff: &'a Payoff,
}

impl Complete<'_> {
    fn masses(&self) -> (f64, f64) {
        let n = self.n_particles as f64;
        (1.0 / n, (n - 1.0) / n)
    }
}

impl Dynamics for Complete<'_> {
    fn dim(&self) -> usize {
        2
    }
    fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    fn x0(&self) -> Vec<f64> {
        vec![self.x0, self.x0]
    }
    fn sigma(&self) -> f64 {
        self.model.sigma()
    }
    fn field(&self, _k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        let k = self.model.kernel();
        let (a, c) = self.masses();
        let (x1, xh) = (x[0], x[1]);
        out[0] = k.beta(t, x1) + a * k.kappa(t, x1, x1) + c * k.kappa(t, x1, xh);
        out[1] = k.beta(t, xh) + a * k.kappa(t, xh, x1) + c * k.kappa(t, xh, xh);
    }
    fn jacobian(&self, _k: usize, t: f64, x: &[f64], jac: &mut [f64]) {
        let k = self.model.kernel();
        let (a, c) = self.masses();
        let (x1, xh) = (x[0], x[1]);
        jac[0] = k.beta_dx(t, x1)
            + a * (k.kappa_dx(t, x1, x1) + k.kappa_dy(t, x1, x1))
            + c * k.kappa_dx(t, x1, xh);
        jac[1] = c * k.kappa_dy(t, x1, xh);
        jac[2] = a * k.kappa_dy(t, xh, x1);
        jac[3] = k.beta_dx(t, xh)
            + a * k.kappa_dx(t, xh, x1)
            + c * (k.kappa_dx(t, xh, xh) + k.kappa_dy(t, xh, xh));
    }
    fn terminal_reward(&self, x: &[f64]) -> f64 {
        2.0 * self.payoff.log_eval(x[0])
    }
    fn terminal_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.payoff.terminal_adjoint(x[0])?, 0.0])
    }
}
