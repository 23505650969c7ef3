//! Candidate optimal measure changes from the small-noise control problem.
//!
//! [`solve_bvp_decoupled`] and [`solve_bvp_complete`] return a
//! [`BvpSolution`] whose `control` is the drift shift `hdot` consumed by the
//! simulators. Controls are piecewise constant on the grid and the state is
//! advanced by one RK4 step per cell; every objective in this module is
//! evaluated on that discretisation, with running costs by the rectangle
//! rule.

mod ocp;
mod systems;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Backend;
use crate::measures::MeasurePath;
use crate::models::{MeanField, ModelSpec, Payoff};
use crate::sim::{ControlPath, TimeGrid};

use ocp::{Dynamics, QuadraticCost};
use systems::{Complete, Decoupled};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BvpOptions {
    /// Sup-norm tolerance on the shooting residual.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Relative step of the finite-difference shooting Jacobian.
    pub fd_step: f64,
    pub max_halvings: usize,
    /// Refine the shooting control to a stationary point of the grid objective.
    pub refine: bool,
    pub refine_tolerance: f64,
    pub max_refine_iterations: usize,
}

impl Default for BvpOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
            fd_step: 1e-6,
            max_halvings: 8,
            refine: true,
            refine_tolerance: 1e-12,
            max_refine_iterations: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BvpKind {
    Decoupled,
    Complete,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BvpSolution {
    pub kind: BvpKind,
    /// Population size of the complete system.
    pub n_particles: Option<usize>,
    pub times: Vec<f64>,
    /// `[X]`, or `[X1, Xhat]` for the complete system.
    pub states: Vec<Vec<f64>>,
    /// `[p]`, or `[p1, p2]`: sensitivities of the terminal reward to the
    /// state at each node.
    pub adjoints: Vec<Vec<f64>>,
    /// Shooting root `p(0)`.
    pub initial_adjoint: Vec<f64>,
    pub residual_norm: f64,
    pub newton_iterations: usize,
    /// Sup norm of the objective gradient with respect to the cell controls.
    pub stationarity_norm: f64,
    /// `hdot`, approximately `sigma p / 2` (`sigma p1 / 2` when complete).
    pub control: ControlPath,
    /// `uhat`, approximately `sigma p2 / (N - 1)`.
    pub auxiliary_control: Option<ControlPath>,
    /// Sup norm of the forcing `sigma uhat` in the `Xhat` equation.
    pub auxiliary_forcing_sup: Option<f64>,
    pub objective_value: f64,
}

impl BvpSolution {
    pub fn terminal_state(&self) -> f64 {
        *self.states[0].last().expect("non-empty trajectory")
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

fn frozen_fields<'a>(model: &ModelSpec, path: &'a MeasurePath, grid: &TimeGrid) -> Result<Vec<MeanField<'a>>> {
    if path.grid() != grid {
        return Err(Error::Config(format!(
            "frozen law grid {:?} does not match control grid {:?}",
            path.grid(),
            grid
        )));
    }
    path.clouds()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            model.mean_field(Backend::Sequential, grid.time(k), c.points(), Some(c.weights()), c.normalization())
        })
        .collect()
}

fn decoupled_system<'a>(
    model: &'a ModelSpec,
    path: &'a MeasurePath,
    payoff: &'a Payoff,
    grid: &TimeGrid,
    x0: f64,
) -> Result<Decoupled<'a>> {
    Ok(Decoupled { model, fields: frozen_fields(model, path, grid)?, grid: *grid, x0, payoff })
}

fn complete_system<'a>(
    model: &'a ModelSpec,
    payoff: &'a Payoff,
    n_particles: usize,
    grid: &TimeGrid,
    x0: f64,
) -> Result<Complete<'a>> {
    if n_particles < 2 {
        return Err(Error::Config(format!("complete system needs N >= 2, got {n_particles}")));
    }
    Ok(Complete { model, n_particles, grid: *grid, x0, payoff })
}

fn complete_cost(n_particles: usize) -> QuadraticCost {
    QuadraticCost::pure(vec![1.0, (n_particles as f64 - 1.0) / 2.0])
}

/// Splits an interleaved `steps x d` buffer into `d` component series.
fn components(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|j| flat.iter().skip(j).step_by(d).copied().collect()).collect()
}

fn interleave(parts: &[&[f64]]) -> Vec<f64> {
    let n = parts[0].len();
    (0..n).flat_map(|k| parts.iter().map(move |p| p[k])).collect()
}

/// Terminal adjoint along the uncontrolled trajectory.
fn canonical_guess<D: Dynamics>(dynamics: &D) -> Result<Vec<f64>> {
    let d = dynamics.dim();
    let n = dynamics.grid().n_steps();
    let zero = vec![0.0; n * d];
    let r = ocp::rollout(dynamics, &zero, false);
    dynamics.terminal_gradient(&r.states[n * d..])
}

struct Solved {
    shooting: ocp::ShootingOutcome,
    control: Vec<f64>,
    grad: ocp::Gradient,
    gradient_norm: f64,
}

fn solve<D: Dynamics>(dynamics: &D, cost: &QuadraticCost, opts: &BvpOptions) -> Result<Solved> {
    let guess = canonical_guess(dynamics)?;
    let shooting = ocp::solve_shooting(dynamics, cost, guess, opts)?;
    let start = shooting.control.clone();
    let refined = if opts.refine {
        ocp::refine(dynamics, cost, start, opts)?
    } else {
        let grad = ocp::gradient(dynamics, cost, &start)?;
        let gradient_norm = grad.gradient.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        ocp::Refined { control: start, grad, gradient_norm }
    };
    log::debug!(
        "shooting residual {:.3e} after {} iterations, stationarity {:.3e}",
        shooting.residual_norm,
        shooting.iterations,
        refined.gradient_norm
    );
    Ok(Solved { shooting, control: refined.control, grad: refined.grad, gradient_norm: refined.gradient_norm })
}

/// Solves the decoupled Pontryagin system for a frozen law.
pub fn solve_bvp_decoupled(
    model: &ModelSpec,
    path: &MeasurePath,
    payoff: &Payoff,
    grid: &TimeGrid,
    x0: f64,
    opts: &BvpOptions,
) -> Result<BvpSolution> {
    let system = decoupled_system(model, path, payoff, grid, x0)?;
    let s = solve(&system, &QuadraticCost::pure(vec![1.0]), opts)?;
    Ok(BvpSolution {
        kind: BvpKind::Decoupled,
        n_particles: None,
        times: grid.times(),
        states: vec![s.grad.states],
        adjoints: vec![s.grad.adjoints],
        initial_adjoint: s.shooting.initial_adjoint,
        residual_norm: s.shooting.residual_norm,
        newton_iterations: s.shooting.iterations,
        stationarity_norm: s.gradient_norm,
        control: ControlPath::new(s.control)?,
        auxiliary_control: None,
        auxiliary_forcing_sup: None,
        objective_value: s.grad.value,
    })
}

/// Solves the complete Pontryagin system for `N` exchangeable particles.
pub fn solve_bvp_complete(
    model: &ModelSpec,
    payoff: &Payoff,
    n_particles: usize,
    grid: &TimeGrid,
    x0: f64,
    opts: &BvpOptions,
) -> Result<BvpSolution> {
    let system = complete_system(model, payoff, n_particles, grid, x0)?;
    let s = solve(&system, &complete_cost(n_particles), opts)?;
    let mut controls = components(&s.control, 2).into_iter();
    let hdot = ControlPath::new(controls.next().unwrap_or_default())?;
    let uhat = ControlPath::new(controls.next().unwrap_or_default())?;
    let forcing = model.sigma() * uhat.sup_norm();
    Ok(BvpSolution {
        kind: BvpKind::Complete,
        n_particles: Some(n_particles),
        times: grid.times(),
        states: components(&s.grad.states, 2),
        adjoints: components(&s.grad.adjoints, 2),
        initial_adjoint: s.shooting.initial_adjoint,
        residual_norm: s.shooting.residual_norm,
        newton_iterations: s.shooting.iterations,
        stationarity_norm: s.gradient_norm,
        control: hdot,
        auxiliary_control: Some(uhat),
        auxiliary_forcing_sup: Some(forcing),
        objective_value: s.grad.value,
    })
}

/// `X' = b(t, X, mu_t) + sigma u` from `x0`, one RK4 step per cell.
pub fn controlled_trajectory(
    model: &ModelSpec,
    path: &MeasurePath,
    u: &ControlPath,
    grid: &TimeGrid,
    x0: f64,
) -> Result<Vec<f64>> {
    u.check_grid(grid)?;
    let dummy = Payoff::Constant { c: 1.0 };
    let system = decoupled_system(model, path, &dummy, grid, x0)?;
    Ok(ocp::rollout(&system, u.values(), false).states)
}

/// Tagged-particle pair `(X1, Xhat)` under controls `(u1, uhat)`.
pub fn controlled_trajectory_complete(
    model: &ModelSpec,
    n_particles: usize,
    u1: &ControlPath,
    uhat: &ControlPath,
    grid: &TimeGrid,
    x0: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    u1.check_grid(grid)?;
    uhat.check_grid(grid)?;
    let dummy = Payoff::Constant { c: 1.0 };
    let system = complete_system(model, &dummy, n_particles, grid, x0)?;
    let r = ocp::rollout(&system, &interleave(&[u1.values(), uhat.values()]), false);
    let mut parts = components(&r.states, 2).into_iter();
    Ok((parts.next().unwrap_or_default(), parts.next().unwrap_or_default()))
}

fn report_sentinel(value: f64) -> f64 {
    if value == f64::NEG_INFINITY {
        log::warn!("payoff vanishes at the controlled terminal state; objective is -inf");
    }
    value
}

/// `2 log G(X_T(u)) - int u^2 dt`; `-inf` when the payoff vanishes.
pub fn objective_decoupled(
    model: &ModelSpec,
    path: &MeasurePath,
    payoff: &Payoff,
    u: &ControlPath,
    grid: &TimeGrid,
    x0: f64,
) -> Result<f64> {
    u.check_grid(grid)?;
    let system = decoupled_system(model, path, payoff, grid, x0)?;
    Ok(report_sentinel(ocp::objective(&system, &QuadraticCost::pure(vec![1.0]), u.values())))
}

/// `2 log G(X1_T) - int u1^2 dt - (N - 1)/2 int uhat^2 dt`.
pub fn objective_complete(
    model: &ModelSpec,
    payoff: &Payoff,
    n_particles: usize,
    u1: &ControlPath,
    uhat: &ControlPath,
    grid: &TimeGrid,
    x0: f64,
) -> Result<f64> {
    u1.check_grid(grid)?;
    uhat.check_grid(grid)?;
    let system = complete_system(model, payoff, n_particles, grid, x0)?;
    let u = interleave(&[u1.values(), uhat.values()]);
    Ok(report_sentinel(ocp::objective(&system, &complete_cost(n_particles), &u)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckOptions {
    pub bvp: BvpOptions,
    /// Certify when `gap <= relative_tolerance * |L(h)|`.
    pub relative_tolerance: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { bvp: BvpOptions::default(), relative_tolerance: 1e-2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckScope {
    Decoupled,
    /// Only controls with `u2 = ... = uN` are searched.
    CompleteExchangeable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    pub scope: CheckScope,
    /// `L(h)`, the inner supremum.
    pub l_value: f64,
    /// The simplified objective at `h`.
    pub objective_at_h: f64,
    pub gap: f64,
    pub relative_gap: f64,
    pub relative_tolerance: f64,
    pub certified: bool,
    /// Inner searches that produced a finite value, out of those attempted.
    pub starts_succeeded: usize,
    pub starts_attempted: usize,
    /// Gradient sup norm at the best inner control.
    pub inner_stationarity_norm: f64,
}

impl GapReport {
    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

const START_SCALES: [f64; 5] = [1.0, 0.5, 2.0, 0.25, 0.0];

/// Lower bound on the inner supremum by local searches from `h` itself and
/// from scaled copies of the canonical initial adjoint.
fn inner_supremum<D: Dynamics>(
    dynamics: &D,
    cost: &QuadraticCost,
    at_h: Vec<f64>,
    opts: &BvpOptions,
) -> Result<(f64, f64, usize, usize)> {
    let mut best = ocp::objective(dynamics, cost, &at_h);
    let mut best_norm = f64::NAN;
    let mut succeeded = 0;
    let mut attempted = 1;
    let mut first_error = None;

    let mut consider = |r: Result<ocp::Refined>, best: &mut f64, best_norm: &mut f64| match r {
        Ok(r) if r.grad.value.is_finite() => {
            succeeded += 1;
            if r.grad.value > *best || best_norm.is_nan() {
                *best = best.max(r.grad.value);
                *best_norm = r.gradient_norm;
            }
        }
        Ok(_) => {}
        Err(e) => {
            first_error.get_or_insert(e);
        }
    };

    consider(ocp::refine(dynamics, cost, at_h, opts), &mut best, &mut best_norm);
    for scale in START_SCALES {
        attempted += 1;
        let r = canonical_guess(dynamics).and_then(|g| {
            let p0 = g.iter().map(|p| scale * p).collect();
            let shot = ocp::solve_shooting(dynamics, cost, p0, opts)?;
            ocp::refine(dynamics, cost, shot.control, opts)
        });
        consider(r, &mut best, &mut best_norm);
    }
    if succeeded == 0 && !best.is_finite() {
        if let Some(e) = first_error {
            return Err(e);
        }
    }
    Ok((best, best_norm, succeeded, attempted))
}

fn gap_report(
    scope: CheckScope,
    inner: (f64, f64, usize, usize),
    objective_at_h: f64,
    tol: f64,
) -> GapReport {
    let (l_value, norm, succeeded, attempted) = inner;
    let gap = l_value - objective_at_h;
    let relative_gap = if l_value.abs() > 0.0 {
        gap / l_value.abs()
    } else if gap <= 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    GapReport {
        scope,
        l_value,
        objective_at_h,
        gap,
        relative_gap,
        relative_tolerance: tol,
        certified: relative_gap.is_finite() && relative_gap <= tol,
        starts_succeeded: succeeded,
        starts_attempted: attempted,
        inner_stationarity_norm: norm,
    }
}

/// Compares `L(h) = sup_u {2 log G(u) - int hdot u + int hdot^2 / 2 - int u^2 / 2}`
/// with the simplified objective at `h`.
pub fn optimality_check_decoupled(
    model: &ModelSpec,
    path: &MeasurePath,
    payoff: &Payoff,
    h: &ControlPath,
    grid: &TimeGrid,
    x0: f64,
    opts: &CheckOptions,
) -> Result<GapReport> {
    h.check_grid(grid)?;
    let system = decoupled_system(model, path, payoff, grid, x0)?;
    let hv = h.values();
    let cost = QuadraticCost {
        quadratic: vec![0.5],
        linear: hv.to_vec(),
        constant: hv.iter().map(|x| -0.5 * x * x).collect(),
    };
    let inner = inner_supremum(&system, &cost, hv.to_vec(), &opts.bvp)?;
    let at_h = ocp::objective(&system, &QuadraticCost::pure(vec![1.0]), hv);
    Ok(gap_report(CheckScope::Decoupled, inner, at_h, opts.relative_tolerance))
}

/// Complete-system check restricted to exchangeable controls
/// `(u1, uhat, ..., uhat)`, at the pair `(h, uhat)`.
pub fn optimality_check_complete(
    model: &ModelSpec,
    payoff: &Payoff,
    n_particles: usize,
    h: &ControlPath,
    uhat: &ControlPath,
    grid: &TimeGrid,
    x0: f64,
    opts: &CheckOptions,
) -> Result<GapReport> {
    h.check_grid(grid)?;
    uhat.check_grid(grid)?;
    let system = complete_system(model, payoff, n_particles, grid, x0)?;
    let hv = h.values();
    let n = grid.n_steps();
    let mut linear = vec![0.0; 2 * n];
    for k in 0..n {
        linear[2 * k] = hv[k];
    }
    let cost = QuadraticCost {
        quadratic: vec![0.5, (n_particles as f64 - 1.0) / 2.0],
        linear,
        constant: hv.iter().map(|x| -0.5 * x * x).collect(),
    };
    let pair = interleave(&[hv, uhat.values()]);
    let at_h = ocp::objective(&system, &complete_cost(n_particles), &pair);
    let inner = inner_supremum(&system, &cost, pair, &opts.bvp)?;
    Ok(gap_report(CheckScope::CompleteExchangeable, inner, at_h, opts.relative_tolerance))
}
