//! Euler-Maruyama simulation of the three particle systems:
//!
//! * the interacting system under the original measure,
//! * the decoupled system, driven by a frozen law and importance-sampled with
//!   a deterministic drift shift,
//! * the complete measure change, where the interaction is taken against the
//!   likelihood-weighted empirical measure.
//!
//! Likelihood weights use the exact discrete stochastic exponential
//! `Z = exp(-sum hdot dW - 1/2 sum hdot^2 dt)` on the grid increments.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Backend, CHUNK};
use crate::measures::{MeasurePath, Normalization};
use crate::models::{MeanField, ModelSpec};
use crate::rng::particle_stream;

/// Uniform grid `t_k = k T / n`, `k = 0..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    /// Grid with (approximately) the requested step size.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("step size must be positive, got {dt}")));
        }
        Self::new(horizon, (horizon / dt).round().max(1.0) as usize)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.n_steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }
}

/// Piecewise-constant derivative `hdot` of a Cameron-Martin shift:
/// `hdot[k]` holds on `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    hdot: Vec<f64>,
}

impl ControlPath {
    pub fn new(hdot: Vec<f64>) -> Result<Self> {
        if let Some(k) = hdot.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("control value at step {k} is not finite")));
        }
        Ok(Self { hdot })
    }

    pub fn zeros(n_steps: usize) -> Self {
        Self { hdot: vec![0.0; n_steps] }
    }

    pub fn constant(n_steps: usize, value: f64) -> Self {
        Self { hdot: vec![value; n_steps] }
    }

    pub fn values(&self) -> &[f64] {
        &self.hdot
    }

    pub fn len(&self) -> usize {
        self.hdot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hdot.is_empty()
    }

    /// `int_0^T hdot^2 dt`
    pub fn energy(&self, dt: f64) -> f64 {
        self.hdot.iter().map(|h| h * h).sum::<f64>() * dt
    }

    /// Shifts every value by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        Self { hdot: self.hdot.iter().map(|h| h + delta).collect() }
    }

    pub fn sup_norm(&self) -> f64 {
        self.hdot.iter().fold(0.0_f64, |m, h| m.max(h.abs()))
    }

    pub(crate) fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.hdot.len() != grid.n_steps() {
            return Err(Error::Config(format!(
                "control has {} values for a grid with {} steps",
                self.hdot.len(),
                grid.n_steps()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasureLabel {
    P,
    QDecoupled,
    QComplete,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SimOptions {
    pub backend: Backend,
    /// Evaluate the interaction by the direct double sum even when the kernel
    /// is separable.
    pub direct_interaction: bool,
}

impl SimOptions {
    pub fn with_backend(backend: Backend) -> Self {
        Self { backend, ..Self::default() }
    }
}

/// Simulated paths, their Brownian increments and terminal likelihoods.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    n_particles: usize,
    grid: TimeGrid,
    /// row-major, `n_particles x (n_steps + 1)`
    states: Vec<f64>,
    /// row-major, `n_particles x n_steps`
    increments: Vec<f64>,
    weights: Vec<f64>,
    seed: u64,
    label: MeasureLabel,
    control: Option<ControlPath>,
}

impl ParticleEnsemble {
    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> MeasureLabel {
        self.label
    }

    /// The measure change used, if any.
    pub fn control(&self) -> Option<&ControlPath> {
        self.control.as_ref()
    }

    pub fn state(&self, particle: usize, step: usize) -> f64 {
        self.states[particle * (self.grid.n_steps() + 1) + step]
    }

    pub fn path(&self, particle: usize) -> &[f64] {
        let w = self.grid.n_steps() + 1;
        &self.states[particle * w..(particle + 1) * w]
    }

    pub fn increments(&self, particle: usize) -> &[f64] {
        let w = self.grid.n_steps();
        &self.increments[particle * w..(particle + 1) * w]
    }

    pub fn terminal(&self, particle: usize) -> f64 {
        self.state(particle, self.grid.n_steps())
    }

    pub fn terminal_states(&self) -> Vec<f64> {
        (0..self.n_particles).map(|i| self.terminal(i)).collect()
    }

    /// Terminal likelihood ratios dP/dQ (all 1 for an unweighted run).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Likelihood of particle `i` at node `k`.
    pub fn weight_at(&self, particle: usize, step: usize) -> f64 {
        match &self.control {
            None => 1.0,
            Some(h) => {
                let dt = self.grid.dt();
                let dw = self.increments(particle);
                let log_z = h.values()[..step]
                    .iter()
                    .zip(dw)
                    .fold(0.0, |acc, (&hk, &w)| acc + (-hk * w - 0.5 * hk * hk * dt));
                log_z.exp()
            }
        }
    }

    /// Writes `step,particle,state,weight` rows; increments are not written.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "particle", "state", "weight"])?;
        for k in 0..=self.grid.n_steps() {
            for i in 0..self.n_particles {
                w.write_record(&[
                    k.to_string(),
                    i.to_string(),
                    format!("{:e}", self.state(i, k)),
                    format!("{:e}", self.weight_at(i, k)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Interacting particle system under the original measure.
pub fn simulate_particles_p(
    model: &ModelSpec,
    n_particles: usize,
    grid: &TimeGrid,
    x0: f64,
    seed: u64,
    opts: SimOptions,
) -> Result<ParticleEnsemble> {
    if n_particles < 1 {
        return Err(Error::Config("need at least one particle".into()));
    }
    Engine { model, grid, x0, n_particles, seed, opts, control: None }
        .run(Law::Interacting { weighted: false }, MeasureLabel::P)
}

/// Second phase of the decoupled algorithm: independent paths driven by the
/// frozen law `path`, shifted by `sigma * hdot`.
pub fn simulate_decoupled_q(
    model: &ModelSpec,
    path: &MeasurePath,
    control: &ControlPath,
    n_particles: usize,
    grid: &TimeGrid,
    x0: f64,
    seed: u64,
    opts: SimOptions,
) -> Result<ParticleEnsemble> {
    if path.grid() != grid {
        return Err(Error::Config(format!(
            "frozen law grid {:?} does not match simulation grid {:?}",
            path.grid(),
            grid
        )));
    }
    if n_particles < 1 {
        return Err(Error::Config("need at least one particle".into()));
    }
    control.check_grid(grid)?;
    let fields = path
        .clouds()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let t = grid.time(k);
            if opts.direct_interaction {
                model.mean_field_direct(t, c.points(), Some(c.weights()), c.normalization())
            } else {
                model.mean_field(opts.backend, t, c.points(), Some(c.weights()), c.normalization())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Engine { model, grid, x0, n_particles, seed, opts, control: Some(control) }
        .run(Law::Frozen(fields), MeasureLabel::QDecoupled)
}

/// Complete measure change: the interacting system under the shifted
/// measure, interacting through `sum_j Z_j delta_{X_j} / N`.
pub fn simulate_complete_q(
    model: &ModelSpec,
    control: &ControlPath,
    n_particles: usize,
    grid: &TimeGrid,
    x0: f64,
    seed: u64,
    opts: SimOptions,
) -> Result<ParticleEnsemble> {
    if n_particles < 2 {
        return Err(Error::Config("the complete measure change needs at least two particles".into()));
    }
    control.check_grid(grid)?;
    Engine { model, grid, x0, n_particles, seed, opts, control: Some(control) }
        .run(Law::Interacting { weighted: true }, MeasureLabel::QComplete)
}

enum Law<'a> {
    Interacting { weighted: bool },
    Frozen(Vec<MeanField<'a>>),
}

struct Engine<'a> {
    model: &'a ModelSpec,
    grid: &'a TimeGrid,
    x0: f64,
    n_particles: usize,
    seed: u64,
    opts: SimOptions,
    control: Option<&'a ControlPath>,
}

/// One work item: a contiguous run of particles.
struct Block<'a> {
    start: usize,
    states: &'a mut [f64],
    increments: &'a mut [f64],
    log_z: &'a mut [f64],
    z_next: &'a mut [f64],
    x_next: &'a mut [f64],
    rngs: &'a mut [ChaCha8Rng],
    finite: bool,
}

impl Engine<'_> {
    fn run(self, law: Law<'_>, label: MeasureLabel) -> Result<ParticleEnsemble> {
        let n = self.n_particles;
        let steps = self.grid.n_steps();
        let width = steps + 1;
        let dt = self.grid.dt();
        let sqrt_dt = dt.sqrt();
        let sigma = self.model.sigma();
        let backend = self.opts.backend;

        let mut states = vec![0.0; n * width];
        for row in states.chunks_mut(width) {
            row[0] = self.x0;
        }
        let mut increments = vec![0.0; n * steps];
        let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| particle_stream(self.seed, i)).collect();
        let mut x_cur = vec![self.x0; n];
        let mut x_next = vec![0.0; n];
        let mut log_z = vec![0.0; n];
        let mut z_cur = vec![1.0; n];
        let mut z_next = vec![1.0; n];

        for k in 0..steps {
            let t = self.grid.time(k);
            let hk = self.control.map_or(0.0, |h| h.values()[k]);

            let interacting;
            let field: &MeanField<'_> = match &law {
                Law::Frozen(fields) => &fields[k],
                Law::Interacting { weighted } => {
                    let (weights, norm) = if *weighted {
                        let total = exec::chunked_sum(backend, n, |i| z_cur[i]);
                        if !(total >= 1e-280) {
                            return Err(Error::DegenerateLikelihood { step: k, sum: total });
                        }
                        (Some(z_cur.as_slice()), Normalization::RawAverage)
                    } else {
                        (None, Normalization::Probability)
                    };
                    interacting = if self.opts.direct_interaction {
                        self.model.mean_field_direct(t, &x_cur, weights, norm)?
                    } else {
                        self.model.mean_field(backend, t, &x_cur, weights, norm)?
                    };
                    &interacting
                }
            };

            let mut blocks: Vec<Block<'_>> = states
                .chunks_mut(CHUNK * width)
                .zip(increments.chunks_mut(CHUNK * steps))
                .zip(log_z.chunks_mut(CHUNK))
                .zip(z_next.chunks_mut(CHUNK))
                .zip(x_next.chunks_mut(CHUNK))
                .zip(rngs.chunks_mut(CHUNK))
                .enumerate()
                .map(|(b, (((((s, inc), lz), zn), xn), r))| Block {
                    start: b * CHUNK,
                    states: s,
                    increments: inc,
                    log_z: lz,
                    z_next: zn,
                    x_next: xn,
                    rngs: r,
                    finite: true,
                })
                .collect();

            let model = self.model;
            let x_cur_ref = &x_cur;
            let weighted_step = self.control.is_some();
            exec::for_each_mut(backend, &mut blocks, |blk| {
                for j in 0..blk.x_next.len() {
                    let x = x_cur_ref[blk.start + j];
                    let drift = field.drift(model, t, x) + hk * sigma;
                    let z: f64 = StandardNormal.sample(&mut blk.rngs[j]);
                    let dw = sqrt_dt * z;
                    let xn = x + drift * dt + sigma * dw;
                    blk.finite &= xn.is_finite();
                    blk.states[j * width + k + 1] = xn;
                    blk.increments[j * steps + k] = dw;
                    blk.x_next[j] = xn;
                    if weighted_step {
                        blk.log_z[j] += -hk * dw - 0.5 * hk * hk * dt;
                        blk.z_next[j] = blk.log_z[j].exp();
                    }
                }
            });
            if blocks.iter().any(|b| !b.finite) {
                return Err(Error::Explosion { step: k + 1 });
            }
            drop(blocks);
            std::mem::swap(&mut x_cur, &mut x_next);
            std::mem::swap(&mut z_cur, &mut z_next);
        }

        let weights = if self.control.is_some() { z_cur } else { vec![1.0; n] };
        Ok(ParticleEnsemble {
            n_particles: n,
            grid: *self.grid,
            states,
            increments,
            weights,
            seed: self.seed,
            label,
            control: self.control.cloned(),
        })
    }
}
