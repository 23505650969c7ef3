//! Monte Carlo estimators and the propagation-of-chaos experiment.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Backend};
use crate::models::{ModelSpec, Payoff};
use crate::sim::{simulate_particles_p, ParticleEnsemble, SimOptions, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Mc,
    Decoupled,
    Complete,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Mc => "mc",
            Algorithm::Decoupled => "decoupled",
            Algorithm::Complete => "complete",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(Algorithm::Mc),
            "decoupled" => Ok(Algorithm::Decoupled),
            "complete" => Ok(Algorithm::Complete),
            other => Err(Error::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub algorithm: Algorithm,
    pub n: usize,
    pub estimate: f64,
    /// Sample standard deviation of the per-particle contributions over sqrt(N).
    pub std_error: f64,
    /// `(sum Z)^2 / sum Z^2`
    pub ess: f64,
    /// Simulation time.
    pub wall_time_s: f64,
    pub seed: u64,
    /// Time spent in the boundary-value solve, 0 for plain Monte Carlo.
    pub solve_time_s: f64,
}

/// Column order of [`EstimatorReport::write_csv_row`].
pub const REPORT_HEADER: [&str; 8] =
    ["algorithm", "N", "estimate", "std_error", "ess", "wall_time_s", "seed", "solve_time_s"];

impl EstimatorReport {
    pub fn write_csv_header<W: Write>(w: &mut csv::Writer<W>) -> Result<()> {
        w.write_record(REPORT_HEADER)?;
        Ok(())
    }

    pub fn write_csv_row<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        w.write_record(&[
            self.algorithm.to_string(),
            self.n.to_string(),
            format!("{:e}", self.estimate),
            format!("{:e}", self.std_error),
            format!("{:e}", self.ess),
            format!("{:.6}", self.wall_time_s),
            self.seed.to_string(),
            format!("{:.6}", self.solve_time_s),
        ])?;
        Ok(())
    }
}

/// Sample mean and standard error of `f(0..n)`, with deterministic
/// summation order. The mean gets one correction pass so that identical
/// contributions give back exactly that value.
pub fn mean_and_std_error(backend: Backend, n: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> (f64, f64) {
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let nf = n as f64;
    let rough = exec::chunked_sum(backend, n, &f) / nf;
    let mean = rough + exec::chunked_sum(backend, n, |i| f(i) - rough) / nf;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = exec::chunked_sum(backend, n, |i| {
        let d = f(i) - mean;
        d * d
    });
    (mean, (ss / (nf - 1.0)).sqrt() / nf.sqrt())
}

/// Weighted estimator `(1/N) sum_i Z_i G(X_i(T))`. For unit weights this is
/// the plain Monte Carlo mean.
pub fn estimate(
    ensemble: &ParticleEnsemble,
    payoff: &Payoff,
    algorithm: Algorithm,
    backend: Backend,
) -> EstimatorReport {
    let n = ensemble.n_particles();
    let w = ensemble.weights();
    let contribution = |i: usize| w[i] * payoff.eval(ensemble.terminal(i));
    let (est, se) = mean_and_std_error(backend, n, contribution);
    let sums = exec::chunked_sums(backend, n, 2, |i, acc| {
        acc[0] += w[i];
        acc[1] += w[i] * w[i];
    });
    let ess = if w.iter().all(|&x| x == w[0]) { n as f64 } else {
        (sums[0] * sums[0] / sums[1]).clamp(1.0, n as f64)
    };
    EstimatorReport {
        algorithm,
        n,
        estimate: est,
        std_error: se,
        ess,
        wall_time_s: 0.0,
        seed: ensemble.seed(),
        solve_time_s: 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChaosReport {
    pub n: usize,
    pub repetitions: usize,
    pub mean_estimate: f64,
    pub mean_std_error: f64,
    /// Standard deviation of the estimates across repetitions.
    pub cross_rep_std: f64,
    pub seed: u64,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
}

/// Repeats an `N`-particle plain simulation `M` times (repetition `r` uses
/// seed `seed + r`) and averages the estimates. As `M` grows the average
/// isolates `E[G(X^{1,N}_T)]`, so its distance to the true value measures
/// the propagation-of-chaos bias.
pub fn chaos_error_experiment(
    model: &ModelSpec,
    payoff: &Payoff,
    n: usize,
    repetitions: usize,
    grid: &TimeGrid,
    x0: f64,
    seed: u64,
    backend: Backend,
) -> Result<ChaosReport> {
    if repetitions < 1 {
        return Err(Error::Config("need at least one repetition".into()));
    }
    // Repetitions are the parallel unit; each run is sequential inside.
    let inner = SimOptions::with_backend(Backend::Sequential);
    let runs = exec::map_range(backend, repetitions, |r| {
        let e = simulate_particles_p(model, n, grid, x0, seed.wrapping_add(r as u64), inner)?;
        let rep = estimate(&e, payoff, Algorithm::Mc, Backend::Sequential);
        Ok((rep.estimate, rep.std_error))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (estimates, std_errors): (Vec<f64>, Vec<f64>) = runs.into_iter().unzip();
    let m = repetitions as f64;
    let mean_estimate = estimates.iter().sum::<f64>() / m;
    let mean_std_error = std_errors.iter().sum::<f64>() / m;
    let cross_rep_std = if repetitions > 1 {
        (estimates.iter().map(|e| (e - mean_estimate).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(ChaosReport {
        n,
        repetitions,
        mean_estimate,
        mean_std_error,
        cross_rep_std,
        seed,
        estimates,
        std_errors,
    })
}
