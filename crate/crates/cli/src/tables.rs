//! Sweeps over `N` for the two payoff tables and the repeated plain run
//! for the propagation-of-chaos error.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use mvis_core::control::{solve_bvp_complete, solve_bvp_decoupled, BvpOptions};
use mvis_core::estimators::{self, chaos_error_experiment, Algorithm, ChaosReport, EstimatorReport};
use mvis_core::exec::{self, Backend};
use mvis_core::measures::freeze_measure_path;
use mvis_core::models::{ModelSpec, Payoff};
use mvis_core::rng::derive_seed;
use mvis_core::sim::{self, SimOptions, TimeGrid};
use mvis_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::run::DECOUPLED_SEED_TAG;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table {
    /// Exponential payoff `0.5 e^{10x}`.
    Table1,
    /// Steep tanh payoff with `a = 15`, `b = 1`; values scaled by `1e9`.
    Table2,
    Chaos,
}

impl FromStr for Table {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Self::Table1),
            "table2" => Ok(Self::Table2),
            "chaos" => Ok(Self::Chaos),
            other => Err(Error::Config(format!("unknown table {other:?}; expected table1, table2 or chaos"))),
        }
    }
}

impl fmt::Display for Table {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Table1 => "table1",
            Self::Table2 => "table2",
            Self::Chaos => "chaos",
        })
    }
}

pub const TABLE_SIZES: [usize; 5] = [1_000, 5_000, 10_000, 50_000, 100_000];

#[derive(Debug, Clone, PartialEq)]
pub struct TableSettings {
    pub sizes: Vec<usize>,
    pub chaos_n: usize,
    pub chaos_m: usize,
    pub seed: u64,
    pub backend: Backend,
    pub record_timing: bool,
}

impl Default for TableSettings {
    fn default() -> Self {
        Self {
            sizes: TABLE_SIZES.to_vec(),
            chaos_n: 5_000,
            chaos_m: 1_000,
            seed: 42,
            backend: Backend::default(),
            record_timing: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TableRow {
    pub n: usize,
    pub seed: u64,
    pub mc: EstimatorReport,
    pub decoupled: EstimatorReport,
    pub complete: EstimatorReport,
}

#[derive(Debug, Clone)]
pub enum TableOutput {
    Rows(Vec<TableRow>),
    Chaos(ChaosReport),
}

pub fn table_payoff(which: Table) -> Payoff {
    match which {
        Table::Table2 => Payoff::Tanh { a: 15.0, b: 1.0 },
        _ => Payoff::Exp { a: 0.5, b: 10.0 },
    }
}

/// The three estimators at one population size. Both runs of the
/// decoupled algorithm use `n` particles.
pub fn table_row(
    model: &ModelSpec,
    payoff: &Payoff,
    grid: &TimeGrid,
    x0: f64,
    n: usize,
    seed: u64,
    backend: Backend,
    bvp: &BvpOptions,
) -> Result<TableRow> {
    let opts = SimOptions::with_backend(backend);
    let start = Instant::now();
    let p = sim::simulate_particles_p(model, n, grid, x0, seed, opts)?;
    let p_time = start.elapsed().as_secs_f64();
    let mut mc = estimators::estimate(&p, payoff, Algorithm::Mc, backend);
    mc.wall_time_s = p_time;

    let start = Instant::now();
    let law = freeze_measure_path(&p);
    let sol = solve_bvp_decoupled(model, &law, payoff, grid, x0, bvp)?;
    let solve = start.elapsed().as_secs_f64();
    let q = sim::simulate_decoupled_q(model, &law, &sol.control, n, grid, x0, derive_seed(seed, DECOUPLED_SEED_TAG), opts)?;
    let mut decoupled = estimators::estimate(&q, payoff, Algorithm::Decoupled, backend);
    decoupled.wall_time_s = p_time + start.elapsed().as_secs_f64();
    decoupled.solve_time_s = solve;
    decoupled.seed = seed;

    let start = Instant::now();
    let sol = solve_bvp_complete(model, payoff, n, grid, x0, bvp)?;
    let solve = start.elapsed().as_secs_f64();
    let q = sim::simulate_complete_q(model, &sol.control, n, grid, x0, seed, opts)?;
    let mut complete = estimators::estimate(&q, payoff, Algorithm::Complete, backend);
    complete.wall_time_s = start.elapsed().as_secs_f64();
    complete.solve_time_s = solve;

    Ok(TableRow { n, seed, mc, decoupled, complete })
}

/// Runs a table. The model, grid and solver options come from `cfg`; the
/// payoff is fixed by the table. Row seeds derive from the base seed and `N`.
pub fn reproduce_tables(cfg: &ExperimentConfig, which: Table, settings: &TableSettings) -> Result<TableOutput> {
    let model = cfg.model()?;
    let grid = cfg.grid()?;
    let x0 = cfg.grid.x0;
    let payoff = table_payoff(which);
    if which == Table::Chaos {
        let report = chaos_error_experiment(
            &model,
            &payoff,
            settings.chaos_n,
            settings.chaos_m,
            &grid,
            x0,
            settings.seed,
            settings.backend,
        )?;
        return Ok(TableOutput::Chaos(report));
    }
    let rows = exec::map_range(settings.backend, settings.sizes.len(), |i| {
        let n = settings.sizes[i];
        table_row(&model, &payoff, &grid, x0, n, derive_seed(settings.seed, n as u64), settings.backend, &cfg.bvp)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(TableOutput::Rows(rows))
}

pub fn write_table(which: Table, output: &TableOutput, record_timing: bool, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let time = |t: f64| if record_timing { t.to_string() } else { "0".to_string() };
    match output {
        TableOutput::Chaos(c) => {
            w.write_record(["N", "M", "mean_estimate", "mean_std_error", "cross_rep_std", "seed"])?;
            w.write_record([
                c.n.to_string(),
                c.repetitions.to_string(),
                c.mean_estimate.to_string(),
                c.mean_std_error.to_string(),
                c.cross_rep_std.to_string(),
                c.seed.to_string(),
            ])?;
        }
        TableOutput::Rows(rows) if which == Table::Table2 => {
            w.write_record([
                "N",
                "mc_payoff_x1e9",
                "mc_error_x1e9",
                "decoupled_payoff_x1e9",
                "decoupled_error_x1e9",
                "complete_payoff_x1e9",
                "complete_error_x1e9",
                "seed",
            ])?;
            for r in rows {
                let mut rec = vec![r.n.to_string()];
                for e in [&r.mc, &r.decoupled, &r.complete] {
                    rec.push((e.estimate * 1e9).to_string());
                    rec.push((e.std_error * 1e9).to_string());
                }
                rec.push(r.seed.to_string());
                w.write_record(&rec)?;
            }
        }
        TableOutput::Rows(rows) => {
            w.write_record([
                "N",
                "mc_payoff",
                "mc_error",
                "mc_time",
                "decoupled_payoff",
                "decoupled_error",
                "decoupled_time",
                "complete_payoff",
                "complete_error",
                "complete_time",
                "seed",
            ])?;
            for r in rows {
                let mut rec = vec![r.n.to_string()];
                for e in [&r.mc, &r.decoupled, &r.complete] {
                    rec.push(e.estimate.to_string());
                    rec.push(e.std_error.to_string());
                    rec.push(time(e.wall_time_s));
                }
                rec.push(r.seed.to_string());
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
