//! The three estimation pipelines and their report files.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mvis_core::control::{
    optimality_check_complete, optimality_check_decoupled, solve_bvp_complete, solve_bvp_decoupled,
    BvpSolution, CheckOptions, GapReport,
};
use mvis_core::estimators::{self, chaos_error_experiment, Algorithm, ChaosReport, EstimatorReport};
use mvis_core::measures::{freeze_measure_path, MeasurePath};
use mvis_core::rng::derive_seed;
use mvis_core::sim::{self, ParticleEnsemble, SimOptions};
use mvis_core::Result;

use crate::config::ExperimentConfig;

/// Tag for the seed of the decoupled second run.
pub const DECOUPLED_SEED_TAG: u64 = 1;

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub reports: Vec<EstimatorReport>,
    pub decoupled_bvp: Option<BvpSolution>,
    pub complete_bvp: Option<BvpSolution>,
    pub decoupled_gap: Option<GapReport>,
    pub complete_gap: Option<GapReport>,
    pub chaos: Option<ChaosReport>,
    pub files: Vec<PathBuf>,
}

struct Timed<T> {
    value: T,
    seconds: f64,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<Timed<T>> {
    let start = Instant::now();
    let value = f()?;
    Ok(Timed { value, seconds: start.elapsed().as_secs_f64() })
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Writer<'_> {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path)?;
        self.files.push(path);
        Ok(BufWriter::new(f))
    }

    fn ensemble(&mut self, name: &str, e: &ParticleEnsemble) -> Result<()> {
        e.write_csv(self.create(name)?)
    }

    fn json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        serde_json::to_writer_pretty(self.create(name)?, value)?;
        Ok(())
    }
}

pub fn write_reports(path: &Path, reports: &[EstimatorReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    EstimatorReport::write_csv_header(&mut w)?;
    for r in reports {
        r.write_csv_row(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the configured pipelines and writes `report.csv` plus the solver and
/// law files into `cfg.run.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let model = cfg.model()?;
    let payoff = cfg.payoff()?;
    let grid = cfg.grid()?;
    let x0 = cfg.grid.x0;
    let seed = cfg.run.seed;
    let opts = SimOptions::with_backend(cfg.run.backend);
    let algo = cfg.run.algorithm;
    let check = CheckOptions { bvp: cfg.bvp, relative_tolerance: cfg.check.relative_tolerance };
    let clock = |t: f64| if cfg.run.record_timing { t } else { 0.0 };

    fs::create_dir_all(&cfg.run.out)?;
    let mut out = Writer { dir: &cfg.run.out, files: Vec::new() };
    let mut outcome = RunOutcome::default();

    // The interacting run is shared by plain Monte Carlo and the first
    // phase of the decoupled algorithm.
    let needs_p = algo.includes_mc() || (algo.includes_decoupled() && cfg.run.law.is_none());
    let p_run = if needs_p {
        let t = timed(|| sim::simulate_particles_p(&model, cfg.run.n, &grid, x0, seed, opts))?;
        log::info!("interacting run with N = {} done in {:.3}s", cfg.run.n, t.seconds);
        Some(t)
    } else {
        None
    };

    if algo.includes_mc() {
        let p = p_run.as_ref().expect("interacting run present");
        let mut r = estimators::estimate(&p.value, &payoff, Algorithm::Mc, cfg.run.backend);
        r.wall_time_s = clock(p.seconds);
        outcome.reports.push(r);
        if cfg.run.dump_paths {
            out.ensemble("paths_mc.csv", &p.value)?;
        }
        if cfg.run.m > 1 {
            let c = chaos_error_experiment(&model, &payoff, cfg.run.n, cfg.run.m, &grid, x0, seed, cfg.run.backend)?;
            out.json("chaos.json", &c)?;
            outcome.chaos = Some(c);
        }
    }

    if algo.includes_decoupled() {
        let (law, law_seconds) = match &cfg.run.law {
            Some(path) => (MeasurePath::read_csv(File::open(path)?, grid)?, 0.0),
            None => {
                let p = p_run.as_ref().expect("interacting run present");
                (freeze_measure_path(&p.value), p.seconds)
            }
        };
        law.write_csv(out.create("measure_path.csv")?)?;
        let sol = timed(|| solve_bvp_decoupled(&model, &law, &payoff, &grid, x0, &cfg.bvp))?;
        let q_seed = derive_seed(seed, DECOUPLED_SEED_TAG);
        let q = timed(|| sim::simulate_decoupled_q(&model, &law, &sol.value.control, cfg.n2(), &grid, x0, q_seed, opts))?;
        let mut r = estimators::estimate(&q.value, &payoff, Algorithm::Decoupled, cfg.run.backend);
        r.wall_time_s = clock(law_seconds + sol.seconds + q.seconds);
        r.solve_time_s = clock(sol.seconds);
        r.seed = seed;
        outcome.reports.push(r);
        out.json("bvp_decoupled.json", &sol.value)?;
        if cfg.run.dump_paths {
            out.ensemble("paths_decoupled.csv", &q.value)?;
        }
        if cfg.check.enabled {
            let gap = optimality_check_decoupled(&model, &law, &payoff, &sol.value.control, &grid, x0, &check)?;
            out.json("optimality_decoupled.json", &gap)?;
            outcome.decoupled_gap = Some(gap);
        }
        outcome.decoupled_bvp = Some(sol.value);
    }

    if algo.includes_complete() {
        let sol = timed(|| solve_bvp_complete(&model, &payoff, cfg.run.n, &grid, x0, &cfg.bvp))?;
        let q = timed(|| sim::simulate_complete_q(&model, &sol.value.control, cfg.run.n, &grid, x0, seed, opts))?;
        let mut r = estimators::estimate(&q.value, &payoff, Algorithm::Complete, cfg.run.backend);
        r.wall_time_s = clock(sol.seconds + q.seconds);
        r.solve_time_s = clock(sol.seconds);
        outcome.reports.push(r);
        out.json("bvp_complete.json", &sol.value)?;
        if cfg.run.dump_paths {
            out.ensemble("paths_complete.csv", &q.value)?;
        }
        if cfg.check.enabled {
            let uhat = sol.value.auxiliary_control.clone().expect("complete solution carries uhat");
            let gap = optimality_check_complete(
                &model,
                &payoff,
                cfg.run.n,
                &sol.value.control,
                &uhat,
                &grid,
                x0,
                &check,
            )?;
            out.json("optimality_complete.json", &gap)?;
            outcome.complete_gap = Some(gap);
        }
        outcome.complete_bvp = Some(sol.value);
    }

    let report_path = cfg.run.out.join("report.csv");
    write_reports(&report_path, &outcome.reports)?;
    out.files.push(report_path);
    outcome.files = out.files;
    Ok(outcome)
}

/// Interacting run, frozen law and decoupled control, then the gap check
/// (and the exchangeable complete check when the complete algorithm is selected).
pub fn check_optimality(cfg: &ExperimentConfig) -> Result<Vec<GapReport>> {
    let mut cfg = cfg.clone();
    cfg.check.enabled = true;
    let algo = cfg.run.algorithm;
    cfg.run.algorithm = match algo {
        crate::config::AlgorithmChoice::Mc => crate::config::AlgorithmChoice::Decoupled,
        other => other,
    };
    let outcome = run_experiment(&cfg)?;
    Ok(outcome.decoupled_gap.into_iter().chain(outcome.complete_gap).collect())
}
