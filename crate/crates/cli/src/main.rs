use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mvis_cli::{exit_code, AlgorithmChoice, ExperimentConfig, Table, TableSettings};
use mvis_core::exec::Backend;

#[derive(Parser)]
#[command(name = "mvis", version, about = "Importance sampling for McKean-Vlasov SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the selected estimators and write report.csv.
    Run(Overrides),
    /// Reproduce a results table (table1, table2 or chaos).
    Tables {
        which: Table,
        /// Comma-separated population sizes for table1/table2.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Solve the control problem and check its asymptotic optimality.
    CheckOptimality(Overrides),
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "MVIS_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    algorithm: Option<AlgorithmChoice>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long = "N2")]
    n2: Option<usize>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    dump_paths: bool,
    /// Frozen law CSV (step,particle,state) for the decoupled algorithm.
    #[arg(long)]
    law: Option<PathBuf>,
    /// Force the sequential backend.
    #[arg(long)]
    sequential: bool,
    /// Write 0 in the time columns.
    #[arg(long)]
    no_timing: bool,
}

impl Overrides {
    fn resolve(&self) -> mvis_core::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let run = &mut cfg.run;
        if let Some(v) = self.seed {
            run.seed = v;
        }
        if let Some(v) = self.algorithm {
            run.algorithm = v;
        }
        if let Some(v) = self.n {
            run.n = v;
        }
        if self.n2.is_some() {
            run.n2 = self.n2;
        }
        if let Some(v) = self.m {
            run.m = v;
        }
        if let Some(v) = &self.out {
            run.out = v.clone();
        }
        if let Some(v) = self.threads {
            run.threads = v;
        }
        if self.law.is_some() {
            run.law = self.law.clone();
        }
        run.dump_paths |= self.dump_paths;
        if self.sequential {
            run.backend = Backend::Sequential;
        }
        if self.no_timing {
            run.record_timing = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn init_threads(threads: usize) -> anyhow::Result<()> {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the thread pool")?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn execute(cli: Cli) -> Result<(), mvis_core::Error> {
    let (overrides, table) = match &cli.command {
        Command::Run(o) | Command::CheckOptimality(o) => (o, None),
        Command::Tables { which, sizes, overrides } => (overrides, Some((*which, sizes.clone()))),
    };
    let cfg = overrides.resolve()?;
    eprintln!("# resolved configuration\n{}", cfg.to_toml());
    if let Err(e) = init_threads(cfg.run.threads) {
        log::warn!("{e:#}");
    }
    std::fs::create_dir_all(&cfg.run.out)?;

    match cli.command {
        Command::Run(_) => {
            let outcome = mvis_cli::run_experiment(&cfg)?;
            for r in &outcome.reports {
                println!(
                    "{:<10} N={:<8} estimate={:.6e} std_error={:.3e} ess={:.1}",
                    r.algorithm, r.n, r.estimate, r.std_error, r.ess
                );
            }
            if let Some(c) = &outcome.chaos {
                println!(
                    "repeated N={} M={}: mean estimate {:.6} mean std_error {:.5}",
                    c.n, c.repetitions, c.mean_estimate, c.mean_std_error
                );
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
        }
        Command::CheckOptimality(_) => {
            for gap in mvis_cli::check_optimality(&cfg)? {
                println!(
                    "{:?}: L(h) = {:.8} objective = {:.8} gap = {:.3e} relative = {:.3e} certified = {}",
                    gap.scope, gap.l_value, gap.objective_at_h, gap.gap, gap.relative_gap, gap.certified
                );
            }
        }
        Command::Tables { .. } => {
            let (which, sizes) = table.expect("tables command");
            let mut settings = TableSettings {
                seed: cfg.run.seed,
                backend: cfg.run.backend,
                record_timing: cfg.run.record_timing,
                ..TableSettings::default()
            };
            if let Some(s) = sizes {
                settings.sizes = s;
            }
            if overrides.n.is_some() {
                settings.chaos_n = cfg.run.n;
            }
            if overrides.m.is_some() {
                settings.chaos_m = cfg.run.m;
            }
            let output = mvis_cli::reproduce_tables(&cfg, which, &settings)?;
            let path = cfg.run.out.join(format!("{which}.csv"));
            mvis_cli::write_table(which, &output, settings.record_timing, &path)?;
            print!("{}", std::fs::read_to_string(&path)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
