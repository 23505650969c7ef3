//! Configuration, pipelines and table sweeps behind the `mvis` binary.

pub mod config;
pub mod run;
pub mod tables;

pub use config::{AlgorithmChoice, ExperimentConfig};
pub use run::{check_optimality, run_experiment, RunOutcome};
pub use tables::{reproduce_tables, write_table, Table, TableOutput, TableSettings};

use mvis_core::Error;

/// Process exit status for a failed command: 2 for solver failures, 3 for
/// simulation blow-ups, 1 for everything else (configuration, IO).
pub fn exit_code(err: &Error) -> i32 {
    if err.is_solver_failure() {
        2
    } else if err.is_simulation_failure() {
        3
    } else {
        1
    }
}
