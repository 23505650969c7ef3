//! Importance sampling for McKean–Vlasov SDEs via decoupling.
//!
//! The crate simulates interacting particle systems with Euler–Maruyama,
//! computes a deterministic drift shift from a small-noise control problem,
//! and estimates `E[G(X_T)]` under plain sampling and under the decoupled
//! and complete measure changes.
//!
//! ```
//! use mvis_core::{estimators, models::{ModelSpec, Payoff}, sim};
//!
//! let model = ModelSpec::kuramoto(1.0, 0.3).unwrap();
//! let payoff = Payoff::exp(0.5, 10.0).unwrap();
//! let grid = sim::TimeGrid::new(1.0, 50).unwrap();
//! let ens = sim::simulate_particles_p(&model, 200, &grid, 0.0, 7, Default::default()).unwrap();
//! let report = estimators::estimate(&ens, &payoff, estimators::Algorithm::Mc, Default::default());
//! assert!(report.estimate > 0.0);
//! ```

pub mod control;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod measures;
pub mod models;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
