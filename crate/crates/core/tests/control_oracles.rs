use mvis_core::control::*;
use mvis_core::measures::{freeze_measure_path, MeasurePath, WeightedCloud};
use mvis_core::models::{ModelSpec, Payoff};
use mvis_core::sim::{simulate_particles_p, ControlPath, TimeGrid};

const SIGMA: f64 = 0.3;

fn grid(n: usize) -> TimeGrid {
    TimeGrid::new(1.0, n).unwrap()
}

fn dirac_law(n: usize) -> MeasurePath {
    MeasurePath::constant(grid(n), WeightedCloud::dirac(0.0))
}

fn kuramoto_law(n_particles: usize, seed: u64) -> MeasurePath {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    freeze_measure_path(&simulate_particles_p(&model, n_particles, &grid(50), 0.0, seed, Default::default()).unwrap())
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn zero_drift_decoupled_closed_form() {
    let model = ModelSpec::zero_drift(SIGMA).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let x0 = 0.2;
    let sol = solve_bvp_decoupled(&model, &dirac_law(50), &payoff, &grid(50), x0, &BvpOptions::default()).unwrap();
    let b = 10.0;
    assert!(sup_diff(&sol.adjoints[0], &[2.0 * b; 51]) <= 1e-10);
    assert!(sup_diff(sol.control.values(), &[SIGMA * b; 50]) <= 1e-10);
    let x: Vec<f64> = grid(50).times().iter().map(|t| x0 + SIGMA * SIGMA * b * t).collect();
    assert!(sup_diff(&sol.states[0], &x) <= 1e-10);
    assert!(sol.residual_norm <= 1e-8);
    let expected = 2.0 * (0.5f64.ln() + b * (x0 + SIGMA * SIGMA * b)) - (SIGMA * b).powi(2);
    assert!((sol.objective_value - expected).abs() <= 1e-10);
}

#[test]
fn zero_drift_complete_closed_form() {
    let model = ModelSpec::zero_drift(SIGMA).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let sol = solve_bvp_complete(&model, &payoff, 100, &grid(50), 0.0, &BvpOptions::default()).unwrap();
    assert!(sup_diff(&sol.adjoints[0], &[20.0; 51]) <= 1e-10);
    assert!(sup_diff(&sol.adjoints[1], &[0.0; 51]) <= 1e-10);
    assert!(sup_diff(&sol.states[1], &[0.0; 51]) <= 1e-10);
    let x1: Vec<f64> = grid(50).times().iter().map(|t| SIGMA * SIGMA * 10.0 * t).collect();
    assert!(sup_diff(&sol.states[0], &x1) <= 1e-10);
    assert!(sup_diff(sol.control.values(), &[3.0; 50]) <= 1e-10);
    assert!(sol.auxiliary_forcing_sup.unwrap() <= 1e-10);
}

#[test]
fn trivial_trajectories_and_objective() {
    let model = ModelSpec::zero_drift(SIGMA).unwrap();
    let law = dirac_law(20);
    let x = controlled_trajectory(&model, &law, &ControlPath::zeros(20), &grid(20), 0.4).unwrap();
    assert!(x.iter().all(|&v| v == 0.4));
    let x = controlled_trajectory(&model, &law, &ControlPath::constant(20, 2.0), &grid(20), 0.0).unwrap();
    for (k, t) in grid(20).times().iter().enumerate() {
        assert!((x[k] - SIGMA * 2.0 * t).abs() < 1e-12);
    }
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let j = objective_decoupled(&model, &law, &payoff, &ControlPath::zeros(20), &grid(20), 0.1).unwrap();
    assert!((j - (2.0 * 0.5f64.ln() + 2.0 * 10.0 * 0.1)).abs() < 1e-12);
}

#[test]
fn vanishing_payoff_is_reported_as_minus_infinity() {
    let model = ModelSpec::zero_drift(SIGMA).unwrap();
    let payoff = Payoff::constant(0.0).unwrap();
    let j = objective_decoupled(&model, &dirac_law(10), &payoff, &ControlPath::zeros(10), &grid(10), 0.0).unwrap();
    assert_eq!(j, f64::NEG_INFINITY);
}

#[test]
fn trajectory_reproduces_the_solution_state() {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    let law = kuramoto_law(400, 1);
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let sol = solve_bvp_decoupled(&model, &law, &payoff, &grid(50), 0.0, &BvpOptions::default()).unwrap();
    let x = controlled_trajectory(&model, &law, &sol.control, &grid(50), 0.0).unwrap();
    assert!((x[50] - sol.terminal_state()).abs() <= 1e-10);
    let j = objective_decoupled(&model, &law, &payoff, &sol.control, &grid(50), 0.0).unwrap();
    assert!((j - sol.objective_value).abs() <= 1e-12);
}

#[test]
fn complete_objective_is_consistent_with_the_solution() {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let sol = solve_bvp_complete(&model, &payoff, 1000, &grid(50), 0.0, &BvpOptions::default()).unwrap();
    let uhat = sol.auxiliary_control.clone().unwrap();
    let j = objective_complete(&model, &payoff, 1000, &sol.control, &uhat, &grid(50), 0.0).unwrap();
    assert!((j - sol.objective_value).abs() <= 1e-12);
    let (x1, xh) = controlled_trajectory_complete(&model, 1000, &sol.control, &uhat, &grid(50), 0.0).unwrap();
    assert!(sup_diff(&x1, &sol.states[0]) <= 1e-12);
    assert!(sup_diff(&xh, &sol.states[1]) <= 1e-12);
}

/// Largest increase of the objective under single-cell perturbations of size `eps`.
fn worst_single_cell_change(f: &dyn Fn(&ControlPath) -> f64, u: &ControlPath, eps: f64) -> f64 {
    let base = f(u);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..u.len() {
        for s in [eps, -eps] {
            let mut v = u.values().to_vec();
            v[k] += s;
            worst = worst.max(f(&ControlPath::new(v).unwrap()) - base);
        }
    }
    worst
}

fn assert_quadratic_stationarity(f: &dyn Fn(&ControlPath) -> f64, u: &ControlPath) {
    let big = worst_single_cell_change(f, u, 1e-3);
    let small = worst_single_cell_change(f, u, 1e-4);
    // At a strict local maximum every perturbation loses value, so the worst
    // change is negative and shrinks by eps^2.
    assert!(big < 0.0 && small < 0.0, "{big} {small}");
    let ratio = big / small;
    assert!((80.0..=120.0).contains(&ratio), "scaling ratio {ratio}");
}

#[test]
fn decoupled_solutions_are_stationary() {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    let law = kuramoto_law(1000, 42);
    for payoff in [Payoff::exp(0.5, 10.0).unwrap(), Payoff::tanh(15.0, 1.0).unwrap()] {
        let sol = solve_bvp_decoupled(&model, &law, &payoff, &grid(50), 0.0, &BvpOptions::default()).unwrap();
        assert!(sol.residual_norm <= 1e-8);
        let f = |u: &ControlPath| objective_decoupled(&model, &law, &payoff, u, &grid(50), 0.0).unwrap();
        assert_quadratic_stationarity(&f, &sol.control);
    }
}

#[test]
fn complete_solutions_are_stationary() {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let sol = solve_bvp_complete(&model, &payoff, 1000, &grid(50), 0.0, &BvpOptions::default()).unwrap();
    assert!(sol.residual_norm <= 1e-8);
    let uhat = sol.auxiliary_control.clone().unwrap();
    let f = |u: &ControlPath| objective_complete(&model, &payoff, 1000, u, &uhat, &grid(50), 0.0).unwrap();
    assert_quadratic_stationarity(&f, &sol.control);
}

#[test]
fn control_approximates_half_sigma_adjoint() {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    let law = kuramoto_law(1000, 42);
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let sol = solve_bvp_decoupled(&model, &law, &payoff, &grid(50), 0.0, &BvpOptions::default()).unwrap();
    let p = &sol.adjoints[0];
    for (k, h) in sol.control.values().iter().enumerate() {
        let mid = 0.25 * SIGMA * (p[k] + p[k + 1]);
        assert!((h - mid).abs() <= 1e-3 * mid.abs().max(1.0), "cell {k}: {h} vs {mid}");
    }
    let rel = (sol.initial_adjoint[0] - p[0]).abs() / p[0].abs();
    assert!(rel <= 1e-4, "shooting and discrete adjoints differ by {rel:e}");
}

/// Complete controls on `n` cells against those on `2n`, compared at the
/// coarse cell midpoints (fine-grid nodes), where the fine control is
/// interpolated from its two neighbouring cells.
fn refinement_gap(n: usize) -> f64 {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let solve = |n| solve_bvp_complete(&model, &payoff, 1000, &grid(n), 0.0, &BvpOptions::default()).unwrap();
    let coarse = solve(n);
    let fine = solve(2 * n);
    let f = fine.control.values();
    let interp: Vec<f64> = (0..n).map(|k| 0.5 * (f[2 * k] + f[2 * k + 1])).collect();
    sup_diff(coarse.control.values(), &interp)
}

#[test]
fn controls_converge_under_grid_refinement() {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let a = solve_bvp_complete(&model, &payoff, 1000, &grid(50), 0.0, &BvpOptions::default()).unwrap();
    let b = solve_bvp_complete(&model, &payoff, 1000, &grid(400), 0.0, &BvpOptions::default()).unwrap();
    let fine = b.control.values();
    let interp: Vec<f64> = (0..50).map(|k| fine[8 * k..8 * k + 8].iter().sum::<f64>() / 8.0).collect();
    assert!(sup_diff(a.control.values(), &interp) <= 1e-3);

    let (d1, d2) = (refinement_gap(25), refinement_gap(50));
    let order = (d1 / d2).log2();
    assert!(order >= 0.9, "observed order {order} ({d1:e}, {d2:e})");
}

#[test]
fn large_population_leaves_the_bulk_unforced() {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let sol = solve_bvp_complete(&model, &payoff, 1_000_000, &grid(50), 0.0, &BvpOptions::default()).unwrap();
    assert!(sol.auxiliary_forcing_sup.unwrap() <= 1e-6);
}

#[test]
fn saddle_point_has_zero_gap() {
    let model = ModelSpec::zero_drift(SIGMA).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let h = ControlPath::constant(50, SIGMA * 10.0);
    let gap = optimality_check_decoupled(&model, &dirac_law(50), &payoff, &h, &grid(50), 0.0, &CheckOptions::default())
        .unwrap();
    assert!(gap.gap.abs() <= 1e-12, "{gap:?}");
    assert!(gap.certified);
    assert_eq!(gap.scope, CheckScope::Decoupled);
}

#[test]
fn perturbed_control_has_a_larger_gap() {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    let law = kuramoto_law(1000, 42);
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let sol = solve_bvp_decoupled(&model, &law, &payoff, &grid(50), 0.0, &BvpOptions::default()).unwrap();
    let opts = CheckOptions::default();
    let at_opt = optimality_check_decoupled(&model, &law, &payoff, &sol.control, &grid(50), 0.0, &opts).unwrap();
    let off = optimality_check_decoupled(&model, &law, &payoff, &sol.control.shifted(0.5), &grid(50), 0.0, &opts).unwrap();
    assert!(at_opt.certified);
    assert!(off.gap > at_opt.gap);
    assert!(!off.certified);
}

#[test]
fn exchangeable_complete_check() {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let sol = solve_bvp_complete(&model, &payoff, 1000, &grid(50), 0.0, &BvpOptions::default()).unwrap();
    let uhat = sol.auxiliary_control.clone().unwrap();
    let gap =
        optimality_check_complete(&model, &payoff, 1000, &sol.control, &uhat, &grid(50), 0.0, &CheckOptions::default())
            .unwrap();
    assert_eq!(gap.scope, CheckScope::CompleteExchangeable);
    assert!(gap.certified, "{gap:?}");
    assert!((gap.objective_at_h - sol.objective_value).abs() < 1e-12);
}

#[test]
fn solver_errors() {
    let model = ModelSpec::kuramoto(1.0, SIGMA).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    assert!(solve_bvp_complete(&model, &payoff, 1, &grid(50), 0.0, &BvpOptions::default()).is_err());
    assert!(solve_bvp_decoupled(&model, &dirac_law(40), &payoff, &grid(50), 0.0, &BvpOptions::default()).is_err());
    let starved = BvpOptions { max_iterations: 0, ..BvpOptions::default() };
    let err = solve_bvp_decoupled(&model, &kuramoto_law(100, 1), &payoff, &grid(50), 0.0, &starved).unwrap_err();
    assert!(err.is_solver_failure(), "{err}");
}

#[test]
fn solution_serialises_to_json() {
    let model = ModelSpec::zero_drift(SIGMA).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let sol = solve_bvp_complete(&model, &payoff, 10, &grid(10), 0.0, &BvpOptions::default()).unwrap();
    let mut buf = Vec::new();
    sol.write_json(&mut buf).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
    assert_eq!(v["kind"], "complete");
    assert_eq!(v["states"].as_array().unwrap().len(), 2);
    assert_eq!(v["control"]["hdot"].as_array().unwrap().len(), 10);
    assert!(v["residual_norm"].as_f64().unwrap() <= 1e-8);
}
