use mvis_core::estimators::{chaos_error_experiment, estimate, mean_and_std_error, Algorithm};
use mvis_core::exec::Backend;
use mvis_core::measures::freeze_measure_path;
use mvis_core::models::{ModelSpec, Payoff};
use mvis_core::sim::{
    simulate_complete_q, simulate_decoupled_q, simulate_particles_p, ControlPath, ParticleEnsemble, SimOptions,
    TimeGrid,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kuramoto() -> ModelSpec {
    ModelSpec::kuramoto(1.0, 0.3).unwrap()
}

fn grid() -> TimeGrid {
    TimeGrid::new(1.0, 50).unwrap()
}

fn seq() -> SimOptions {
    SimOptions::with_backend(Backend::Sequential)
}

fn assert_bit_equal(a: &ParticleEnsemble, b: &ParticleEnsemble) {
    for i in 0..a.n_particles() {
        let pa: Vec<u64> = a.path(i).iter().map(|v| v.to_bits()).collect();
        let pb: Vec<u64> = b.path(i).iter().map(|v| v.to_bits()).collect();
        assert_eq!(pa, pb, "particle {i}");
    }
    let wa: Vec<u64> = a.weights().iter().map(|v| v.to_bits()).collect();
    let wb: Vec<u64> = b.weights().iter().map(|v| v.to_bits()).collect();
    assert_eq!(wa, wb);
}

#[test]
fn backends_agree_bit_for_bit() {
    // More particles than one reduction chunk so the parallel path splits.
    let n = 3000;
    let h = ControlPath::constant(50, 0.8);
    let par = SimOptions::with_backend(Backend::Parallel);
    let p1 = simulate_particles_p(&kuramoto(), n, &grid(), 0.0, 9, seq()).unwrap();
    let p2 = simulate_particles_p(&kuramoto(), n, &grid(), 0.0, 9, par).unwrap();
    assert_bit_equal(&p1, &p2);
    let c1 = simulate_complete_q(&kuramoto(), &h, n, &grid(), 0.0, 9, seq()).unwrap();
    let c2 = simulate_complete_q(&kuramoto(), &h, n, &grid(), 0.0, 9, par).unwrap();
    assert_bit_equal(&c1, &c2);
    let law = freeze_measure_path(&p1);
    let d1 = simulate_decoupled_q(&kuramoto(), &law, &h, n, &grid(), 0.0, 4, seq()).unwrap();
    let d2 = simulate_decoupled_q(&kuramoto(), &law, &h, n, &grid(), 0.0, 4, par).unwrap();
    assert_bit_equal(&d1, &d2);
}

#[cfg(feature = "parallel")]
#[test]
fn thread_count_does_not_change_results() {
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let h = ControlPath::constant(50, 0.5);
            simulate_complete_q(&kuramoto(), &h, 2500, &grid(), 0.0, 17, SimOptions::default()).unwrap()
        })
    };
    assert_bit_equal(&run(1), &run(4));
}

#[test]
fn zero_control_reproduces_plain_simulation() {
    let n = 700;
    let zero = ControlPath::zeros(50);
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let p = simulate_particles_p(&kuramoto(), n, &grid(), 0.0, 5, Default::default()).unwrap();
    let c = simulate_complete_q(&kuramoto(), &zero, n, &grid(), 0.0, 5, Default::default()).unwrap();
    assert_bit_equal(&p, &c);
    assert!(c.weights().iter().all(|&w| w == 1.0));

    // Frozen at its own law, the decoupled system retraces the interacting run.
    let law = freeze_measure_path(&p);
    let d = simulate_decoupled_q(&kuramoto(), &law, &zero, n, &grid(), 0.0, 5, Default::default()).unwrap();
    assert_bit_equal(&p, &d);

    let plain = estimate(&p, &payoff, Algorithm::Mc, Backend::Sequential);
    for e in [&c, &d] {
        let r = estimate(e, &payoff, Algorithm::Complete, Backend::Sequential);
        assert_eq!(r.estimate, plain.estimate);
        assert_eq!(r.std_error, plain.std_error);
        assert_eq!(r.ess, n as f64);
    }
}

fn random_control(rng: &mut ChaCha8Rng) -> ControlPath {
    ControlPath::new((0..50).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn likelihood_weights_have_unit_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let law = freeze_measure_path(&simulate_particles_p(&kuramoto(), 500, &grid(), 0.0, 1, Default::default()).unwrap());
    for trial in 0..10u64 {
        let h = random_control(&mut rng);
        for e in [
            simulate_decoupled_q(&kuramoto(), &law, &h, 20_000, &grid(), 0.0, 100 + trial, Default::default()).unwrap(),
            simulate_complete_q(&kuramoto(), &h, 20_000, &grid(), 0.0, 200 + trial, Default::default()).unwrap(),
        ] {
            let w = e.weights();
            let (mean, se) = mean_and_std_error(Backend::Sequential, w.len(), |i| w[i]);
            assert!((mean - 1.0).abs() <= 3.0 * se, "trial {trial}: {mean} +- {se}");
        }
    }
}

#[test]
fn weights_match_independent_girsanov_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = random_control(&mut rng);
    let dt = grid().dt();
    let law = freeze_measure_path(&simulate_particles_p(&kuramoto(), 50, &grid(), 0.0, 1, Default::default()).unwrap());
    let d = simulate_decoupled_q(&kuramoto(), &law, &h, 200, &grid(), 0.0, 3, Default::default()).unwrap();
    let c = simulate_complete_q(&kuramoto(), &h, 200, &grid(), 0.0, 3, Default::default()).unwrap();
    for e in [&d, &c] {
        for i in 0..e.n_particles() {
            let dw = e.increments(i);
            let log_w: f64 = -dw.iter().zip(h.values()).map(|(w, h)| h * w).sum::<f64>()
                - 0.5 * h.values().iter().map(|h| h * h).sum::<f64>() * dt;
            let w = e.weights()[i];
            assert!((w.ln() - log_w).abs() <= 1e-12 * log_w.abs().max(1.0), "particle {i}");
            assert_eq!(e.weight_at(i, 50), w);
        }
    }
}

#[test]
fn euler_increments_drive_the_states() {
    // X_{k+1} - X_k - sigma dW_k is the drift contribution, which for the
    // zero-drift model vanishes identically.
    let model = ModelSpec::zero_drift(0.3).unwrap();
    let e = simulate_particles_p(&model, 20, &grid(), 0.5, 8, Default::default()).unwrap();
    for i in 0..20 {
        assert_eq!(e.state(i, 0), 0.5);
        for k in 0..50 {
            let resid = e.state(i, k + 1) - e.state(i, k) - 0.3 * e.increments(i)[k];
            assert!(resid.abs() < 1e-14);
        }
    }
}

#[test]
fn ou_terminal_variance_matches_closed_form() {
    let n = 100_000;
    let model = ModelSpec::linear_ou(0.3).unwrap();
    let e = simulate_particles_p(&model, n, &grid(), 0.0, 77, Default::default()).unwrap();
    let x = e.terminal_states();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let exact = 0.09 * (1.0 - (-2.0f64).exp()) / 2.0;
    // Standard error of a Gaussian sample variance plus the Euler bias.
    let se = exact * (2.0 / (n as f64 - 1.0)).sqrt();
    let dt = grid().dt();
    let euler = 0.09 * dt * (1.0 - (1.0 - dt).powi(100)) / (1.0 - (1.0 - dt).powi(2));
    assert!((var - euler).abs() <= 3.0 * se, "{var} vs Euler {euler}");
    assert!((var - exact).abs() <= 3.0 * se + (euler - exact).abs());
}

#[test]
fn mean_field_model_keeps_its_mean() {
    let model = ModelSpec::linear_mean_field(0.3).unwrap();
    let e = simulate_particles_p(&model, 4000, &grid(), 0.25, 13, Default::default()).unwrap();
    for k in [10, 25, 50] {
        let col: Vec<f64> = (0..4000).map(|i| e.state(i, k)).collect();
        let (m, se) = mean_and_std_error(Backend::Sequential, col.len(), |i| col[i]);
        assert!((m - 0.25).abs() <= 4.0 * se);
    }
}

#[test]
fn deterministic_repetitions_have_no_spread() {
    let model = ModelSpec::linear_mean_field(0.0).unwrap();
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let c = chaos_error_experiment(&model, &payoff, 10, 7, &grid(), 0.1, 3, Backend::default()).unwrap();
    assert!(c.estimates.iter().all(|&e| e == payoff.eval(0.1)));
    assert_eq!(c.cross_rep_std, 0.0);
}

#[test]
fn single_repetition_is_a_single_run() {
    let payoff = Payoff::exp(0.5, 10.0).unwrap();
    let c = chaos_error_experiment(&kuramoto(), &payoff, 300, 1, &grid(), 0.0, 21, Backend::default()).unwrap();
    let e = simulate_particles_p(&kuramoto(), 300, &grid(), 0.0, 21, Default::default()).unwrap();
    let r = estimate(&e, &payoff, Algorithm::Mc, Backend::default());
    assert_eq!(c.mean_estimate, r.estimate);
    assert_eq!(c.mean_std_error, r.std_error);
}

#[test]
fn equal_weights_give_full_sample_size() {
    let law = freeze_measure_path(&simulate_particles_p(&kuramoto(), 10, &grid(), 0.0, 1, Default::default()).unwrap());
    let e = simulate_decoupled_q(&kuramoto(), &law, &ControlPath::zeros(50), 64, &grid(), 0.0, 2, Default::default()).unwrap();
    let r = estimate(&e, &Payoff::constant(2.0).unwrap(), Algorithm::Decoupled, Backend::default());
    assert_eq!(r.ess, 64.0);
    assert_eq!(r.estimate, 2.0);
    assert_eq!(r.std_error, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reports_respect_their_bounds(seed in any::<u64>(), scale in 0.0..3.0f64, n in 2usize..300) {
        let h = ControlPath::constant(50, scale);
        let e = simulate_complete_q(&kuramoto(), &h, n, &grid(), 0.0, seed, Default::default()).unwrap();
        let r = estimate(&e, &Payoff::exp(0.5, 10.0).unwrap(), Algorithm::Complete, Backend::default());
        prop_assert!(r.ess >= 1.0 && r.ess <= n as f64);
        prop_assert!(r.std_error >= 0.0);
        prop_assert!(e.weights().iter().all(|&w| w > 0.0));
        prop_assert!((0..n).all(|i| e.state(i, 0) == 0.0));
    }

    #[test]
    fn same_seed_same_paths(seed in any::<u64>()) {
        let a = simulate_particles_p(&kuramoto(), 40, &grid(), 0.0, seed, Default::default()).unwrap();
        let b = simulate_particles_p(&kuramoto(), 40, &grid(), 0.0, seed, Default::default()).unwrap();
        assert_bit_equal(&a, &b);
    }
}
