mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stochastic_contraction::lmi::SolverOptions;
use stochastic_contraction::process::{sample_path, ProcessModel};
use stochastic_contraction::synth::{pendulum_relaxation, synth_controller};
use stochastic_contraction::sysmodel::{simulate, PendulumPlant, SystemModel};
use stochastic_contraction::verify::{estimate_decay, Distance, McSettings};

/// `x ↦ ξ x` with `ξ = 0` with probability `q`, else `ξ = 3/2`.
fn collapsing(q: f64) -> (SystemModel, ProcessModel) {
    let sys = SystemModel::scalar_noise_linear("collapse", DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
    let proc = ProcessModel::sampler(move |rng| if rng.random::<f64>() < q { 0.0 } else { 1.5 }, None);
    (sys, proc)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coincident_states_stay_together(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (sys, proc) = collapsing(0.3);
        let path = sample_path(&proc, 0, 30, None, seed).unwrap();
        let ta = simulate(&sys, &path, &DVector::from_element(1, a)).unwrap();
        let tb = simulate(&sys, &path, &DVector::from_element(1, b)).unwrap();
        let mut met = false;
        for (xa, xb) in ta.states.iter().zip(&tb.states) {
            met |= xa == xb;
            if met {
                prop_assert_eq!(xa, xb);
            }
        }
    }
}

#[test]
fn absorbed_pairs_report_zero_from_first_collapse() {
    let (sys, proc) = collapsing(1.0);
    let pairs = [(DVector::from_element(1, 1.0), DVector::from_element(1, -1.0))];
    let r = estimate_decay(&sys, &proc, &pairs, 2, &Distance::Euclidean, &McSettings::new(20, 200, 3)).unwrap();
    assert_eq!(r.zero_from, Some(1));
    assert_eq!(r.effective_rate(), Some(0.0));
}

#[test]
fn uniform_gain_decays_at_root_of_second_moment() {
    let sys = SystemModel::scalar_noise_linear("gain", DMatrix::zeros(1, 1), DMatrix::identity(1, 1));
    let proc = ProcessModel::uniform(0.0, 1.0).unwrap();
    let pairs = [(DVector::from_element(1, 1.0), DVector::from_element(1, 0.0))];
    let r = estimate_decay(&sys, &proc, &pairs, 2, &Distance::Euclidean, &McSettings::new(12, 4000, 9)).unwrap();
    let fit = r.fit.as_ref().expect("rate fitted");
    let slope = (1.0f64 / 3.0).ln();
    assert!((fit.slope - slope).abs() <= 3.0 * fit.slope_stderr + 1e-3, "slope {} ± {}", fit.slope, fit.slope_stderr);
}

#[test]
fn deterministic_halving_has_exact_rate() {
    let sys = SystemModel::linear("half", DMatrix::from_element(1, 1, 0.5));
    let pairs = [(DVector::from_element(1, 2.0), DVector::from_element(1, 0.5))];
    for order in [1, 2] {
        let r = estimate_decay(&sys, &ProcessModel::constant(0.0), &pairs, order, &Distance::Euclidean, &McSettings::new(30, 100, 1))
            .unwrap();
        assert!((r.rate().unwrap() - 0.5).abs() < 1e-6);
    }
}

#[test]
fn synthesized_pendulum_decays_near_and_away_from_origin() {
    let plant = PendulumPlant::reference();
    let proc = PendulumPlant::noise();
    let d = synth_controller(&plant, &proc.moments().unwrap(), 0.9, &pendulum_relaxation(&plant), &SolverOptions::default())
        .unwrap();
    let sys = plant.closed_loop(&d.gain);
    let v = |x: [f64; 3]| DVector::from_column_slice(&x);
    let pairs = [(v([0.1, 0.0, 0.0]), v([-0.1, 0.05, 0.0])), (v([2.0, 0.0, 0.0]), v([2.2, -0.1, 0.1]))];
    let r = estimate_decay(&sys, &proc, &pairs, 2, &Distance::Euclidean, &McSettings::new(120, 300, 21)).unwrap();
    let rate = r.rate().unwrap();
    assert!(rate <= 0.9f64.sqrt() + 0.02, "rate {rate}");
}

#[test]
fn markov_linear_decay_matches_lifted_spectral_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..2 {
        let (a, t, rho) = common::mjls_instance(&mut rng);
        let sys = SystemModel::markov_linear("mjls", a);
        let proc = ProcessModel::markov(t);
        let pairs = [(DVector::from_column_slice(&[1.0, 0.5]), DVector::zeros(2))];
        let mc = McSettings::new(40, 4000, 5).with_initial_mode(0).with_fit_skip(10);
        let r = estimate_decay(&sys, &proc, &pairs, 2, &Distance::Euclidean, &mc).unwrap();
        let rate2 = r.rate().unwrap().powi(2);
        assert!((rate2 - rho).abs() / rho < 0.1, "rate² {rate2} vs ρ {rho}");
    }
}
