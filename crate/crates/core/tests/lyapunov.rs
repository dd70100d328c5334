use chaoscope::dynsys::System;
use chaoscope::lyapunov::*;
use chaoscope::policy::PolicyParams;
use chaoscope::rng::{self, Stream};
use proptest::prelude::*;

fn henon_cfg(steps: usize, samples: usize) -> SpectrumConfig {
    SpectrumConfig {
        steps,
        period: 2,
        samples,
        epsilon: 1e-8,
        tau0: 0.005,
    }
}

#[test]
fn sle_is_the_sum_of_exponents() {
    let sys = System::henon();
    let p = PolicyParams::no_action(&sys);
    let sum = spectrum_over_samples(&sys, &p, &henon_cfg(2000, 6), 1).unwrap();
    for s in &sum.samples {
        assert_eq!(s.spectrum.sle, s.spectrum.exponents.iter().sum::<f64>());
        assert!(s.spectrum.exponents.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(s.spectrum.mle, s.spectrum.exponents[0]);
    }
}

#[test]
fn henon_spectrum_matches_the_tangent_oracle() {
    let sys = System::henon();
    let p = PolicyParams::no_action(&sys);
    let s0 = sample_state(&sys, 3, 0);
    let b = benettin_spectrum(&sys, &p, &s0, &henon_cfg(10_000, 1)).unwrap();
    let t = tangent_spectrum(&sys, &p, &s0, 10_000).unwrap();
    for (x, y) in b.exponents.iter().zip(&t.exponents) {
        assert!((x - y).abs() <= 0.01, "{:?} vs {:?}", b.exponents, t.exponents);
    }
    assert!((b.mle - 0.419).abs() <= 0.02);
    // The Henon map contracts area by b = 0.3 per step.
    assert!((t.sle - 0.3f64.ln()).abs() <= 1e-9, "{}", t.sle);
}

#[test]
fn linear_contraction_has_the_exact_rate() {
    let sys = System::linear(0.8);
    let p = PolicyParams::constant(&sys, &[0.0]).unwrap();
    let cfg = SpectrumConfig {
        steps: 50,
        period: 1,
        samples: 3,
        epsilon: 1e-4,
        tau0: 0.005,
    };
    let sum = spectrum_over_samples(&sys, &p, &cfg, 0).unwrap();
    assert!((sum.mle - 0.8f64.ln()).abs() <= 1e-6, "{}", sum.mle);
    assert_eq!(sum.class, StabilityClass::Stable);
    let t = tangent_spectrum(&sys, &p, &sum.samples[0].initial_state, 50).unwrap();
    assert!((t.mle - 0.8f64.ln()).abs() <= 1e-12);
}

#[test]
fn sample_parallelism_is_deterministic() {
    let sys = System::lorenz();
    let p = PolicyParams::no_action(&sys);
    let cfg = SpectrumConfig {
        steps: 2000,
        period: 10,
        samples: 8,
        epsilon: 1e-8,
        tau0: 0.005,
    };
    let a = spectrum_over_samples(&sys, &p, &cfg, 17).unwrap();
    let b = spectrum_over_samples(&sys, &p, &cfg, 17).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let one_thread = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = one_thread.install(|| spectrum_over_samples(&sys, &p, &cfg, 17).unwrap());
    assert_eq!(a, c);
}

#[test]
fn zero_perturbation_never_diverges() {
    let sys = System::henon();
    let p = PolicyParams::no_action(&sys);
    let c = divergence_curve(&sys, &p, &sample_state(&sys, 0, 0), 0.0, 100, 5).unwrap();
    assert!(c.state_gap.iter().chain(&c.reward_gap).all(|&g| g == 0.0));
    assert_eq!(c.state_gap.len(), 101);
}

#[test]
fn contracting_envelope_does_not_grow() {
    let sys = System::linear(0.8);
    let p = PolicyParams::constant(&sys, &[0.0]).unwrap();
    let c = divergence_curve(&sys, &p, &[0.7], 1e-3, 60, 2).unwrap();
    assert!(c.state_gap.windows(2).all(|w| w[1] <= w[0]), "{:?}", c.state_gap);
}

#[test]
fn henon_early_log_slope_tracks_the_mle() {
    let sys = System::henon();
    let p = PolicyParams::no_action(&sys);
    let curves: Vec<Vec<f64>> = (0..20)
        .map(|i| {
            let s0 = sample_state(&sys, 0, i);
            let seed = rng::derive(0, Stream::Direction, i as u64);
            divergence_curve(&sys, &p, &s0, 1e-8, 60, seed).unwrap().state_gap
        })
        .collect();
    let slope = log_slope(&curves, 0, 1e-3, 1.0).unwrap();
    assert!((slope - 0.419).abs() <= 0.05, "{slope}");
}

#[test]
fn classes_follow_the_signs() {
    assert_eq!(classify(0.005, 1.0, 0.005), StabilityClass::Stable);
    assert_eq!(classify(0.4, -1.2, 0.005), StabilityClass::Chaotic);
    assert_eq!(classify(0.4, 0.0, 0.005), StabilityClass::Unstable);
}

#[test]
fn invalid_configs_are_rejected() {
    let sys = System::henon();
    let p = PolicyParams::no_action(&sys);
    let s0 = [0.0, 0.0];
    for cfg in [
        SpectrumConfig {
            steps: 15,
            period: 2,
            ..Default::default()
        },
        SpectrumConfig {
            epsilon: 0.0,
            ..Default::default()
        },
        SpectrumConfig {
            samples: 0,
            ..Default::default()
        },
    ] {
        assert!(benettin_spectrum(&sys, &p, &s0, &cfg).is_err());
        assert!(spectrum_over_samples(&sys, &p, &cfg, 0).is_err());
    }
}

proptest! {
    #[test]
    fn gram_schmidt_is_orthonormal(
        m in prop::collection::vec(-10.0..10.0f64, 16),
    ) {
        let vs: Vec<Vec<f64>> = m.chunks(4).map(<[f64]>::to_vec).collect();
        let a = nalgebra::DMatrix::from_fn(4, 4, |i, j| vs[j][i]);
        prop_assume!(a.determinant().abs() > 1e-3);
        let (q, r) = gram_schmidt(&vs).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = q[i].iter().zip(&q[j]).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((d - want).abs() <= 1e-10, "<q{},q{}> = {}", i, j, d);
            }
            prop_assert!(r[i] > 0.0);
        }
        // The norms multiply to |det|.
        let prod: f64 = r.iter().product();
        prop_assert!((prod - a.determinant().abs()).abs() <= 1e-8 * prod.max(1.0));
    }
}
