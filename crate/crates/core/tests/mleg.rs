use chaoscope::dynsys::{CartpoleTask, System};
use chaoscope::lyapunov::SpectrumConfig;
use chaoscope::mleg::*;
use chaoscope::policy::{PolicyArch, PolicyParams};
use proptest::prelude::*;

fn linear_policy(log_std: f64) -> (System, PolicyParams) {
    let sys = System::linear(0.8);
    let p = PolicyParams::init(PolicyArch::mlp_for(&sys, &[4], true), 2, log_std).unwrap();
    (sys, p)
}

#[test]
fn regulariser_shrinks_with_action_noise() {
    let seeds = member_seeds(4, 5);
    let values: Vec<f64> = [0.3f64, 0.1, 0.03]
        .iter()
        .map(|std| {
            let (sys, p) = linear_policy(std.ln());
            reg_loss_value(&sys, &p, &[0.7], 10, &seeds).unwrap()
        })
        .collect();
    assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
    assert!(values[2] > 0.0);
}

#[test]
fn bundles_need_two_members() {
    let (sys, p) = linear_policy(-1.0);
    assert!(reg_loss_value(&sys, &p, &[0.7], 5, &member_seeds(0, 1)).is_err());
    let det = PolicyParams::init(PolicyArch::mlp_for(&sys, &[4], false), 0, 0.0).unwrap();
    assert!(reg_loss_value(&sys, &det, &[0.7], 5, &member_seeds(0, 3)).is_err());
}

#[test]
fn lambda_returns_interpolate_between_td_and_monte_carlo() {
    let r = [1.0, 2.0, 3.0];
    let v = [0.5, 0.25, -1.0, 4.0];
    let mc = lambda_returns(&r, &v, 0.9, 1.0).unwrap();
    assert!((mc[0] - (1.0 + 0.9 * 2.0 + 0.81 * 3.0 + 0.729 * 4.0)).abs() < 1e-12);
    let td = lambda_returns(&r, &v, 0.9, 0.0).unwrap();
    for t in 0..3 {
        assert!((td[t] - (r[t] + 0.9 * v[t + 1])).abs() < 1e-12);
    }
    assert!(lambda_returns(&r, &v[..3], 0.9, 0.5).is_err());
}

#[test]
fn return_scale_never_amplifies() {
    let mut s = ReturnScale::new(0.99);
    s.update(&[0.0, 0.1, 0.2]).unwrap();
    assert_eq!(s.divisor(), 1.0);
    for _ in 0..2000 {
        s.update(&(0..100).map(f64::from).collect::<Vec<_>>()).unwrap();
    }
    assert!((s.divisor() - 89.1).abs() < 0.5, "{}", s.divisor());
}

fn small_config(seed: u64) -> TrainerConfig {
    TrainerConfig {
        members: 3,
        horizon: 8,
        batch: 4,
        updates: 6,
        eval_every: 3,
        hidden: vec![8],
        value_hidden: vec![8],
        log_std_init: -2.0,
        init_mean_action: Some(vec![3.6]),
        spectrum: SpectrumConfig {
            steps: 100,
            period: 10,
            samples: 2,
            epsilon: 1e-8,
            tau0: 0.005,
        },
        seed,
        ..TrainerConfig::default()
    }
}

#[test]
fn training_history_is_reproducible() {
    let sys = System::logistic_control();
    let a = train(&sys, &small_config(5)).unwrap();
    let b = train(&sys, &small_config(5)).unwrap();
    assert_eq!(a.history_csv(), b.history_csv());
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.history.len(), 6);
    assert!(a.history[2].mle.is_some() && a.history[1].mle.is_none());
    assert!(a.history.iter().all(|h| h.reg_loss >= 0.0));
    let c = train(&sys, &small_config(6)).unwrap();
    assert_ne!(a.policy, c.policy);
}

#[test]
fn cartpole_balance_improves() {
    let sys = System::cartpole(CartpoleTask::Balance);
    let cfg = TrainerConfig {
        hidden: vec![32, 32],
        value_hidden: vec![32, 32],
        batch: 8,
        horizon: 20,
        updates: 100,
        eval_every: 0,
        seed: 0,
        ..TrainerConfig::default()
    };
    let res = train(&sys, &cfg).unwrap();
    let r: Vec<f64> = res.history.iter().map(|h| h.return_iqm).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    // Moving averages over 20 updates should trend upwards.
    let (early, late) = (mean(&r[..20]), mean(&r[80..]));
    assert!(late > early, "early {early}, late {late}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn regulariser_is_non_negative(log_std in -4.0..0.5f64, x0 in 0.05..0.95f64, seed in 0u64..100) {
        let sys = System::logistic_control();
        let mut p = PolicyParams::init(PolicyArch::mlp_for(&sys, &[6], true), seed, log_std).unwrap();
        p.set_mean_action_bias(&[3.8]).unwrap();
        let v = reg_loss_value(&sys, &p, &[x0], 6, &member_seeds(seed, 3)).unwrap();
        prop_assert!(v >= 0.0 && v.is_finite());
    }
}
