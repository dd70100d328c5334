use chaoscope::dynsys::{CartpoleTask, System};
use chaoscope::policy::*;
use proptest::prelude::*;

fn cartpole_policy(seed: u64, recurrent: usize) -> PolicyParams {
    let sys = System::cartpole(CartpoleTask::Swingup);
    let mut arch = PolicyArch::mlp_for(&sys, &[8, 8], true);
    arch.recurrent = recurrent;
    PolicyParams::init(arch, seed, -0.5).unwrap()
}

#[test]
fn log_prob_integrates_to_one() {
    let sys = System::logistic_control();
    let p = PolicyParams::init(PolicyArch::mlp_for(&sys, &[4], true), 7, -1.0).unwrap();
    let out = p.forward(&[0.3], &[]);
    let (z, std) = (out.pre[0], out.log_std[0].exp());
    let n = 20_000;
    let (lo, hi) = (z - 10.0 * std, z + 10.0 * std);
    let du = (hi - lo) / n as f64;
    let mass: f64 = (0..n)
        .map(|i| {
            let u = lo + (i as f64 + 0.5) * du;
            p.arch.log_prob(&out, &[u]).exp() * du
        })
        .sum();
    assert!((mass - 1.0).abs() <= 1e-2, "{mass}");
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let p = cartpole_policy(3, 0);
    let s = [0.1, -0.2, 0.3, 0.0];
    let a = p.sample_action(&s, &[], 11).unwrap();
    assert_eq!(a, p.sample_action(&s, &[], 11).unwrap());
    assert_ne!(a.action, p.sample_action(&s, &[], 12).unwrap().action);
}

#[test]
fn deterministic_policies_cannot_sample() {
    let sys = System::henon();
    assert!(PolicyParams::no_action(&sys)
        .sample_action(&[0.0, 0.0], &[], 0)
        .is_err());
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (i, p) in [cartpole_policy(1, 0), cartpole_policy(2, 3)].iter().enumerate() {
        let path = dir.path().join(format!("p{i}.weights"));
        save_weights(p, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(&back, p);
        save_weights(&back, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }
}

#[test]
fn malformed_weights_name_the_file() {
    let err = parse_weights("not a weight file\n", "bad.weights").unwrap_err();
    assert!(err.to_string().contains("bad.weights"), "{err}");
    let text = write_weights(&cartpole_policy(1, 0));
    let truncated: String = text
        .lines()
        .take(text.lines().count() - 1)
        .collect::<Vec<_>>()
        .join("\n");
    assert!(parse_weights(&truncated, "t.weights").is_err());
}

proptest! {
    #[test]
    fn squashed_actions_stay_in_bounds(
        seed in 0u64..1000,
        s in prop::collection::vec(-50.0..50.0f64, 4),
        noise_seed in 0u64..1000,
    ) {
        let p = cartpole_policy(seed, 0);
        let (lo, hi) = (p.arch.action_low[0], p.arch.action_high[0]);
        let (mean, _, _) = p.act_mean(&s, &[]).unwrap();
        prop_assert!(mean[0] >= lo && mean[0] <= hi);
        let a = p.sample_action(&s, &[], noise_seed).unwrap();
        prop_assert!(a.action[0] >= lo && a.action[0] <= hi);
        prop_assert!(a.log_prob.is_finite());
    }

    #[test]
    fn constant_policy_ignores_the_state(x in -10.0..10.0f64, v in 0.0..4.0f64) {
        let sys = System::logistic_control();
        let p = PolicyParams::constant(&sys, &[v]).unwrap();
        let (a, _, _) = p.act_mean(&[x], &[]).unwrap();
        prop_assert!((a[0] - v).abs() < 1e-12);
    }
}
