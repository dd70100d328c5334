//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if
//! any fails. Runs the shipped presets wherever one exists, so each line
//! corresponds to a single `chaoscope` command.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use chaoscope::autodiff::{grad_check, Scalar, ScalarFn};
use chaoscope::cli::{self, Invocation};
use chaoscope::config::KeyValues;
use chaoscope::dynsys::{system_from_config, System};
use chaoscope::eval::{bootstrap_ci, iqm, noisy_eval, BootstrapConfig, EvalConfig, InitialMode, NoiseConfig};
use chaoscope::lyapunov::{
    classify, reward_mle, sample_state, spectrum_from_states, spectrum_over_samples, tangent_spectrum, SpectrumConfig,
    StabilityClass,
};
use chaoscope::mleg::{reg_loss_and_grad, reg_loss_value, spread_penalty, train, TrainerConfig};
use chaoscope::policy::{OutputMap, PolicyArch, PolicyKind, PolicyParams};
use chaoscope::rng;

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Preset {
    kv: KeyValues,
    sys: System,
    policy: PolicyParams,
}

fn preset(name: &str) -> Preset {
    let kv = KeyValues::load(&presets().join(name)).unwrap();
    let sys = system_from_config(&kv).unwrap();
    let reference = kv.str("policy").unwrap().unwrap_or_else(|| "none".into());
    let policy = cli::resolve_policy(&kv, &sys, &reference).unwrap();
    Preset { kv, sys, policy }
}

impl Preset {
    fn spectrum(&self) -> SpectrumConfig {
        cli::spectrum_config(&self.kv, "", SpectrumConfig::default()).unwrap()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within_time(o: Outcome, elapsed: Duration, limit_s: f64) -> Outcome {
    let ok = elapsed.as_secs_f64() <= limit_s;
    check(
        o.pass && ok,
        format!("{}; {:.2}s (limit {limit_s}s)", o.detail, elapsed.as_secs_f64()),
    )
}

fn c01_logistic() -> Outcome {
    let t = Instant::now();
    let p = preset("logistic.toml");
    let cfg = p.spectrum();
    let s = spectrum_over_samples(&p.sys, &p.policy, &cfg, 0).unwrap();
    let target = 2f64.ln();
    within_time(
        check(
            (s.mle - target).abs() <= 0.01 && cfg.steps == 100_000,
            format!("lambda1 = {:.5} (ln 2 = {target:.5}, T = {})", s.mle, cfg.steps),
        ),
        t.elapsed(),
        5.0,
    )
}

fn c02_henon() -> Outcome {
    let t = Instant::now();
    let p = preset("henon.toml");
    let cfg = p.spectrum();
    let s = spectrum_over_samples(&p.sys, &p.policy, &cfg, 0).unwrap();
    let oracle: Vec<Vec<f64>> = s
        .samples
        .iter()
        .map(|x| {
            tangent_spectrum(&p.sys, &p.policy, &x.initial_state, cfg.steps)
                .unwrap()
                .exponents
        })
        .collect();
    let o: Vec<f64> = (0..2)
        .map(|i| iqm(&oracle.iter().map(|e| e[i]).collect::<Vec<_>>()).unwrap())
        .collect();
    let (l1, l2) = (s.exponents[0], s.exponents[1]);
    let ok = (l1 - 0.419).abs() <= 0.02
        && (l2 + 1.62).abs() <= 0.05
        && (l1 - o[0]).abs() <= 0.02
        && (l2 - o[1]).abs() <= 0.02;
    within_time(
        check(
            ok,
            format!("lambda = ({l1:.4}, {l2:.4}), tangent oracle ({:.4}, {:.4})", o[0], o[1]),
        ),
        t.elapsed(),
        10.0,
    )
}

fn c03_lorenz() -> Outcome {
    let p = preset("lorenz.toml");
    let cfg = p.spectrum();
    let s = spectrum_over_samples(&p.sys, &p.policy, &cfg, 0).unwrap();
    let oracle = tangent_spectrum(&p.sys, &p.policy, &s.samples[0].initial_state, cfg.steps).unwrap();
    let trace = -(10.0 + 1.0 + 8.0 / 3.0);
    let ok = (s.sle - trace).abs() <= 0.3 && (s.mle - 0.906).abs() <= 0.05 && (oracle.mle - 0.906).abs() <= 0.05;
    check(
        ok,
        format!(
            "sle = {:.4} (trace {trace:.4}), lambda1 = {:.4}, tangent oracle lambda1 = {:.4}",
            s.sle, s.mle, oracle.mle
        ),
    )
}

fn c04_pointmass() -> Outcome {
    let t = Instant::now();
    let p = preset("pointmass.toml");
    let s = spectrum_over_samples(&p.sys, &p.policy, &p.spectrum(), 0).unwrap();
    within_time(
        check(
            s.mle.abs() <= 0.01 && s.class == StabilityClass::Stable,
            format!("lambda1 = {:.2e}, class {}", s.mle, s.class),
        ),
        t.elapsed(),
        5.0,
    )
}

fn c05_classifier() -> Outcome {
    let tau0 = 0.005;
    let cases = [
        (classify(-0.5, -1.0, tau0), StabilityClass::Stable),
        (classify(0.0, 0.0, tau0), StabilityClass::Stable),
        (classify(0.4, -1.2, tau0), StabilityClass::Chaotic),
        (classify(0.4, 0.3, tau0), StabilityClass::Unstable),
        (classify(0.4, 0.0, tau0), StabilityClass::Unstable),
        // The threshold itself counts as zero; anything above is positive.
        (classify(tau0, -1.0, tau0), StabilityClass::Stable),
        (classify(tau0 + 1e-12, -1.0, tau0), StabilityClass::Chaotic),
        (classify(tau0 + 1e-12, 1.0, tau0), StabilityClass::Unstable),
    ];
    let bad = cases.iter().filter(|(got, want)| got != want).count();
    check(
        bad == 0,
        format!("{} of {} regime/boundary cases correct", cases.len() - bad, cases.len()),
    )
}

fn c06_reward_mle() -> Outcome {
    let t = Instant::now();
    let lin = preset("linear.toml");
    let cfg = lin.spectrum();
    let r = reward_mle(&lin.sys, &lin.policy, &cfg, 0).unwrap().value;
    let s = spectrum_over_samples(&lin.sys, &lin.policy, &cfg, 0).unwrap().mle;
    let chaos = preset("logistic-control-chaos.toml");
    let rc = reward_mle(&chaos.sys, &chaos.policy, &chaos.spectrum(), 0)
        .unwrap()
        .value;
    within_time(
        check(
            r < 0.0 && (r - s).abs() <= 0.05 && rc > 0.0,
            format!("contracting: reward {r:.4} vs state {s:.4}; chaos-inducing: reward {rc:.4}"),
        ),
        t.elapsed(),
        10.0,
    )
}

fn c07_estimator_robustness() -> Outcome {
    let t = Instant::now();
    let sys = System::henon();
    let p = PolicyParams::no_action(&sys);
    let base = SpectrumConfig {
        steps: 1000,
        period: 10,
        samples: 20,
        epsilon: 1e-4,
        tau0: 0.005,
    };
    let mle = |cfg: SpectrumConfig| spectrum_over_samples(&sys, &p, &cfg, 0).unwrap().mle;
    let spread = |v: &[f64]| {
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    let by_eps: Vec<f64> = [1e-6, 1e-4, 1e-3]
        .iter()
        .map(|&epsilon| mle(SpectrumConfig { epsilon, ..base }))
        .collect();
    let by_period: Vec<f64> = [5, 10, 20]
        .iter()
        .map(|&period| mle(SpectrumConfig { period, ..base }))
        .collect();
    let long = SpectrumConfig { steps: 10_000, ..base };
    let states: Vec<Vec<f64>> = (0..long.samples).map(|i| sample_state(&sys, 0, i)).collect();
    let s = spectrum_from_states(&sys, &p, &long, &states, 0).unwrap();
    let (lo, hi) = s.mle_ci.unwrap();
    let running = iqm(&s
        .samples
        .iter()
        .map(|x| x.spectrum.running_mle(100))
        .collect::<Vec<_>>())
    .unwrap();
    let ok = spread(&by_eps) <= 0.02 && spread(&by_period) <= 0.02 && (lo..=hi).contains(&running);
    within_time(
        check(
            ok,
            format!(
                "eps spread {:.4}, period spread {:.4}, K=100 running {running:.4} in K=1000 CI [{lo:.4}, {hi:.4}]",
                spread(&by_eps),
                spread(&by_period)
            ),
        ),
        t.elapsed(),
        60.0,
    )
}

/// Squared error plus a log-density term of a small Gaussian MLP.
struct MlpLoss {
    arch: PolicyArch,
    inputs: Vec<Vec<f64>>,
    target: Vec<f64>,
}

impl ScalarFn for MlpLoss {
    fn eval<S: Scalar>(&self, theta: &[S]) -> S {
        let mut terms = Vec::new();
        for x in &self.inputs {
            let obs: Vec<S> = x.iter().map(|&v| S::from_f64(v)).collect();
            let out = self.arch.forward(theta, &obs, &[]);
            for (m, &y) in out.mean.iter().zip(&self.target) {
                let d = *m - S::from_f64(y);
                terms.push(d * d);
            }
            let u: Vec<S> = self.target.iter().map(|&v| S::from_f64(v * 0.1)).collect();
            terms.push(-self.arch.log_prob(&out, &u) * S::from_f64(0.01));
        }
        S::sum(&terms)
    }
}

fn c08_autodiff() -> Outcome {
    let t = Instant::now();
    let mut worst_mlp = 0.0_f64;
    for k in 0..50u64 {
        let mut r = rng::seeded(k);
        let arch = PolicyArch {
            kind: PolicyKind::Mlp,
            obs_dim: 3,
            act_dim: 2,
            hidden: vec![5, 4],
            output: OutputMap::Tanh,
            action_low: vec![-1.0, 0.0],
            action_high: vec![1.0, 2.0],
            gaussian: true,
            recurrent: 0,
        };
        let params = PolicyParams::init(arch.clone(), k, -0.5).unwrap();
        let f = MlpLoss {
            arch,
            inputs: (0..3).map(|_| rng::standard_normals(&mut r, 3)).collect(),
            target: vec![0.3, 1.2],
        };
        worst_mlp = worst_mlp.max(grad_check(&f, &params.values, 1e-6).max_rel_error);
    }
    let sys = System::logistic_control();
    let mut worst_bundle = 0.0_f64;
    for (k, recurrent) in [(0u64, 0usize), (1, 0), (2, 3), (3, 3)] {
        for horizon in 1..=5 {
            let arch = PolicyArch {
                recurrent,
                ..PolicyArch::mlp_for(&sys, &[6], true)
            };
            let mut p = PolicyParams::init(arch, k, -1.0).unwrap();
            p.set_mean_action_bias(&[3.0]).unwrap();
            let s0 = [0.3 + 0.1 * k as f64];
            let seeds = [11 + k, 12 + k, 13 + k];
            let (_, ad) = reg_loss_and_grad(&sys, &p, &s0, horizon, &seeds).unwrap();
            let h = 1e-6;
            for (i, &a) in ad.iter().enumerate() {
                let mut q = p.clone();
                q.values[i] += h;
                let up = reg_loss_value(&sys, &q, &s0, horizon, &seeds).unwrap();
                q.values[i] -= 2.0 * h;
                let down = reg_loss_value(&sys, &q, &s0, horizon, &seeds).unwrap();
                let fd = (up - down) / (2.0 * h);
                worst_bundle = worst_bundle.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            }
        }
    }
    within_time(
        check(
            worst_mlp <= 1e-4 && worst_bundle <= 1e-4,
            format!("max rel err: MLP losses {worst_mlp:.2e}, bundle losses {worst_bundle:.2e}"),
        ),
        t.elapsed(),
        30.0,
    )
}

fn c09_regulariser_contract() -> Outcome {
    let sys = System::logistic_control();
    let mut p = PolicyParams::init(PolicyArch::mlp_for(&sys, &[8], true), 4, -1.0).unwrap();
    p.set_mean_action_bias(&[3.5]).unwrap();
    let same = reg_loss_value(&sys, &p, &[0.4], 5, &[7, 7, 7]).unwrap();
    let diff = reg_loss_value(&sys, &p, &[0.4], 5, &[7, 8, 9]).unwrap();
    // Two members, two steps after the shared start, two dimensions:
    // t=1 variances (1, 0) -> mean 0.5; t=2 variances (0, 1) -> mean 0.5.
    let states = vec![
        vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, -1.0]],
        vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![2.0, 1.0]],
    ];
    let hidden = vec![vec![vec![]; 3]; 2];
    let hand = spread_penalty::<f64>(&states, &hidden).unwrap();
    let cfg = TrainerConfig {
        hidden: vec![8],
        value_hidden: vec![8],
        batch: 4,
        updates: 12,
        eval_every: 6,
        beta: 0.0,
        init_mean_action: Some(vec![3.5]),
        spectrum: SpectrumConfig {
            samples: 2,
            steps: 200,
            ..SpectrumConfig::default()
        },
        ..TrainerConfig::default()
    };
    let a = train(&sys, &cfg).unwrap();
    let b = train(
        &sys,
        &TrainerConfig {
            regularizer: false,
            beta: 1.0,
            ..cfg
        },
    )
    .unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let bit_match = bits(&a.policy.values) == bits(&b.policy.values)
        && bits(&a.value.values) == bits(&b.value.values)
        && a.history_csv() == b.history_csv();
    check(
        same == 0.0 && diff > 0.0 && hand == 1.0 && bit_match,
        format!("coincident {same:e}, distinct {diff:.3e}, hand case {hand} (want 1), beta=0 bit-match {bit_match}"),
    )
}

struct Arm {
    mle: f64,
    ret: f64,
    noisy: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c10_benchmark() -> Outcome {
    let t = Instant::now();
    let run = |file: &str, seed: u64| -> Arm {
        let kv = KeyValues::load(&presets().join(file)).unwrap();
        let sys = system_from_config(&kv).unwrap();
        let cfg = cli::trainer_config(&kv, seed).unwrap();
        let result = train(&sys, &cfg).unwrap();
        let spec = SpectrumConfig {
            steps: 1000,
            period: 10,
            samples: 20,
            epsilon: 1e-8,
            tau0: 0.005,
        };
        // Every perturbation collapsing means a superstable loop.
        let mle = spectrum_over_samples(&sys, &result.policy, &spec, 1000 + seed).map_or(f64::NEG_INFINITY, |s| s.mle);
        let ecfg = EvalConfig {
            episodes: 80,
            steps: 200,
            initial: InitialMode::PerEpisode,
            ..EvalConfig::default()
        };
        let eval =
            |noise: &NoiseConfig| iqm(&noisy_eval(&sys, &result.policy, noise, &ecfg, 2000 + seed).unwrap()).unwrap();
        Arm {
            mle,
            ret: eval(&NoiseConfig::none()),
            noisy: eval(&NoiseConfig::gaussian(0.05)),
        }
    };
    let jobs: Vec<(u64, bool)> = (0..5).flat_map(|s| [(s, false), (s, true)]).collect();
    let arms: Vec<Arm> = jobs
        .par_iter()
        .map(|&(seed, reg)| {
            run(
                if reg {
                    "train-logistic-control.toml"
                } else {
                    "train-logistic-control-unreg.toml"
                },
                seed,
            )
        })
        .collect();
    let pairs: Vec<(&Arm, &Arm)> = arms.chunks(2).map(|c| (&c[0], &c[1])).collect();
    let gap = median(pairs.iter().map(|(u, r)| u.mle - r.mle).collect());
    let ret_u = median(pairs.iter().map(|(u, _)| u.ret).collect());
    let ret_r = median(pairs.iter().map(|(_, r)| r.ret).collect());
    let noisy_u = median(pairs.iter().map(|(u, _)| u.noisy).collect());
    let noisy_r = median(pairs.iter().map(|(_, r)| r.noisy).collect());
    let ok = gap >= 0.1 && (ret_r - ret_u).abs() <= 0.1 * ret_u.abs() && noisy_r >= noisy_u;
    within_time(
        check(
            ok,
            format!(
                "median MLE gap {gap:.3} (unreg - reg), return {ret_r:.2} vs {ret_u:.2}, noisy return {noisy_r:.2} vs {noisy_u:.2}"
            ),
        ),
        t.elapsed(),
        900.0,
    )
}

fn c11_statistics() -> Outcome {
    let xs: Vec<f64> = (1..=8).map(f64::from).collect();
    let m = iqm(&xs).unwrap();
    let data: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64).collect();
    let cfg = BootstrapConfig::default();
    let a = bootstrap_ci(&data, cfg, 9).unwrap();
    let b = bootstrap_ci(&data, cfg, 9).unwrap();
    let c = bootstrap_ci(&[2.5; 30], cfg, 9).unwrap();
    check(
        m == 4.5 && a == b && c == (2.5, 2.5),
        format!("iqm(1..8) = {m}, same-seed CI equal {}, constant CI {c:?}", a == b),
    )
}

fn c12_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let train_cfg = tmp.path().join("train.toml");
    let text = std::fs::read_to_string(presets().join("train-logistic-control.toml"))
        .unwrap()
        .replace("updates = 600", "updates = 30")
        .replace("eval_every = 150", "eval_every = 15");
    std::fs::write(&train_cfg, text).unwrap();
    let runs = [
        ("spectrum", presets().join("henon.toml")),
        ("reward-mle", presets().join("linear.toml")),
        ("diverge", presets().join("diverge-henon.toml")),
        ("robustness", presets().join("robustness-logistic-control.toml")),
        ("train", train_cfg),
        ("ablate", presets().join("ablate-henon.toml")),
    ];
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for (command, config) in runs {
        let dirs = [
            tmp.path().join(format!("{command}-a")),
            tmp.path().join(format!("{command}-b")),
        ];
        for d in &dirs {
            let inv = Invocation {
                command: command.into(),
                config: config.clone(),
                seed: Some(7),
                out: d.clone(),
            };
            cli::run_command(&inv).unwrap();
        }
        for entry in std::fs::read_dir(&dirs[0]).unwrap() {
            let name = entry.unwrap().file_name();
            let ext = Path::new(&name).extension().and_then(|e| e.to_str()).unwrap_or("");
            if matches!(ext, "csv" | "json") {
                compared += 1;
                if std::fs::read(dirs[0].join(&name)).unwrap() != std::fs::read(dirs[1].join(&name)).unwrap() {
                    mismatches.push(format!("{command}/{}", name.to_string_lossy()));
                }
            }
        }
    }
    check(
        mismatches.is_empty() && compared >= 12,
        format!("{compared} CSV/JSON files compared across 6 commands, mismatches {mismatches:?}"),
    )
}

fn main() {
    #[allow(clippy::type_complexity)]
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("logistic map lambda1 = ln 2", c01_logistic),
        ("Henon spectrum and tangent oracle", c02_henon),
        ("Lorenz SLE and lambda1", c03_lorenz),
        ("frictionless pointmass is Stable", c04_pointmass),
        ("stability classifier", c05_classifier),
        ("reward-MLE sign consistency", c06_reward_mle),
        ("estimator robustness", c07_estimator_robustness),
        ("autodiff gradients", c08_autodiff),
        ("regulariser contract", c09_regulariser_contract),
        ("regularised training benchmark", c10_benchmark),
        ("IQM and bootstrap", c11_statistics),
        ("CLI reproducibility", c12_reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("{:02}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| id == *p || name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let o = std::panic::catch_unwind(f).unwrap_or_else(|_| check(false, "panicked"));
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {id} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
