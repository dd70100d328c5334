//! The `chaoscope` command line.
//!
//! ```text
//! chaoscope <spectrum|reward-mle|diverge|robustness|train|ablate> --config PATH [--seed N] [--out DIR]
//! ```
//!
//! The output directory defaults to `$CHAOSCOPE_OUT`, then
//! `chaoscope-out`. Exit status is 0 on success, 1 on a numerical
//! failure and 2 on a configuration or input error. Config keys are
//! documented in `docs/config.md`; output schemas in `docs/outputs.md`.

mod commands;
pub mod svg;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::KeyValues;
use crate::dynsys::System;
use crate::error::{Error, Result};
use crate::eval::{BootstrapConfig, EvalConfig, InitialMode};
use crate::lyapunov::SpectrumConfig;
use crate::mleg::TrainerConfig;
use crate::policy::{load_weights, PolicyParams};

pub use commands::{run_command, Report};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "CHAOSCOPE_OUT";

/// A parsed invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invocation {
    pub command: String,
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

#[derive(Debug, Parser)]
#[command(
    name = "chaoscope",
    version,
    about = "Lyapunov diagnostics for closed-loop control systems"
)]
struct Cli {
    #[command(subcommand)]
    command: RawCommand,
}

#[derive(Debug, Subcommand)]
enum RawCommand {
    /// Full Lyapunov spectrum over seeded initial states, with stability class.
    Spectrum(Shared),
    /// Exponent of the reward trajectory under a small state perturbation.
    RewardMle(Shared),
    /// Raw twin-trajectory gap curves.
    Diverge(Shared),
    /// Returns under Gaussian observation noise for one or more policies.
    Robustness(Shared),
    /// Train a policy with the variance regulariser.
    Train(Shared),
    /// Iteration and sample-count sweeps of the spectrum estimator.
    Ablate(Shared),
}

#[derive(Debug, Args)]
struct Shared {
    /// Flat key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config's `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

/// Parse command-line arguments; clap handles `--help` and usage errors
/// (exit status 2) itself.
pub fn parse_args<I, T>(args: I) -> Invocation
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let raw = Cli::parse_from(args);
    let (command, s) = match raw.command {
        RawCommand::Spectrum(s) => ("spectrum", s),
        RawCommand::RewardMle(s) => ("reward-mle", s),
        RawCommand::Diverge(s) => ("diverge", s),
        RawCommand::Robustness(s) => ("robustness", s),
        RawCommand::Train(s) => ("train", s),
        RawCommand::Ablate(s) => ("ablate", s),
    };
    Invocation {
        command: command.to_string(),
        config: s.config,
        seed: s.seed,
        out: s.out.unwrap_or_else(|| PathBuf::from("chaoscope-out")),
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        2
    } else {
        1
    }
}

/// Entry point used by the binary: returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let inv = parse_args(args);
    match run_command(&inv) {
        Ok(report) => {
            for line in &report.summary {
                println!("{line}");
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Resolve a policy reference: `none`, `const:v1,v2,...` or a weight-file
/// path (relative to the config file).
pub fn resolve_policy(kv: &KeyValues, sys: &System, reference: &str) -> Result<PolicyParams> {
    if reference == "none" {
        return Ok(PolicyParams::no_action(sys));
    }
    if let Some(rest) = reference.strip_prefix("const:") {
        let values = rest
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("{}: bad constant policy `{reference}`", kv.origin())))?;
        return PolicyParams::constant(sys, &values).map_err(|e| Error::Config(format!("{reference}: {e}")));
    }
    let path = kv.resolve(reference);
    if !path.exists() {
        return Err(Error::Config(format!(
            "policy weight file not found: {}",
            path.display()
        )));
    }
    let p = load_weights(&path)?;
    if p.arch.obs_dim != sys.state_dim() || p.arch.act_dim != sys.action_dim() {
        return Err(Error::Config(format!(
            "{}: policy expects {} observations and {} actions, system `{}` has {} and {}",
            path.display(),
            p.arch.obs_dim,
            p.arch.act_dim,
            sys.id(),
            sys.state_dim(),
            sys.action_dim()
        )));
    }
    Ok(p)
}

/// Spectrum-estimator keys `steps`, `period`, `samples`, `epsilon`,
/// `tau0`, each with an optional prefix.
pub fn spectrum_config(kv: &KeyValues, prefix: &str, base: SpectrumConfig) -> Result<SpectrumConfig> {
    let k = |name: &str| format!("{prefix}{name}");
    let cfg = SpectrumConfig {
        steps: kv.usize_or(&k("steps"), base.steps)?,
        period: kv.usize_or(&k("period"), base.period)?,
        samples: kv.usize_or(&k("samples"), base.samples)?,
        epsilon: kv.f64_or(&k("epsilon"), base.epsilon)?,
        tau0: kv.f64_or(&k("tau0"), base.tau0)?,
    };
    cfg.validate()
        .map_err(|e| Error::Config(format!("{}: {e}", kv.origin())))?;
    Ok(cfg)
}

/// Evaluation keys `episodes`, `steps`, `initial`, `resamples`, `level`.
pub fn eval_config(kv: &KeyValues) -> Result<EvalConfig> {
    let d = EvalConfig::default();
    let initial = match kv.str("initial")?.as_deref() {
        None | Some("shared") => InitialMode::Shared,
        Some("per-episode") => InitialMode::PerEpisode,
        Some(other) => {
            return Err(Error::Config(format!(
                "{}: `initial` must be shared or per-episode, not `{other}`",
                kv.origin()
            )))
        }
    };
    let bootstrap = BootstrapConfig {
        level: kv.f64_or("level", d.bootstrap.level)?,
        resamples: kv.usize_or("resamples", d.bootstrap.resamples)?,
    };
    if !(bootstrap.level > 0.0 && bootstrap.level < 1.0) || bootstrap.resamples == 0 {
        return Err(Error::Config(format!(
            "{}: need 0 < level < 1 and resamples >= 1",
            kv.origin()
        )));
    }
    let cfg = EvalConfig {
        episodes: kv.usize_or("episodes", d.episodes)?,
        steps: kv.usize_or("steps", d.steps)?,
        initial,
        bootstrap,
    };
    if cfg.episodes == 0 || cfg.steps == 0 {
        return Err(Error::Config(format!(
            "{}: episodes and steps must be >= 1",
            kv.origin()
        )));
    }
    Ok(cfg)
}

/// Trainer keys; the periodic spectrum estimate reads `spectrum_*`.
pub fn trainer_config(kv: &KeyValues, seed: u64) -> Result<TrainerConfig> {
    let d = TrainerConfig::default();
    let cfg = TrainerConfig {
        members: kv.usize_or("members", d.members)?,
        horizon: kv.usize_or("horizon", d.horizon)?,
        gamma: kv.f64_or("gamma", d.gamma)?,
        lambda: kv.f64_or("lambda", d.lambda)?,
        eta: kv.f64_or("eta", d.eta)?,
        beta: kv.f64_or("beta", d.beta)?,
        regularizer: kv.bool_or("regularizer", d.regularizer)?,
        learning_rate: kv.f64_or("learning_rate", d.learning_rate)?,
        value_learning_rate: kv.f64_or("value_learning_rate", d.value_learning_rate)?,
        batch: kv.usize_or("batch", d.batch)?,
        updates: kv.usize_or("updates", d.updates)?,
        eval_every: kv.usize_or("eval_every", d.eval_every)?,
        grad_clip: kv.f64_or("grad_clip", d.grad_clip)?,
        return_scale_decay: kv.f64_or("return_scale_decay", d.return_scale_decay)?,
        hidden: kv.usize_list("hidden")?.unwrap_or(d.hidden),
        value_hidden: kv.usize_list("value_hidden")?.unwrap_or(d.value_hidden),
        recurrent: kv.usize_or("recurrent", d.recurrent)?,
        log_std_init: kv.f64_or("log_std_init", d.log_std_init)?,
        init_mean_action: kv.f64_list("init_mean_action")?,
        spectrum: spectrum_config(kv, "spectrum_", d.spectrum)?,
        seed,
    };
    cfg.validate()
        .map_err(|e| Error::Config(format!("{}: {e}", kv.origin())))?;
    Ok(cfg)
}

/// Master seed: `--seed`, else the config's `seed` key, else 0.
pub fn master_seed(kv: &KeyValues, cli: Option<u64>) -> Result<u64> {
    let from_file = kv.u64("seed")?;
    Ok(cli.or(from_file).unwrap_or(0))
}

/// Quote a CSV field when it contains a separator or quote.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}
