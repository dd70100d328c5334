//! Observation-noise robustness evaluation and its statistics.

mod stats;

pub use stats::{bootstrap_ci, iqm, quantile, BootstrapConfig};

pub use crate::dynsys::NoiseConfig;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{rollout, System};
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rng::{self, Stream};

/// Where evaluation episodes start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialMode {
    /// One initial state drawn from the seed and shared by every episode,
    /// so that episodes differ only through observation noise.
    #[default]
    Shared,
    /// A fresh initial state per episode.
    PerEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub steps: usize,
    pub initial: InitialMode,
    pub bootstrap: BootstrapConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 80,
            steps: 1000,
            initial: InitialMode::Shared,
            bootstrap: BootstrapConfig::default(),
        }
    }
}

/// Undiscounted returns of `cfg.episodes` noisy rollouts.
///
/// Episode `e` draws its noise from a seed derived from `(seed, e)` that
/// does not depend on `sigma`, so sweeps use common random numbers.
pub fn noisy_eval(
    sys: &System,
    policy: &PolicyParams,
    noise: &NoiseConfig,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if cfg.steps == 0 || cfg.episodes == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one episode and one step".into(),
        ));
    }
    noise.validate(sys.state_dim())?;
    let shared = sys.sample_initial(rng::derive(seed, Stream::InitialState, 0));
    (0..cfg.episodes)
        .into_par_iter()
        .map(|e| {
            let s0 = match cfg.initial {
                InitialMode::Shared => shared.clone(),
                InitialMode::PerEpisode => sys.sample_initial(rng::derive(seed, Stream::InitialState, e as u64)),
            };
            let traj = rollout(
                sys,
                policy,
                &s0,
                cfg.steps,
                noise,
                rng::derive(seed, Stream::Episode, e as u64),
            )?;
            Ok(traj.total_reward())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEntry {
    pub sigma: f64,
    pub returns: Vec<f64>,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_episodes: usize,
    pub episode_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub entries: Vec<RobustnessEntry>,
}

impl RobustnessReport {
    /// CSV with header `sigma,iqm,ci_low,ci_high,n_episodes`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma,iqm,ci_low,ci_high,n_episodes\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{:?},{:?},{:?},{:?},{}\n",
                e.sigma, e.iqm, e.ci_low, e.ci_high, e.n_episodes
            ));
        }
        out
    }
}

/// Summarise returns as IQM plus bootstrap interval. A single episode
/// gets a zero-width interval.
pub fn summarise(returns: &[f64], bootstrap: BootstrapConfig, seed: u64) -> Result<(f64, f64, f64)> {
    let m = iqm(returns)?;
    let (lo, hi) = if returns.len() >= 2 {
        bootstrap_ci(returns, bootstrap, seed)?
    } else {
        (m, m)
    };
    Ok((m, lo, hi))
}

/// One [`noisy_eval`] per sigma, summarised with IQM and bootstrap CI.
pub fn robustness_sweep(
    sys: &System,
    policy: &PolicyParams,
    sigmas: &[f64],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<RobustnessReport> {
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be finite and >= 0, got {s}"
        )));
    }
    let entries = sigmas
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let returns = noisy_eval(sys, policy, &NoiseConfig::gaussian(sigma), cfg, seed)?;
            let (m, lo, hi) = summarise(&returns, cfg.bootstrap, rng::derive(seed, Stream::Bootstrap, i as u64))?;
            Ok(RobustnessEntry {
                sigma,
                n_episodes: returns.len(),
                returns,
                iqm: m,
                ci_low: lo,
                ci_high: hi,
                episode_length: cfg.steps,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RobustnessReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silent_noise_gives_identical_returns() {
        let sys = System::linear(0.8);
        let p = PolicyParams::constant(&sys, &[0.1]).unwrap();
        let cfg = EvalConfig {
            episodes: 5,
            steps: 50,
            ..EvalConfig::default()
        };
        let r = noisy_eval(&sys, &p, &NoiseConfig::none(), &cfg, 3).unwrap();
        assert!(r.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn sweep_has_one_row_per_sigma() {
        let sys = System::logistic_control();
        let p = PolicyParams::constant(&sys, &[2.5]).unwrap();
        let cfg = EvalConfig {
            episodes: 4,
            steps: 20,
            ..EvalConfig::default()
        };
        let rep = robustness_sweep(&sys, &p, &[0.0, 0.1, 0.2], &cfg, 1).unwrap();
        assert_eq!(rep.entries.len(), 3);
        assert_eq!(rep.to_csv().lines().count(), 4);
        for e in &rep.entries {
            assert!(e.ci_low <= e.iqm && e.iqm <= e.ci_high);
        }
        assert!(robustness_sweep(&sys, &p, &[-1.0], &cfg, 1).is_err());
    }
}
