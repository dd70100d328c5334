//! Twin-trajectory divergence: raw gap curves and the reward-space
//! exponent.
//!
//! The reward exponent is the least-squares slope of
//! `ln(|r_t - r^_t| + delta)` against time, where `r^` is the reward along
//! a twin trajectory started `epsilon` away in a seeded random direction.
//! The fit window runs from the start until the gap first exceeds 10% of
//! the declared reward range. Inside the window only points with a gap of
//! at least [`GAP_FLOOR`] enter the fit: below it the `delta` offset and
//! rounding dominate, which would flatten the slope of a contracting loop
//! and swamp the signal of a reward that is locally flat. With fewer than
//! two usable points the result is `-inf` ("no measurable divergence").

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_state, sample_state, SpectrumConfig};
use crate::dynsys::System;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rng::{self, Stream};

/// Offset inside the logarithm.
pub const DELTA: f64 = 1e-12;
/// Smallest reward gap that enters the fit.
pub const GAP_FLOOR: f64 = 1e-10;
/// Fraction of the reward range that ends the fit window.
pub const SATURATION_FRACTION: f64 = 0.1;

fn unit_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    loop {
        let v = rng::standard_normals(&mut r, dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Least-squares slope of `y` on `t`.
pub fn fit_slope(t: &[f64], y: &[f64]) -> Option<f64> {
    if t.len() < 2 || t.len() != y.len() {
        return None;
    }
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let sxx: f64 = t.iter().map(|ti| (ti - tm).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = t.iter().zip(y).map(|(ti, yi)| (ti - tm) * (yi - ym)).sum();
    Some(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCurve {
    /// `|s_t - s^_t|` for `t = 0..=T` (shorter if truncated).
    pub state_gap: Vec<f64>,
    /// `|r_t - r^_t|` for `t = 0..T` (shorter if truncated).
    pub reward_gap: Vec<f64>,
    /// Step at which either trajectory became non-finite.
    pub truncated_at: Option<usize>,
}

/// Raw, never renormalised twin-trajectory gaps.
pub fn divergence_curve(
    sys: &System,
    policy: &PolicyParams,
    s0: &[f64],
    epsilon: f64,
    steps: usize,
    seed: u64,
) -> Result<DivergenceCurve> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    check_state(sys, policy, s0)?;
    let u = unit_direction(s0.len(), seed);
    let mut x = s0.to_vec();
    let mut y: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + epsilon * b).collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let mut curve = DivergenceCurve {
        state_gap: vec![dist(&x, &y)],
        reward_gap: Vec::with_capacity(steps),
        truncated_at: None,
    };
    for t in 0..steps {
        let (ax, _, _) = policy.act_mean(&x, &[])?;
        let (ay, _, _) = policy.act_mean(&y, &[])?;
        let (ax, ay) = (sys.clamp_action(&ax), sys.clamp_action(&ay));
        let gap = (sys.reward(&x, &ax) - sys.reward(&y, &ay)).abs();
        let nx = sys.transition(&x, &ax);
        let ny = sys.transition(&y, &ay);
        if !gap.is_finite() || nx.iter().chain(&ny).any(|v| !v.is_finite()) {
            curve.truncated_at = Some(t + 1);
            break;
        }
        curve.reward_gap.push(gap);
        x = nx;
        y = ny;
        curve.state_gap.push(dist(&x, &y));
    }
    Ok(curve)
}

/// Slope of the sample-mean `ln(gap)` against time, fitted from step
/// `start` until the mean first exceeds `ln(saturation)`. Steps where any
/// curve has a zero gap or has been truncated are skipped. Returned per
/// unit time.
pub fn log_slope(curves: &[Vec<f64>], start: usize, saturation: f64, step_duration: f64) -> Option<f64> {
    let len = curves.iter().map(Vec::len).min()?;
    let mut t = Vec::new();
    let mut y = Vec::new();
    for i in start..len {
        if curves.iter().any(|c| !(c[i] > 0.0)) {
            continue;
        }
        let m = curves.iter().map(|c| c[i].ln()).sum::<f64>() / curves.len() as f64;
        if m > saturation.ln() {
            break;
        }
        t.push(i as f64);
        y.push(m);
    }
    fit_slope(&t, &y).map(|s| s / step_duration)
}

/// Reward-space exponent from one initial state; `-inf` when there is no
/// measurable divergence.
pub fn reward_mle_from(
    sys: &System,
    policy: &PolicyParams,
    s0: &[f64],
    cfg: &SpectrumConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let (lo, hi) = sys.reward_bounds();
    let range = hi - lo;
    let curve = divergence_curve(sys, policy, s0, cfg.epsilon, cfg.steps, seed)?;
    if let Some(step) = curve.truncated_at {
        return Err(Error::NonFiniteAt { step });
    }
    let mut t = Vec::new();
    let mut y = Vec::new();
    for (i, &gap) in curve.reward_gap.iter().enumerate() {
        if gap > SATURATION_FRACTION * range {
            break;
        }
        if gap >= GAP_FLOOR {
            t.push(i as f64);
            y.push((gap + DELTA).ln());
        }
    }
    Ok(fit_slope(&t, &y).map_or(f64::NEG_INFINITY, |s| s / sys.step_duration()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMle {
    /// Mean over samples with a measurable divergence; `-inf` if none.
    pub value: f64,
    /// Per-sample estimates (`-inf` for samples without divergence).
    pub per_sample: Vec<f64>,
    pub no_divergence: bool,
}

/// [`reward_mle_from`] averaged over `cfg.samples` seeded initial states.
pub fn reward_mle(sys: &System, policy: &PolicyParams, cfg: &SpectrumConfig, seed: u64) -> Result<RewardMle> {
    cfg.validate()?;
    let per_sample = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let s0 = sample_state(sys, seed, i);
            reward_mle_from(sys, policy, &s0, cfg, rng::derive(seed, Stream::Direction, i as u64))
        })
        .collect::<Result<Vec<f64>>>()?;
    let finite: Vec<f64> = per_sample.iter().copied().filter(|v| v.is_finite()).collect();
    let value = if finite.is_empty() {
        f64::NEG_INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(RewardMle {
        value,
        no_divergence: finite.is_empty(),
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epsilon_gives_zero_curve() {
        let sys = System::henon();
        let p = PolicyParams::no_action(&sys);
        let c = divergence_curve(&sys, &p, &[0.1, 0.0], 0.0, 50, 1).unwrap();
        assert!(c.state_gap.iter().chain(&c.reward_gap).all(|g| *g == 0.0));
        assert_eq!(c.state_gap.len(), 51);
    }

    #[test]
    fn constant_reward_is_sentinel() {
        let sys = System::henon();
        let p = PolicyParams::no_action(&sys);
        let r = reward_mle(
            &sys,
            &p,
            &SpectrumConfig {
                samples: 3,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert!(r.no_divergence);
        assert_eq!(r.value, f64::NEG_INFINITY);
    }

    #[test]
    fn slope_fit() {
        let t = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        assert_eq!(fit_slope(&t, &y), Some(2.0));
        assert_eq!(fit_slope(&[1.0], &[1.0]), None);
    }
}
