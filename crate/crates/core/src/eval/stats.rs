//! Interquartile mean and percentile bootstrap.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

fn sorted(values: &[f64]) -> Result<Vec<f64>> {
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("statistics input contains NaN".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

fn iqm_sorted(v: &[f64]) -> f64 {
    // Value i owns the rank interval [i, i+1); keep the part of it that
    // falls inside [n/4, 3n/4].
    let n = v.len() as f64;
    let (lo, hi) = (n / 4.0, 3.0 * n / 4.0);
    let mut acc = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let w = ((i + 1) as f64).min(hi) - (i as f64).max(lo);
        if w > 0.0 {
            acc += w * x;
        }
    }
    acc / (hi - lo)
}

/// Mean of the middle 50% by rank, with fractional weights on the two
/// boundary values when `n` is not a multiple of 4.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("iqm of an empty list".into()));
    }
    Ok(iqm_sorted(&sorted(values)?))
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < v.len() {
        v[i] + frac * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}

/// Percentile of unsorted data, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quantile of an empty list".into()));
    }
    Ok(quantile_sorted(&sorted(values)?, q.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BootstrapConfig {
    pub level: f64,
    pub resamples: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            level: 0.95,
            resamples: 2000,
        }
    }
}

/// Percentile-bootstrap interval of the IQM.
///
/// The endpoints are widened, if needed, to contain the point IQM: with
/// very few distinct values the resampled IQMs can sit entirely on one
/// side of it.
pub fn bootstrap_ci(values: &[f64], cfg: BootstrapConfig, seed: u64) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "bootstrap needs at least 2 values, got {}",
            values.len()
        )));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) || cfg.resamples == 0 {
        return Err(Error::InvalidArgument(
            "bootstrap level must lie in (0, 1) with at least one resample".into(),
        ));
    }
    let data = sorted(values)?;
    let point = iqm_sorted(&data);
    let n = data.len();
    let mut r = rng::seeded(seed);
    let mut stats = Vec::with_capacity(cfg.resamples);
    let mut buf = vec![0.0; n];
    for _ in 0..cfg.resamples {
        for slot in buf.iter_mut() {
            *slot = data[r.random_range(0..n)];
        }
        buf.sort_by(f64::total_cmp);
        stats.push(iqm_sorted(&buf));
    }
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - cfg.level;
    let low = quantile_sorted(&stats, alpha / 2.0).min(point);
    let high = quantile_sorted(&stats, 1.0 - alpha / 2.0).max(point);
    Ok((low, high))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iqm_of_one_to_eight() {
        let v: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(iqm(&v).unwrap(), 4.5);
    }

    #[test]
    fn iqm_edge_cases() {
        assert!(iqm(&[]).is_err());
        assert_eq!(iqm(&[2.5; 7]).unwrap(), 2.5);
        assert_eq!(iqm(&[3.0]).unwrap(), 3.0);
        // n = 5: ranks [1.25, 3.75] -> 0.75*b + c + 0.75*d over 2.5
        let v = [10.0, 1.0, 2.0, 3.0, -4.0];
        assert!((iqm(&v).unwrap() - (0.75 * 1.0 + 2.0 + 0.75 * 3.0) / 2.5).abs() < 1e-15);
    }

    #[test]
    fn bootstrap_constant_and_seeded() {
        let c = vec![1.5; 10];
        assert_eq!(bootstrap_ci(&c, BootstrapConfig::default(), 1).unwrap(), (1.5, 1.5));
        let v: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64).collect();
        let a = bootstrap_ci(&v, BootstrapConfig::default(), 9).unwrap();
        assert_eq!(a, bootstrap_ci(&v, BootstrapConfig::default(), 9).unwrap());
        let m = iqm(&v).unwrap();
        assert!(a.0 <= m && m <= a.1);
        assert!(bootstrap_ci(&[1.0], BootstrapConfig::default(), 0).is_err());
    }
}
