//! Lyapunov spectra of closed-loop systems.
//!
//! The primary estimator follows a nominal trajectory together with one
//! companion per state dimension, initially offset by `epsilon` along the
//! coordinate axes. Every `period` steps the companion offsets are
//! Gram-Schmidt orthonormalised and rescaled back to `epsilon`; the
//! logarithms of the pre-normalisation lengths are averaged into the
//! exponents. Stochastic policies are evaluated at their mean action.
//!
//! [`tangent_spectrum`] is an independent check that propagates the
//! linearised dynamics with autodiff Jacobians and a QR factorisation.

mod reward;

pub use reward::{divergence_curve, log_slope, reward_mle, reward_mle_from, DivergenceCurve, RewardMle};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynsys::{closed_loop_jacobian, closed_loop_step, System};
use crate::error::{Error, Result};
use crate::eval::{bootstrap_ci, iqm, BootstrapConfig};
use crate::policy::PolicyParams;
use crate::rng::{self, Stream};

/// Norm below which a perturbation set is treated as rank deficient.
pub const DEGENERATE_NORM: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumConfig {
    /// Total steps `T`; must be a multiple of `period`.
    pub steps: usize,
    /// Renormalisation period `tau`.
    pub period: usize,
    pub samples: usize,
    pub epsilon: f64,
    /// MLE at or below this counts as zero when classifying.
    pub tau0: f64,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        SpectrumConfig {
            steps: 1000,
            period: 10,
            samples: 20,
            epsilon: 1e-4,
            tau0: 0.005,
        }
    }
}

impl SpectrumConfig {
    /// Number of renormalisation windows `K = T / tau`.
    pub fn iterations(&self) -> usize {
        self.steps / self.period.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.period == 0 || self.steps == 0 || self.samples == 0 {
            return Err(Error::InvalidArgument(
                "steps, period and samples must all be >= 1".into(),
            ));
        }
        if !self.steps.is_multiple_of(self.period) {
            return Err(Error::InvalidArgument(format!(
                "steps ({}) must be a multiple of the period ({})",
                self.steps, self.period
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !self.tau0.is_finite() {
            return Err(Error::InvalidArgument("tau0 must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSpectrum {
    /// Sorted descending; per step for maps, per unit time for flows.
    pub exponents: Vec<f64>,
    pub mle: f64,
    pub sle: f64,
    /// `ln(norm_i / epsilon)` per window, in Gram-Schmidt order.
    pub window_logs: Vec<Vec<f64>>,
    /// Time represented by one step (1 for maps, `dt` for flows).
    pub step_duration: f64,
    pub period: usize,
}

impl LyapunovSpectrum {
    fn from_logs(window_logs: Vec<Vec<f64>>, period: usize, step_duration: f64) -> Self {
        let n = window_logs.first().map_or(0, Vec::len);
        let scale = 1.0 / (window_logs.len() * period) as f64 / step_duration;
        let mut exponents: Vec<f64> = (0..n)
            .map(|i| window_logs.iter().map(|w| w[i]).sum::<f64>() * scale)
            .collect();
        exponents.sort_by(|a, b| b.total_cmp(a));
        let sle = exponents.iter().sum();
        LyapunovSpectrum {
            mle: exponents.first().copied().unwrap_or(0.0),
            sle,
            exponents,
            window_logs,
            step_duration,
            period,
        }
    }

    /// Largest exponent estimated from the first `k` windows only.
    pub fn running_mle(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.window_logs.len());
        let n = self.exponents.len();
        let scale = 1.0 / (k * self.period) as f64 / self.step_duration;
        (0..n)
            .map(|i| self.window_logs[..k].iter().map(|w| w[i]).sum::<f64>() * scale)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Classical Gram-Schmidt with one re-orthogonalisation pass.
///
/// Returns the orthonormal vectors and the lengths of the orthogonalised
/// vectors before normalisation.
pub fn gram_schmidt(vectors: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let dim = vectors.first().map_or(0, Vec::len);
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::Dimension {
            what: "perturbation vector",
            expected: dim,
            found: v.len(),
        });
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    let mut norms = Vec::with_capacity(vectors.len());
    for (index, v) in vectors.iter().enumerate() {
        let mut w = v.clone();
        for _ in 0..2 {
            let coeffs: Vec<f64> = basis.iter().map(|q| dot(q, &w)).collect();
            for (q, c) in basis.iter().zip(coeffs) {
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        let norm = dot(&w, &w).sqrt();
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::DegeneratePerturbation { index, norm });
        }
        w.iter_mut().for_each(|x| *x /= norm);
        basis.push(w);
        norms.push(norm);
    }
    Ok((basis, norms))
}

fn require_memoryless(policy: &PolicyParams) -> Result<()> {
    if policy.hidden_dim() > 0 {
        return Err(Error::InvalidArgument(
            "spectrum estimation needs a memoryless policy".into(),
        ));
    }
    Ok(())
}

fn check_state(sys: &System, policy: &PolicyParams, s0: &[f64]) -> Result<()> {
    require_memoryless(policy)?;
    if s0.len() != sys.state_dim() {
        return Err(Error::Dimension {
            what: "initial state",
            expected: sys.state_dim(),
            found: s0.len(),
        });
    }
    if policy.arch.obs_dim != sys.state_dim() || policy.arch.act_dim != sys.action_dim() {
        return Err(Error::Dimension {
            what: "policy",
            expected: sys.state_dim(),
            found: policy.arch.obs_dim,
        });
    }
    if s0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteAt { step: 0 });
    }
    Ok(())
}

/// Companion-trajectory spectrum estimate from a single initial state.
pub fn benettin_spectrum(
    sys: &System,
    policy: &PolicyParams,
    s0: &[f64],
    cfg: &SpectrumConfig,
) -> Result<LyapunovSpectrum> {
    cfg.validate()?;
    check_state(sys, policy, s0)?;
    let n = s0.len();
    let eps = cfg.epsilon;
    let mut x = s0.to_vec();
    let mut companions: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut y = x.clone();
            y[i] += eps;
            y
        })
        .collect();
    let mut logs = Vec::with_capacity(cfg.iterations());
    let mut step = 0;
    for _ in 0..cfg.iterations() {
        for _ in 0..cfg.period {
            step += 1;
            x = closed_loop_step(sys, policy, &x)?;
            for y in companions.iter_mut() {
                *y = closed_loop_step(sys, policy, y)?;
            }
            if x.iter().chain(companions.iter().flatten()).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteAt { step });
            }
        }
        let offsets: Vec<Vec<f64>> = companions
            .iter()
            .map(|y| y.iter().zip(&x).map(|(a, b)| a - b).collect())
            .collect();
        let (basis, norms) = gram_schmidt(&offsets)?;
        logs.push(norms.iter().map(|&r| (r / eps).ln()).collect());
        for (y, q) in companions.iter_mut().zip(&basis) {
            *y = x.iter().zip(q).map(|(xi, qi)| xi + eps * qi).collect();
        }
    }
    Ok(LyapunovSpectrum::from_logs(logs, cfg.period, sys.step_duration()))
}

/// Spectrum of the linearised closed loop by repeated QR of
/// `J_t Q_{t-1}`, re-factorising every step.
pub fn tangent_spectrum(sys: &System, policy: &PolicyParams, s0: &[f64], steps: usize) -> Result<LyapunovSpectrum> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "tangent spectrum needs at least one step".into(),
        ));
    }
    check_state(sys, policy, s0)?;
    let n = s0.len();
    let mut x = s0.to_vec();
    let mut q = DMatrix::<f64>::identity(n, n);
    let mut logs = Vec::with_capacity(steps);
    for step in 1..=steps {
        let j = closed_loop_jacobian(sys, policy, &x)?;
        x = closed_loop_step(sys, policy, &x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteAt { step });
        }
        let qr = (j * &q).qr();
        let r = qr.r();
        let mut qm = qr.q();
        let mut row = Vec::with_capacity(n);
        for i in 0..n {
            let d = r[(i, i)];
            if d.abs() < DEGENERATE_NORM {
                return Err(Error::DegeneratePerturbation {
                    index: i,
                    norm: d.abs(),
                });
            }
            if d < 0.0 {
                qm.column_mut(i).neg_mut();
            }
            row.push(d.abs().ln());
        }
        q = qm;
        logs.push(row);
    }
    Ok(LyapunovSpectrum::from_logs(logs, 1, sys.step_duration()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StabilityClass {
    Stable,
    Chaotic,
    Unstable,
}

impl std::fmt::Display for StabilityClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StabilityClass::Stable => "Stable",
            StabilityClass::Chaotic => "Chaotic",
            StabilityClass::Unstable => "Unstable",
        })
    }
}

/// Sign-based classes: `mle <= tau0` is Stable (the boundary itself
/// included); otherwise Chaotic when `sle < 0` and Unstable when
/// `sle >= 0`.
pub fn classify(mle: f64, sle: f64, tau0: f64) -> StabilityClass {
    if mle <= tau0 {
        StabilityClass::Stable
    } else if sle < 0.0 {
        StabilityClass::Chaotic
    } else {
        StabilityClass::Unstable
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpectrum {
    pub index: usize,
    pub initial_state: Vec<f64>,
    pub spectrum: LyapunovSpectrum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedSample {
    pub index: usize,
    pub initial_state: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub samples: Vec<SampleSpectrum>,
    pub excluded: Vec<ExcludedSample>,
    /// Per-exponent IQM across samples.
    pub exponents: Vec<f64>,
    pub mle: f64,
    pub sle: f64,
    /// Bootstrap intervals, absent with fewer than two usable samples.
    pub mle_ci: Option<(f64, f64)>,
    pub sle_ci: Option<(f64, f64)>,
    pub class: StabilityClass,
}

impl SpectrumSummary {
    pub fn warnings(&self) -> Vec<String> {
        self.excluded
            .iter()
            .map(|e| format!("sample {} excluded: {}", e.index, e.reason))
            .collect()
    }
}

/// Initial state of sample `i` for a master seed.
pub fn sample_state(sys: &System, seed: u64, i: usize) -> Vec<f64> {
    sys.sample_initial(rng::derive(seed, Stream::InitialState, i as u64))
}

/// Spectra from `cfg.samples` seeded initial states, aggregated by IQM.
///
/// Samples whose estimate fails (blow-up, degenerate perturbations) are
/// listed in `excluded` with the reason; if none survive, the first
/// sample's error is returned.
pub fn spectrum_over_samples(
    sys: &System,
    policy: &PolicyParams,
    cfg: &SpectrumConfig,
    seed: u64,
) -> Result<SpectrumSummary> {
    let states: Vec<Vec<f64>> = (0..cfg.samples).map(|i| sample_state(sys, seed, i)).collect();
    spectrum_from_states(sys, policy, cfg, &states, seed)
}

/// As [`spectrum_over_samples`] with explicit initial states.
pub fn spectrum_from_states(
    sys: &System,
    policy: &PolicyParams,
    cfg: &SpectrumConfig,
    states: &[Vec<f64>],
    seed: u64,
) -> Result<SpectrumSummary> {
    cfg.validate()?;
    require_memoryless(policy)?;
    if states.is_empty() {
        return Err(Error::InvalidArgument("no initial states".into()));
    }
    let results: Vec<Result<LyapunovSpectrum>> = states
        .par_iter()
        .map(|s0| benettin_spectrum(sys, policy, s0, cfg))
        .collect();
    let mut samples = Vec::new();
    let mut excluded = Vec::new();
    let mut first_error = None;
    for (index, (res, s0)) in results.into_iter().zip(states).enumerate() {
        match res {
            Ok(spectrum) => samples.push(SampleSpectrum {
                index,
                initial_state: s0.clone(),
                spectrum,
            }),
            // Configuration problems are not per-sample failures.
            Err(e) if e.is_config() => return Err(e),
            Err(e) => {
                excluded.push(ExcludedSample {
                    index,
                    initial_state: s0.clone(),
                    reason: e.to_string(),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if let (true, Some(e)) = (samples.is_empty(), first_error) {
        // Nothing to aggregate: surface the first failure as is.
        return Err(e);
    }
    let n = samples[0].spectrum.exponents.len();
    let exponents = (0..n)
        .map(|i| iqm(&samples.iter().map(|s| s.spectrum.exponents[i]).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let mles: Vec<f64> = samples.iter().map(|s| s.spectrum.mle).collect();
    let sles: Vec<f64> = samples.iter().map(|s| s.spectrum.sle).collect();
    let mle = iqm(&mles)?;
    let sle = iqm(&sles)?;
    let ci = |v: &[f64], idx: u64| -> Result<Option<(f64, f64)>> {
        if v.len() < 2 {
            return Ok(None);
        }
        bootstrap_ci(v, BootstrapConfig::default(), rng::derive(seed, Stream::Bootstrap, idx)).map(Some)
    };
    Ok(SpectrumSummary {
        mle_ci: ci(&mles, 0)?,
        sle_ci: ci(&sles, 1)?,
        class: classify(mle, sle, cfg.tau0),
        samples,
        excluded,
        exponents,
        mle,
        sle,
    })
}
