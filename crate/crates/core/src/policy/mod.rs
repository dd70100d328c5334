//! Parameterised feedback policies.
//!
//! A policy is an architecture description plus one flat parameter
//! vector. The forward pass is generic over [`Scalar`] so the same code
//! serves evaluation, closed-loop Jacobians and training.
//!
//! Parameter layout, in order:
//! 1. recurrent block (only if `recurrent > 0`): `rec.wh` (H x H),
//!    `rec.ws` (H x obs), `rec.b` (H). The cell is
//!    `h' = tanh(W_h h + W_s s + b)` and the network then reads `[s, h']`.
//! 2. hidden layers `l{i}.w` (out x in, row-major) and `l{i}.b`, tanh.
//! 3. output layer `out.w`, `out.b`.
//! 4. `log_std` (act_dim) for Gaussian policies, clamped to
//!    `[LOG_STD_MIN, LOG_STD_MAX]`.
//!
//! With `output = tanh` the pre-activation `z` is squashed onto the
//! action box as `low + (high - low) (tanh z + 1) / 2`. Gaussian policies
//! sample `u = z + std * eps` and report the log-density of `u` under the
//! pre-squash Gaussian.

mod io;

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{affine, Scalar};
use crate::dynsys::System;
use crate::error::{Error, Result};
use crate::rng;

pub use io::{load_weights, parse_weights, save_weights, write_weights};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// `0.5 * ln(2 pi e)`, the entropy of a unit normal.
pub const UNIT_NORMAL_ENTROPY: f64 = 1.418_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Always outputs the zero action.
    NoAction,
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMap {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub kind: PolicyKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Hidden layer widths (empty for linear policies).
    pub hidden: Vec<usize>,
    pub output: OutputMap,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub gaussian: bool,
    /// Hidden-state size of the Elman cell, 0 if memoryless.
    pub recurrent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PolicyArch {
    /// Default MLP for a system: two tanh layers of 64, tanh-squashed
    /// Gaussian output.
    pub fn mlp_for(sys: &System, hidden: &[usize], gaussian: bool) -> Self {
        PolicyArch {
            kind: PolicyKind::Mlp,
            obs_dim: sys.state_dim(),
            act_dim: sys.action_dim(),
            hidden: hidden.to_vec(),
            output: OutputMap::Tanh,
            action_low: sys.action_low.clone(),
            action_high: sys.action_high.clone(),
            gaussian,
            recurrent: 0,
        }
    }

    fn net_input(&self) -> usize {
        self.obs_dim + self.recurrent
    }

    pub fn tensors(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        if self.kind == PolicyKind::NoAction {
            return out;
        }
        let h = self.recurrent;
        if h > 0 {
            out.push(TensorSpec::new("rec.wh", &[h, h]));
            out.push(TensorSpec::new("rec.ws", &[h, self.obs_dim]));
            out.push(TensorSpec::new("rec.b", &[h]));
        }
        let mut width = self.net_input();
        if self.kind == PolicyKind::Mlp {
            for (i, &w) in self.hidden.iter().enumerate() {
                out.push(TensorSpec::new(format!("l{i}.w"), &[w, width]));
                out.push(TensorSpec::new(format!("l{i}.b"), &[w]));
                width = w;
            }
        }
        out.push(TensorSpec::new("out.w", &[self.act_dim, width]));
        out.push(TensorSpec::new("out.b", &[self.act_dim]));
        if self.gaussian {
            out.push(TensorSpec::new("log_std", &[self.act_dim]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(TensorSpec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PolicyKind::NoAction && (self.gaussian || self.recurrent > 0) {
            return Err(Error::InvalidArgument(
                "no-action policies are deterministic and memoryless".into(),
            ));
        }
        if self.kind == PolicyKind::Linear && !self.hidden.is_empty() {
            return Err(Error::InvalidArgument("linear policies have no hidden layers".into()));
        }
        if self.output == OutputMap::Tanh
            && (self.action_low.len() != self.act_dim || self.action_high.len() != self.act_dim)
        {
            return Err(Error::Dimension {
                what: "action bounds",
                expected: self.act_dim,
                found: self.action_low.len().min(self.action_high.len()),
            });
        }
        Ok(())
    }

    fn squash<S: Scalar>(&self, z: &[S]) -> Vec<S> {
        match self.output {
            OutputMap::Identity => z.to_vec(),
            OutputMap::Tanh => z
                .iter()
                .zip(self.action_low.iter().zip(&self.action_high))
                .map(|(&zi, (&lo, &hi))| (zi.tanh() + 1.0) * (0.5 * (hi - lo)) + lo)
                .collect(),
        }
    }

    /// Generic forward pass with the parameters supplied as scalars.
    pub fn forward<S: Scalar>(&self, theta: &[S], obs: &[S], hidden: &[S]) -> Output<S> {
        if self.kind == PolicyKind::NoAction {
            let zero = vec![S::from_f64(0.0); self.act_dim];
            return Output {
                pre: zero.clone(),
                mean: zero,
                log_std: vec![],
                hidden: vec![],
            };
        }
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &theta[off..off + n];
            off += n;
            s
        };
        let mut x: Vec<S> = obs.to_vec();
        let mut next_hidden = Vec::new();
        let h = self.recurrent;
        if h > 0 {
            let wh = take(h * h);
            let ws = take(h * self.obs_dim);
            let b = take(h);
            let a = affine(wh, b, hidden);
            let s = affine(ws, &vec![S::from_f64(0.0); h], obs);
            next_hidden = a.iter().zip(&s).map(|(&p, &q)| (p + q).tanh()).collect();
            x.extend_from_slice(&next_hidden);
        }
        if self.kind == PolicyKind::Mlp {
            for &w in &self.hidden {
                let weights = take(w * x.len());
                let bias = take(w);
                x = affine(weights, bias, &x).into_iter().map(Scalar::tanh).collect();
            }
        }
        let weights = take(self.act_dim * x.len());
        let bias = take(self.act_dim);
        let pre = affine(weights, bias, &x);
        let log_std = if self.gaussian {
            take(self.act_dim)
                .iter()
                .map(|&l| l.clamp(LOG_STD_MIN, LOG_STD_MAX))
                .collect()
        } else {
            vec![]
        };
        let mean = self.squash(&pre);
        Output {
            pre,
            mean,
            log_std,
            hidden: next_hidden,
        }
    }

    /// Log-density of the pre-squash sample `u` given the forward output.
    pub fn log_prob<S: Scalar>(&self, out: &Output<S>, u: &[S]) -> S {
        let terms: Vec<S> = out
            .pre
            .iter()
            .zip(&out.log_std)
            .zip(u)
            .map(|((&z, &ls), &ui)| {
                let std = ls.exp();
                -((ui - z) / std).square() * 0.5 - ls - 0.5 * (2.0 * PI).ln()
            })
            .collect();
        S::sum(&terms)
    }

    /// Differential entropy of the pre-squash Gaussian.
    pub fn entropy<S: Scalar>(&self, out: &Output<S>) -> S {
        let terms: Vec<S> = out.log_std.iter().map(|&ls| ls + UNIT_NORMAL_ENTROPY).collect();
        S::sum(&terms)
    }

    /// Reparameterised draw from unit-normal noise `eps`.
    pub fn sample_with<S: Scalar>(&self, out: &Output<S>, eps: &[f64]) -> (Vec<S>, Vec<S>) {
        let u: Vec<S> = out
            .pre
            .iter()
            .zip(&out.log_std)
            .zip(eps)
            .map(|((&z, &ls), &e)| z + ls.exp() * e)
            .collect();
        let a = self.squash(&u);
        (u, a)
    }
}

/// Forward-pass results.
#[derive(Debug, Clone)]
pub struct Output<S> {
    /// Pre-squash mean `z`.
    pub pre: Vec<S>,
    /// Mean action after squashing.
    pub mean: Vec<S>,
    pub log_std: Vec<S>,
    /// Next hidden state (empty for memoryless policies).
    pub hidden: Vec<S>,
}

/// A reparameterised action draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    pub action: Vec<f64>,
    pub pre_squash: Vec<f64>,
    pub log_prob: f64,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: PolicyArch,
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn new(arch: PolicyArch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let expected = arch.param_count();
        if values.len() != expected {
            return Err(Error::ParamCount {
                expected,
                found: values.len(),
            });
        }
        let mut p = PolicyParams { arch, values };
        p.clamp_log_std();
        Ok(p)
    }

    pub fn no_action(sys: &System) -> Self {
        PolicyParams {
            arch: PolicyArch {
                kind: PolicyKind::NoAction,
                obs_dim: sys.state_dim(),
                act_dim: sys.action_dim(),
                hidden: vec![],
                output: OutputMap::Identity,
                action_low: sys.action_low.clone(),
                action_high: sys.action_high.clone(),
                gaussian: false,
                recurrent: 0,
            },
            values: vec![],
        }
    }

    /// Linear policy with zero gain, i.e. the constant action `values`.
    pub fn constant(sys: &System, action: &[f64]) -> Result<Self> {
        if action.len() != sys.action_dim() {
            return Err(Error::Dimension {
                what: "constant action",
                expected: sys.action_dim(),
                found: action.len(),
            });
        }
        let arch = PolicyArch {
            kind: PolicyKind::Linear,
            obs_dim: sys.state_dim(),
            act_dim: sys.action_dim(),
            hidden: vec![],
            output: OutputMap::Identity,
            action_low: sys.action_low.clone(),
            action_high: sys.action_high.clone(),
            gaussian: false,
            recurrent: 0,
        };
        let mut values = vec![0.0; arch.act_dim * arch.obs_dim];
        values.extend_from_slice(action);
        PolicyParams::new(arch, values)
    }

    /// Random initialisation: uniform `+-1/sqrt(fan_in)` for hidden layers,
    /// scaled by 0.1 on the output layer, zero biases, and `log_std_init`
    /// on every log-std.
    pub fn init(arch: PolicyArch, seed: u64, log_std_init: f64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::seeded(seed);
        let mut values = Vec::with_capacity(arch.param_count());
        for t in arch.tensors() {
            match t.shape.as_slice() {
                _ if t.name == "log_std" => values.extend(std::iter::repeat_n(log_std_init, t.len())),
                [_] => values.extend(std::iter::repeat_n(0.0, t.len())),
                [_, fan_in] => {
                    let bound = 1.0 / (*fan_in as f64).sqrt();
                    let gain = if t.name == "out.w" { 0.1 } else { 1.0 };
                    values.extend((0..t.len()).map(|_| gain * r.random_range(-bound..bound)));
                }
                _ => unreachable!("tensors are vectors or matrices"),
            }
        }
        PolicyParams::new(arch, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_gaussian(&self) -> bool {
        self.arch.gaussian
    }

    pub fn hidden_dim(&self) -> usize {
        self.arch.recurrent
    }

    pub fn initial_hidden(&self) -> Vec<f64> {
        vec![0.0; self.arch.recurrent]
    }

    /// Offset of the named tensor inside the flat vector.
    pub fn tensor_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut off = 0;
        for t in self.arch.tensors() {
            if t.name == name {
                return Some(off..off + t.len());
            }
            off += t.len();
        }
        None
    }

    /// Set the output bias so that the zero-input mean equals `action`
    /// (inverts the tanh squash; values are pulled 1e-6 inside the box).
    pub fn set_mean_action_bias(&mut self, action: &[f64]) -> Result<()> {
        let range = self
            .tensor_range("out.b")
            .ok_or_else(|| Error::InvalidArgument("policy has no output bias".into()))?;
        if action.len() != range.len() {
            return Err(Error::Dimension {
                what: "initial action",
                expected: range.len(),
                found: action.len(),
            });
        }
        for (i, (&a, slot)) in action.iter().zip(&mut self.values[range]).enumerate() {
            *slot = match self.arch.output {
                OutputMap::Identity => a,
                OutputMap::Tanh => {
                    let (lo, hi) = (self.arch.action_low[i], self.arch.action_high[i]);
                    let t = (2.0 * (a - lo) / (hi - lo) - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6);
                    t.atanh()
                }
            };
        }
        Ok(())
    }

    pub fn clamp_log_std(&mut self) {
        if let Some(range) = self.tensor_range("log_std") {
            for v in &mut self.values[range] {
                *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
        }
    }

    fn check(&self, s: &[f64], h: &[f64]) -> Result<()> {
        if s.len() != self.arch.obs_dim {
            return Err(Error::Dimension {
                what: "policy observation",
                expected: self.arch.obs_dim,
                found: s.len(),
            });
        }
        if h.len() != self.arch.recurrent {
            return Err(Error::Dimension {
                what: "policy hidden state",
                expected: self.arch.recurrent,
                found: h.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, s: &[f64], h: &[f64]) -> Output<f64> {
        self.arch.forward(&self.values, s, h)
    }

    /// Mean action, log-std vector and next hidden state.
    pub fn act_mean(&self, s: &[f64], h: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.check(s, h)?;
        let out = self.forward(s, h);
        Ok((out.mean, out.log_std, out.hidden))
    }

    pub fn sample_action(&self, s: &[f64], h: &[f64], seed: u64) -> Result<ActionSample> {
        if !self.arch.gaussian {
            return Err(Error::NoSampler);
        }
        self.check(s, h)?;
        let out = self.forward(s, h);
        let eps = rng::standard_normals(&mut rng::seeded(seed), self.arch.act_dim);
        let (u, action) = self.arch.sample_with(&out, &eps);
        let log_prob = self.arch.log_prob(&out, &u);
        Ok(ActionSample {
            action,
            pre_squash: u,
            log_prob,
            hidden: out.hidden,
        })
    }

    pub fn entropy(&self, s: &[f64], h: &[f64]) -> Result<f64> {
        if !self.arch.gaussian {
            return Err(Error::NoSampler);
        }
        self.check(s, h)?;
        Ok(self.arch.entropy(&self.forward(s, h)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::CartpoleTask;

    fn cartpole() -> System {
        System::cartpole(CartpoleTask::Balance)
    }

    #[test]
    fn no_action_outputs_zero() {
        let p = PolicyParams::no_action(&System::pointmass());
        let (a, _, _) = p.act_mean(&[0.3, -1.0, 2.0, 0.1], &[]).unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_weight_mlp_is_constant_tanh_of_bias() {
        let sys = cartpole();
        let arch = PolicyArch::mlp_for(&sys, &[8, 8], false);
        let mut p = PolicyParams::init(arch, 1, 0.0).unwrap();
        p.values.iter_mut().for_each(|v| *v = 0.0);
        let b = p.tensor_range("out.b").unwrap();
        p.values[b.start] = 0.4;
        let expected = -10.0 + 20.0 * (0.4_f64.tanh() + 1.0) / 2.0;
        for s in [[0.0, 0.0, 0.0, 0.0], [1.0, -2.0, 0.3, 5.0]] {
            let (a, _, _) = p.act_mean(&s, &[]).unwrap();
            assert!((a[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = PolicyParams::init(PolicyArch::mlp_for(&cartpole(), &[4], true), 0, 0.0).unwrap();
        assert!(p.act_mean(&[0.0; 3], &[]).is_err());
    }

    #[test]
    fn deterministic_policy_has_no_sampler() {
        let p = PolicyParams::init(PolicyArch::mlp_for(&cartpole(), &[4], false), 0, 0.0).unwrap();
        assert!(matches!(p.sample_action(&[0.0; 4], &[], 1), Err(Error::NoSampler)));
        assert!(matches!(p.entropy(&[0.0; 4], &[]), Err(Error::NoSampler)));
    }

    #[test]
    fn entropy_values() {
        let sys = System::logistic_control();
        let arch = PolicyArch::mlp_for(&sys, &[4], true);
        let mut p = PolicyParams::init(arch, 0, 0.0).unwrap();
        let e0 = p.entropy(&[0.5], &[]).unwrap();
        assert!((e0 - 1.418_938_533_204_672_7).abs() < 1e-12);
        let ls = p.tensor_range("log_std").unwrap();
        p.values[ls.start] = 2.0_f64.ln();
        let e1 = p.entropy(&[0.5], &[]).unwrap();
        assert!((e1 - e0 - 2.0_f64.ln()).abs() < 1e-12);

        let arch3 = PolicyArch {
            act_dim: 3,
            action_low: vec![-1.0; 3],
            action_high: vec![1.0; 3],
            ..PolicyArch::mlp_for(&sys, &[4], true)
        };
        let p3 = PolicyParams::init(arch3, 0, 0.0).unwrap();
        assert!((p3.entropy(&[0.5], &[]).unwrap() - 3.0 * e0).abs() < 1e-12);
    }

    #[test]
    fn log_std_is_clamped_on_construction() {
        let sys = System::logistic_control();
        let p = PolicyParams::init(PolicyArch::mlp_for(&sys, &[2], true), 0, -9.0).unwrap();
        let ls = p.tensor_range("log_std").unwrap();
        assert_eq!(p.values[ls], [LOG_STD_MIN]);
    }

    #[test]
    fn recurrent_cell_updates_hidden_state() {
        let sys = System::logistic_control();
        let arch = PolicyArch {
            recurrent: 3,
            ..PolicyArch::mlp_for(&sys, &[4], true)
        };
        let p = PolicyParams::init(arch, 5, 0.0).unwrap();
        let (_, _, h1) = p.act_mean(&[0.4], &[0.0; 3]).unwrap();
        assert_eq!(h1.len(), 3);
        assert!(h1.iter().all(|v| v.abs() < 1.0));
        assert!(p.act_mean(&[0.4], &[]).is_err());
    }

    #[test]
    fn mean_bias_inverts_squash() {
        let sys = System::logistic_control();
        let mut p = PolicyParams::init(PolicyArch::mlp_for(&sys, &[4], true), 2, 0.0).unwrap();
        let w = p.tensor_range("out.w").unwrap();
        p.values[w].iter_mut().for_each(|v| *v = 0.0);
        p.set_mean_action_bias(&[3.7]).unwrap();
        let (a, _, _) = p.act_mean(&[0.2], &[]).unwrap();
        assert!((a[0] - 3.7).abs() < 1e-12);
    }
}
