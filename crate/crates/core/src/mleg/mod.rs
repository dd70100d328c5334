//! Imagined-rollout bundles, the variance regulariser and a small
//! policy-gradient trainer.
//!
//! A bundle is `L` rollouts of a Gaussian policy from one shared start,
//! each with its own reparameterised action noise, pushed through the
//! true differentiable dynamics. The per-step spread of the members
//! estimates local divergence; penalising it (pathwise, through the
//! dynamics) pulls the closed loop towards stability.
//!
//! The policy itself is trained with REINFORCE on normalised
//! lambda-return advantages plus an entropy bonus; a value network
//! regressed onto the returns supplies the baseline and the bootstrap.

mod train;

pub use train::{initial_networks, train, train_with, HistoryEntry, TrainResult, TrainerConfig};

use crate::autodiff::{Scalar, Tape, Var};
use crate::dynsys::System;
use crate::error::{Error, Result};
use crate::eval::quantile;
use crate::policy::{PolicyArch, PolicyParams};
use crate::rng::{self, Stream};

/// `L` rollouts over horizon `T` on a tape. Indexing is `[member][t]`.
#[derive(Debug, Clone)]
pub struct Bundle<'t> {
    /// `T + 1` states per member.
    pub states: Vec<Vec<Vec<Var<'t>>>>,
    /// `T + 1` hidden states per member (empty vectors if memoryless).
    pub hidden: Vec<Vec<Vec<Var<'t>>>>,
    pub actions: Vec<Vec<Vec<Var<'t>>>>,
    /// `log pi(sg(u_t) | sg(s_t), sg(h_t))`.
    pub log_probs: Vec<Vec<Var<'t>>>,
    pub entropies: Vec<Vec<Var<'t>>>,
    pub rewards: Vec<Vec<f64>>,
    pub member_seeds: Vec<u64>,
}

impl Bundle<'_> {
    pub fn members(&self) -> usize {
        self.states.len()
    }

    pub fn horizon(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    /// Plain values of every member's states.
    pub fn state_values(&self) -> Vec<Vec<Vec<f64>>> {
        self.states
            .iter()
            .map(|m| m.iter().map(|s| s.iter().map(Scalar::value).collect()).collect())
            .collect()
    }
}

/// Member seeds for a bundle.
pub fn member_seeds(seed: u64, members: usize) -> Vec<u64> {
    (0..members as u64)
        .map(|l| rng::derive(seed, Stream::Member, l))
        .collect()
}

/// Roll out one member per seed from the shared `(s0, h0)`.
///
/// `theta` are the policy parameters as tape variables (pass constants to
/// freeze them). Rewards are recorded as plain numbers.
pub fn imagine_bundle<'t>(
    sys: &System,
    arch: &PolicyArch,
    theta: &[Var<'t>],
    s0: &[f64],
    h0: &[f64],
    horizon: usize,
    seeds: &[u64],
) -> Result<Bundle<'t>> {
    if !arch.gaussian {
        return Err(Error::NoSampler);
    }
    if horizon == 0 {
        return Err(Error::InvalidArgument("bundle horizon must be >= 1".into()));
    }
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a bundle needs L >= 2 members, got {}",
            seeds.len()
        )));
    }
    if theta.len() != arch.param_count() {
        return Err(Error::ParamCount {
            expected: arch.param_count(),
            found: theta.len(),
        });
    }
    if s0.len() != arch.obs_dim || s0.len() != sys.state_dim() {
        return Err(Error::Dimension {
            what: "bundle start state",
            expected: sys.state_dim(),
            found: s0.len(),
        });
    }
    if h0.len() != arch.recurrent {
        return Err(Error::Dimension {
            what: "bundle start hidden state",
            expected: arch.recurrent,
            found: h0.len(),
        });
    }
    let l = seeds.len();
    let mut b = Bundle {
        states: Vec::with_capacity(l),
        hidden: Vec::with_capacity(l),
        actions: Vec::with_capacity(l),
        log_probs: Vec::with_capacity(l),
        entropies: Vec::with_capacity(l),
        rewards: Vec::with_capacity(l),
        member_seeds: seeds.to_vec(),
    };
    for &seed in seeds {
        let mut r = rng::seeded(seed);
        let mut s: Vec<Var<'t>> = s0.iter().map(|&v| Var::constant(v)).collect();
        let mut h: Vec<Var<'t>> = h0.iter().map(|&v| Var::constant(v)).collect();
        let mut states = vec![s.clone()];
        let mut hidden = vec![h.clone()];
        let mut actions = Vec::with_capacity(horizon);
        let mut log_probs = Vec::with_capacity(horizon);
        let mut entropies = Vec::with_capacity(horizon);
        let mut rewards = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let eps = rng::standard_normals(&mut r, arch.act_dim);
            let out = arch.forward(theta, &s, &h);
            let (u, a) = arch.sample_with(&out, &eps);
            let sg = |xs: &[Var<'t>]| xs.iter().map(|x| x.detach()).collect::<Vec<_>>();
            let out_pg = arch.forward(theta, &sg(&s), &sg(&h));
            log_probs.push(arch.log_prob(&out_pg, &sg(&u)));
            entropies.push(arch.entropy(&out_pg));
            let sv: Vec<f64> = s.iter().map(Scalar::value).collect();
            let av: Vec<f64> = a.iter().map(Scalar::value).collect();
            rewards.push(sys.reward(&sv, &sys.clamp_action(&av)));
            s = sys.transition(&s, &a);
            if s.iter().any(|x| !x.value().is_finite()) {
                return Err(Error::NonFiniteAt {
                    step: actions.len() + 1,
                });
            }
            h = out.hidden;
            actions.push(a);
            states.push(s.clone());
            hidden.push(h.clone());
        }
        b.states.push(states);
        b.hidden.push(hidden);
        b.actions.push(actions);
        b.log_probs.push(log_probs);
        b.entropies.push(entropies);
        b.rewards.push(rewards);
    }
    Ok(b)
}

/// Generic form of the regulariser on plain or tape values, indexed
/// `[member][t][dim]`; `t = 0` (the shared start) is skipped.
pub fn spread_penalty<S: Scalar>(states: &[Vec<Vec<S>>], hidden: &[Vec<Vec<S>>]) -> Result<S> {
    let l = states.len();
    if l < 2 {
        return Err(Error::InvalidArgument(format!(
            "variance needs L >= 2 members, got {l}"
        )));
    }
    let steps = states[0].len();
    let mut terms = Vec::with_capacity(2 * steps);
    for t in 1..steps {
        for block in [states, hidden] {
            let dims = block[0].get(t).map_or(0, Vec::len);
            if dims == 0 {
                continue;
            }
            let per_dim: Vec<S> = (0..dims)
                .map(|d| S::variance(&block.iter().map(|m| m[t][d]).collect::<Vec<_>>()))
                .collect();
            terms.push(S::mean(&per_dim));
        }
    }
    Ok(if terms.is_empty() {
        S::from_f64(0.0)
    } else {
        S::sum(&terms)
    })
}

/// Sum over `t = 1..T` of the mean per-dimension population variance
/// across members, for states plus hidden states.
pub fn mle_reg_loss<'t>(bundle: &Bundle<'t>) -> Result<Var<'t>> {
    spread_penalty(&bundle.states, &bundle.hidden)
}

/// `R_T = v_T`, `R_t = r_t + gamma ((1 - lambda) v_{t+1} + lambda R_{t+1})`.
/// Returns `T + 1` values.
pub fn lambda_returns(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Dimension {
            what: "lambda-return values",
            expected: rewards.len() + 1,
            found: values.len(),
        });
    }
    let n = rewards.len();
    let mut out = vec![0.0; n + 1];
    out[n] = values[n];
    for t in (0..n).rev() {
        out[t] = rewards[t] + gamma * ((1.0 - lambda) * values[t + 1] + lambda * out[t + 1]);
    }
    Ok(out)
}

/// Exponential moving average of the 5th to 95th percentile spread of
/// lambda-returns; advantages are divided by `max(1, S)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReturnScale {
    pub value: f64,
    pub decay: f64,
}

impl ReturnScale {
    pub fn new(decay: f64) -> Self {
        ReturnScale { value: 0.0, decay }
    }

    pub fn update(&mut self, returns: &[f64]) -> Result<()> {
        let spread = quantile(returns, 0.95)? - quantile(returns, 0.05)?;
        self.value = self.decay * self.value + (1.0 - self.decay) * spread;
        Ok(())
    }

    pub fn divisor(&self) -> f64 {
        self.value.max(1.0)
    }
}

/// REINFORCE-plus-entropy loss of one bundle, averaged over members:
/// `-(1/L) sum_l sum_t [sg(adv) log pi + eta H]` with
/// `adv = (R_t - v_t) / max(1, S)`. `values` and `returns` hold `T + 1`
/// entries per member; only their plain values are used, so no gradient
/// reaches the value network through this term.
pub fn policy_loss<'t>(
    bundle: &Bundle<'t>,
    values: &[Vec<Var<'t>>],
    returns: &[Vec<f64>],
    scale: &ReturnScale,
    eta: f64,
) -> Result<Var<'t>> {
    let l = bundle.members();
    let t_len = bundle.horizon();
    if values.len() != l || returns.len() != l {
        return Err(Error::Dimension {
            what: "policy-loss members",
            expected: l,
            found: values.len().min(returns.len()),
        });
    }
    if values.iter().any(|v| v.len() != t_len + 1) || returns.iter().any(|r| r.len() != t_len + 1) {
        return Err(Error::Dimension {
            what: "policy-loss horizon",
            expected: t_len + 1,
            found: values.iter().map(Vec::len).min().unwrap_or(0),
        });
    }
    let div = scale.divisor();
    let mut terms = Vec::with_capacity(l * t_len);
    for m in 0..l {
        for t in 0..t_len {
            let adv = (returns[m][t] - values[m][t].value()) / div;
            terms.push(bundle.log_probs[m][t] * adv + bundle.entropies[m][t] * eta);
        }
    }
    Ok(-Var::sum(&terms) / l as f64)
}

/// `policy + beta * reg`; with `beta == 0` the regulariser is left out of
/// the graph entirely.
pub fn total_loss<'t>(policy: Var<'t>, reg: Option<Var<'t>>, beta: f64) -> Var<'t> {
    match reg {
        Some(r) if beta != 0.0 => policy + r * beta,
        _ => policy,
    }
}

/// Convenience for tests and tools: the regulariser of a bundle rolled
/// out with `policy` and its gradient with respect to the policy
/// parameters.
pub fn reg_loss_and_grad(
    sys: &System,
    policy: &PolicyParams,
    s0: &[f64],
    horizon: usize,
    seeds: &[u64],
) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let theta = tape.vars(&policy.values);
    let b = imagine_bundle(sys, &policy.arch, &theta, s0, &policy.initial_hidden(), horizon, seeds)?;
    let loss = mle_reg_loss(&b)?;
    let g = tape.backward(loss);
    Ok((loss.value(), g.wrt(&theta)))
}

/// The regulariser value alone, evaluated without a tape.
pub fn reg_loss_value(sys: &System, policy: &PolicyParams, s0: &[f64], horizon: usize, seeds: &[u64]) -> Result<f64> {
    let theta: Vec<Var<'_>> = policy.values.iter().map(|&v| Var::constant(v)).collect();
    let b = imagine_bundle(sys, &policy.arch, &theta, s0, &policy.initial_hidden(), horizon, seeds)?;
    Ok(mle_reg_loss(&b)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_return_hand_case() {
        let r = lambda_returns(&[1.0, 1.0], &[0.0, 0.0, 10.0], 0.9, 0.5).unwrap();
        let expected = [5.5, 10.0, 10.0];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{r:?}");
        }
        assert!(lambda_returns(&[1.0], &[0.0], 0.9, 0.5).is_err());
    }

    #[test]
    fn two_member_hand_variance() {
        let states = vec![vec![vec![0.0], vec![0.0]], vec![vec![0.0], vec![2.0]]];
        let hidden = vec![vec![vec![], vec![]], vec![vec![], vec![]]];
        assert_eq!(spread_penalty::<f64>(&states, &hidden).unwrap(), 1.0);
        assert!(spread_penalty::<f64>(&states[..1], &hidden[..1]).is_err());
    }

    #[test]
    fn return_scale_floor() {
        let mut s = ReturnScale::new(0.99);
        assert_eq!(s.divisor(), 1.0);
        s.update(&(0..=100).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert!((s.value - 0.01 * 90.0).abs() < 1e-12);
        assert_eq!(s.divisor(), 1.0);
    }

    #[test]
    fn deterministic_policy_cannot_imagine() {
        let sys = System::logistic_control();
        let p = PolicyParams::constant(&sys, &[3.0]).unwrap();
        let theta: Vec<Var<'_>> = p.values.iter().map(|&v| Var::constant(v)).collect();
        let err = imagine_bundle(&sys, &p.arch, &theta, &[0.5], &[], 3, &[1, 2]).unwrap_err();
        assert!(matches!(err, Error::NoSampler));
    }
}
