//! The training loop.

use serde::{Deserialize, Serialize};

use super::{
    imagine_bundle, lambda_returns, member_seeds, mle_reg_loss, policy_loss, spread_penalty, total_loss, ReturnScale,
};
use crate::autodiff::{Scalar, Tape, Var};
use crate::dynsys::System;
use crate::error::{Error, Result};
use crate::eval::iqm;
use crate::lyapunov::{spectrum_over_samples, SpectrumConfig};
use crate::policy::{OutputMap, PolicyArch, PolicyKind, PolicyParams};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Bundle members `L`.
    pub members: usize,
    /// Imagination horizon `T`.
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    /// Entropy weight.
    pub eta: f64,
    /// Regulariser weight.
    pub beta: f64,
    /// When false the regulariser never enters the loss, whatever `beta`.
    pub regularizer: bool,
    pub learning_rate: f64,
    pub value_learning_rate: f64,
    /// Start states per update.
    pub batch: usize,
    pub updates: usize,
    /// Spectrum estimate every this many updates (and after the last);
    /// 0 disables the periodic estimates.
    pub eval_every: usize,
    pub grad_clip: f64,
    pub return_scale_decay: f64,
    pub hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub recurrent: usize,
    pub log_std_init: f64,
    /// Optional mean action of the initial policy (sets the output bias).
    pub init_mean_action: Option<Vec<f64>>,
    pub spectrum: SpectrumConfig,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            members: 3,
            horizon: 15,
            gamma: 0.99,
            lambda: 0.95,
            eta: 1e-3,
            beta: 1.0,
            regularizer: true,
            learning_rate: 1e-3,
            value_learning_rate: 1e-2,
            batch: 16,
            updates: 200,
            eval_every: 50,
            grad_clip: 100.0,
            return_scale_decay: 0.99,
            hidden: vec![64, 64],
            value_hidden: vec![64, 64],
            recurrent: 0,
            log_std_init: -0.5,
            init_mean_action: None,
            spectrum: SpectrumConfig {
                samples: 5,
                ..SpectrumConfig::default()
            },
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.members < 2 {
            return bad(format!("members must be >= 2, got {}", self.members));
        }
        if self.horizon == 0 || self.batch == 0 {
            return bad("horizon and batch must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("need 0 <= gamma < 1 and 0 <= lambda <= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.value_learning_rate >= 0.0 && self.grad_clip > 0.0) {
            return bad("learning rates must be >= 0 and grad_clip > 0".into());
        }
        if !(0.0..1.0).contains(&self.return_scale_decay) {
            return bad("return_scale_decay must lie in [0, 1)".into());
        }
        if !(self.eta.is_finite() && self.beta.is_finite()) {
            return bad("eta and beta must be finite".into());
        }
        self.spectrum.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub update: usize,
    /// IQM of undiscounted member returns over the batch.
    pub return_iqm: f64,
    /// Regulariser value averaged over the batch (logged even when it is
    /// not optimised).
    pub reg_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub grad_norm: f64,
    /// Spectrum MLE of the mean policy, on evaluation updates; `-inf` when
    /// every perturbation collapsed (e.g. a superstable fixed point).
    pub mle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub policy: PolicyParams,
    pub value: PolicyParams,
    pub history: Vec<HistoryEntry>,
    pub scale: ReturnScale,
}

impl TrainResult {
    /// CSV with header `update,return_iqm,reg_loss,mle`; `mle` is empty
    /// on updates without an estimate.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("update,return_iqm,reg_loss,mle\n");
        for h in &self.history {
            let mle = h.mle.map_or(String::new(), |m| format!("{m:?}"));
            out.push_str(&format!("{},{:?},{:?},{}\n", h.update, h.return_iqm, h.reg_loss, mle));
        }
        out
    }
}

fn clip(g: &mut [f64], max_norm: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= k);
    }
    norm
}

/// Initial policy and value network for a config.
pub fn initial_networks(sys: &System, cfg: &TrainerConfig) -> Result<(PolicyParams, PolicyParams)> {
    let arch = PolicyArch {
        recurrent: cfg.recurrent,
        ..PolicyArch::mlp_for(sys, &cfg.hidden, true)
    };
    let mut policy = PolicyParams::init(arch, rng::derive(cfg.seed, Stream::Init, 0), cfg.log_std_init)?;
    if let Some(a) = &cfg.init_mean_action {
        policy.set_mean_action_bias(a)?;
    }
    let varch = PolicyArch {
        kind: PolicyKind::Mlp,
        obs_dim: sys.state_dim(),
        act_dim: 1,
        hidden: cfg.value_hidden.clone(),
        output: OutputMap::Identity,
        action_low: vec![],
        action_high: vec![],
        gaussian: false,
        recurrent: 0,
    };
    let value = PolicyParams::init(varch, rng::derive(cfg.seed, Stream::Init, 1), 0.0)?;
    Ok((policy, value))
}

/// Train a Gaussian MLP policy on `sys` with plain SGD.
pub fn train(sys: &System, cfg: &TrainerConfig) -> Result<TrainResult> {
    train_with(sys, cfg, |_| {})
}

/// As [`train`], calling `progress` after every update.
pub fn train_with(sys: &System, cfg: &TrainerConfig, mut progress: impl FnMut(&HistoryEntry)) -> Result<TrainResult> {
    cfg.validate()?;
    let (mut policy, mut value) = initial_networks(sys, cfg)?;
    let mut scale = ReturnScale::new(cfg.return_scale_decay);
    let mut history = Vec::with_capacity(cfg.updates);
    let use_reg = cfg.regularizer && cfg.beta != 0.0;
    let h0 = policy.initial_hidden();
    for update in 0..cfg.updates {
        let tape = Tape::new();
        let theta = tape.vars(&policy.values);
        let phi = tape.vars(&value.values);
        let mut bundles = Vec::with_capacity(cfg.batch);
        let mut all_returns = Vec::new();
        let mut episode_returns = Vec::new();
        let mut reg_values = Vec::with_capacity(cfg.batch);
        for b in 0..cfg.batch {
            let k = (update * cfg.batch + b) as u64;
            let s0 = sys.sample_initial(rng::derive(cfg.seed, Stream::Batch, k));
            let seeds = member_seeds(rng::derive(cfg.seed, Stream::Episode, k), cfg.members);
            let bundle = imagine_bundle(sys, &policy.arch, &theta, &s0, &h0, cfg.horizon, &seeds).map_err(|e| {
                Error::NonFiniteLoss {
                    update,
                    detail: format!("imagined rollout from {s0:?} failed: {e}"),
                }
            })?;
            let values: Vec<Vec<Var<'_>>> = bundle
                .states
                .iter()
                .map(|m| {
                    m.iter()
                        .map(|s| {
                            let sg: Vec<Var<'_>> = s.iter().map(|x| x.detach()).collect();
                            value.arch.forward(&phi, &sg, &[]).pre[0]
                        })
                        .collect()
                })
                .collect();
            let returns = bundle
                .rewards
                .iter()
                .zip(&values)
                .map(|(r, v)| {
                    let v: Vec<f64> = v.iter().map(Scalar::value).collect();
                    lambda_returns(r, &v, cfg.gamma, cfg.lambda)
                })
                .collect::<Result<Vec<_>>>()?;
            for (r, lam) in bundle.rewards.iter().zip(&returns) {
                episode_returns.push(r.iter().sum::<f64>());
                all_returns.extend_from_slice(&lam[..cfg.horizon]);
            }
            let plain_hidden: Vec<Vec<Vec<f64>>> = bundle
                .hidden
                .iter()
                .map(|m| m.iter().map(|h| h.iter().map(Scalar::value).collect()).collect())
                .collect();
            reg_values.push(spread_penalty(&bundle.state_values(), &plain_hidden)?);
            bundles.push((bundle, values, returns));
        }
        scale.update(&all_returns)?;

        let mut pol_terms = Vec::with_capacity(cfg.batch);
        let mut reg_terms = Vec::with_capacity(cfg.batch);
        let mut val_terms = Vec::new();
        for (bundle, values, returns) in &bundles {
            pol_terms.push(policy_loss(bundle, values, returns, &scale, cfg.eta)?);
            if use_reg {
                reg_terms.push(mle_reg_loss(bundle)?);
            }
            for (v, r) in values.iter().zip(returns) {
                for t in 0..cfg.horizon {
                    val_terms.push((v[t] - r[t]).square() * (0.5 / cfg.members as f64));
                }
            }
        }
        let n = cfg.batch as f64;
        let pol = Var::sum(&pol_terms) / n;
        let reg = use_reg.then(|| Var::sum(&reg_terms) / n);
        let val = Var::sum(&val_terms) / n;
        let objective = total_loss(pol, reg, cfg.beta);
        let loss = objective + val;
        let reg_mean = reg_values.iter().sum::<f64>() / n;
        if !loss.value().is_finite() {
            return Err(Error::NonFiniteLoss {
                update,
                detail: format!(
                    "policy loss {:?}, regulariser {:?}, value loss {:?}, return scale {:?}",
                    pol.value(),
                    reg_mean,
                    val.value(),
                    scale.value
                ),
            });
        }
        let grads = tape.backward(loss);
        let mut gp = grads.wrt(&theta);
        let mut gv = grads.wrt(&phi);
        drop(bundles);
        if gp.iter().chain(&gv).any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                update,
                detail: "non-finite gradient".into(),
            });
        }
        let grad_norm = clip(&mut gp, cfg.grad_clip);
        clip(&mut gv, cfg.grad_clip);
        for (p, g) in policy.values.iter_mut().zip(&gp) {
            *p -= cfg.learning_rate * g;
        }
        for (p, g) in value.values.iter_mut().zip(&gv) {
            *p -= cfg.value_learning_rate * g;
        }
        policy.clamp_log_std();

        let last = update + 1 == cfg.updates;
        let due = cfg.eval_every > 0 && (update + 1) % cfg.eval_every == 0;
        let mle = if (due || last) && policy.hidden_dim() == 0 {
            let seed = rng::derive(cfg.seed, Stream::Evaluation, update as u64);
            match spectrum_over_samples(sys, &policy, &cfg.spectrum, seed) {
                Ok(summary) => Some(summary.mle),
                // Offsets collapsed below double precision on every sample:
                // contraction too strong to measure.
                Err(Error::DegeneratePerturbation { .. }) => Some(f64::NEG_INFINITY),
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let entry = HistoryEntry {
            update,
            return_iqm: iqm(&episode_returns)?,
            reg_loss: reg_mean,
            policy_loss: pol.value(),
            value_loss: val.value(),
            grad_norm,
            mle,
        };
        progress(&entry);
        history.push(entry);
    }
    Ok(TrainResult {
        policy,
        value,
        history,
        scale,
    })
}
