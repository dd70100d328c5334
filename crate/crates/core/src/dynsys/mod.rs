//! Deterministic systems and closed-loop composition with a policy.

mod systems;

pub use systems::{
    Cartpole, CartpoleTask, HenonMap, LinearContraction, LogisticControl, LogisticMap, Lorenz, Model, Pointmass,
    System, SYSTEM_IDS,
};

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rng::{self, Stream};

/// Additive Gaussian observation noise `N(0, (sigma * scale_i)^2)` on
/// state dimension `i`. The policy sees the noisy state; the system
/// always advances from the true one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    /// Per-dimension multipliers; `None` means 1 everywhere.
    pub scale: Option<Vec<f64>>,
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            sigma: 0.0,
            scale: None,
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        NoiseConfig { sigma, scale: None }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if let Some(s) = &self.scale {
            if s.len() != dim {
                return Err(Error::Dimension {
                    what: "noise scale",
                    expected: dim,
                    found: s.len(),
                });
            }
            if s.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument("noise scales must be finite and >= 0".into()));
            }
        }
        Ok(())
    }

    fn is_silent(&self) -> bool {
        self.sigma == 0.0
    }
}

/// A closed-loop run: `T + 1` states, `T` observations, actions and
/// rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// CSV with header `t,s_0..s_{N-1},a_0..a_{M-1},r`. The final row
    /// holds the terminal state with empty action and reward fields.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.actions.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 0..n {
            let _ = write!(out, ",s_{i}");
        }
        for i in 0..m {
            let _ = write!(out, ",a_{i}");
        }
        out.push_str(",r\n");
        for (t, s) in self.states.iter().enumerate() {
            let _ = write!(out, "{t}");
            for v in s {
                let _ = write!(out, ",{v:?}");
            }
            match (self.actions.get(t), self.rewards.get(t)) {
                (Some(a), Some(r)) => {
                    for v in a {
                        let _ = write!(out, ",{v:?}");
                    }
                    let _ = write!(out, ",{r:?}");
                }
                _ => out.push_str(&",".repeat(m + 1)),
            }
            out.push('\n');
        }
        out
    }
}

/// Mean action of `policy` at `obs`, with the recurrent state threaded
/// through. Gaussian policies are evaluated at their mean.
pub fn policy_action(policy: &PolicyParams, obs: &[f64], hidden: &mut Vec<f64>) -> Result<Vec<f64>> {
    let (a, _, h) = policy.act_mean(obs, hidden)?;
    *hidden = h;
    Ok(a)
}

fn check_policy(sys: &System, policy: &PolicyParams) -> Result<()> {
    if policy.arch.obs_dim != sys.state_dim() {
        return Err(Error::Dimension {
            what: "policy observation",
            expected: sys.state_dim(),
            found: policy.arch.obs_dim,
        });
    }
    if policy.arch.act_dim != sys.action_dim() {
        return Err(Error::Dimension {
            what: "policy action",
            expected: sys.action_dim(),
            found: policy.arch.act_dim,
        });
    }
    Ok(())
}

/// Run `steps` closed-loop steps from `s0` under observation noise.
///
/// Noise draws come from a stream derived from `seed`; with `sigma = 0`
/// the seed is unused and the run is fully deterministic.
pub fn rollout(
    sys: &System,
    policy: &PolicyParams,
    s0: &[f64],
    steps: usize,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::InvalidArgument("rollout needs at least one step".into()));
    }
    check_policy(sys, policy)?;
    noise.validate(sys.state_dim())?;
    if s0.len() != sys.state_dim() {
        return Err(Error::Dimension {
            what: "initial state",
            expected: sys.state_dim(),
            found: s0.len(),
        });
    }
    if s0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteAt { step: 0 });
    }
    let mut noise_rng = rng::seeded(rng::derive(seed, Stream::ObservationNoise, 0));
    let mut hidden = policy.initial_hidden();
    let mut traj = Trajectory {
        states: Vec::with_capacity(steps + 1),
        observations: Vec::with_capacity(steps),
        actions: Vec::with_capacity(steps),
        rewards: Vec::with_capacity(steps),
    };
    let mut s = s0.to_vec();
    for t in 0..steps {
        let obs = if noise.is_silent() {
            s.clone()
        } else {
            let eta = rng::standard_normals(&mut noise_rng, s.len());
            s.iter()
                .enumerate()
                .map(|(i, &x)| {
                    let k = noise.scale.as_ref().map_or(1.0, |sc| sc[i]);
                    x + noise.sigma * k * eta[i]
                })
                .collect()
        };
        let a = sys.clamp_action(&policy_action(policy, &obs, &mut hidden)?);
        let r = sys.reward(&s, &a);
        let next = sys.transition(&s, &a);
        if next.iter().any(|v| !v.is_finite()) || !r.is_finite() {
            return Err(Error::NonFiniteAt { step: t + 1 });
        }
        traj.states.push(std::mem::replace(&mut s, next));
        traj.observations.push(obs);
        traj.actions.push(a);
        traj.rewards.push(r);
    }
    traj.states.push(s);
    Ok(traj)
}

/// `sum_t gamma^t r_t` for `0 <= gamma < 1`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "discount must lie in [0, 1), got {gamma}"
        )));
    }
    // Horner from the tail keeps it one multiply-add per step.
    Ok(rewards.iter().rev().fold(0.0, |acc, &r| r + gamma * acc))
}

/// One closed-loop step `s -> f(s, pi(s))` for a memoryless policy.
pub fn closed_loop_step(sys: &System, policy: &PolicyParams, s: &[f64]) -> Result<Vec<f64>> {
    let (a, _, _) = policy.act_mean(s, &[])?;
    Ok(sys.transition(s, &a))
}

fn require_memoryless(policy: &PolicyParams) -> Result<()> {
    if policy.hidden_dim() > 0 {
        return Err(Error::InvalidArgument(
            "closed-loop Jacobians need a memoryless policy".into(),
        ));
    }
    Ok(())
}

/// Jacobian of `s -> f(s, pi(s))` by reverse-mode autodiff, one backward
/// pass per output row. Falls back to central differences if the tape
/// produces non-finite entries.
pub fn closed_loop_jacobian(sys: &System, policy: &PolicyParams, s: &[f64]) -> Result<DMatrix<f64>> {
    check_policy(sys, policy)?;
    require_memoryless(policy)?;
    let (a, _, _) = policy.act_mean(s, &[])?;
    sys.check_dims(s, &a)?;
    if let Some(reason) = sys.non_smooth_reason(s, &a) {
        return Err(Error::NonSmooth(reason));
    }
    let n = s.len();
    let tape = Tape::new();
    let xs = tape.vars(s);
    let theta: Vec<Var<'_>> = policy.values.iter().map(|&v| Var::constant(v)).collect();
    let out = policy.arch.forward(&theta, &xs, &[]);
    let next = sys.transition(&xs, &out.mean);
    let mut jac = DMatrix::zeros(n, n);
    for (i, yi) in next.iter().enumerate() {
        let g = tape.backward(*yi);
        for (j, xj) in xs.iter().enumerate() {
            jac[(i, j)] = g.get(*xj);
        }
    }
    if jac.iter().all(|v| v.is_finite()) {
        Ok(jac)
    } else {
        closed_loop_jacobian_fd(sys, policy, s, 1e-6)
    }
}

/// Central-difference Jacobian of the closed-loop map.
pub fn closed_loop_jacobian_fd(sys: &System, policy: &PolicyParams, s: &[f64], h: f64) -> Result<DMatrix<f64>> {
    check_policy(sys, policy)?;
    require_memoryless(policy)?;
    let n = s.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut plus = s.to_vec();
        let mut minus = s.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let fp = closed_loop_step(sys, policy, &plus)?;
        let fm = closed_loop_step(sys, policy, &minus)?;
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Build a system from config keys.
///
/// `system` selects the model; the remaining keys override its constants:
/// `henon_a`, `henon_b`, `lorenz_sigma`, `lorenz_rho`, `lorenz_beta`,
/// `dt`, `mass`, `damping`, `force_bound`, `cart_mass`, `pole_mass`,
/// `pole_half_length`, `gravity`, `task` (`balance` or `swingup`),
/// `rate`, `band_low`, `band_high`, `band_edge`, and the action bounds
/// `action_low` / `action_high`.
pub fn system_from_config(kv: &KeyValues) -> Result<System> {
    let id = kv.required_str("system")?;
    let bad = |key: &str, why: &str| Error::Config(format!("{}: `{key}` {why}", kv.origin()));
    let positive = |key: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(bad(key, "must be positive"))
        }
    };
    let model = match id.as_str() {
        "logistic" => Model::Logistic(LogisticMap),
        "henon" => {
            let d = HenonMap::default();
            Model::Henon(HenonMap {
                a: kv.f64_or("henon_a", d.a)?,
                b: kv.f64_or("henon_b", d.b)?,
            })
        }
        "lorenz" => {
            let d = Lorenz::default();
            Model::Lorenz(Lorenz {
                sigma: kv.f64_or("lorenz_sigma", d.sigma)?,
                rho: kv.f64_or("lorenz_rho", d.rho)?,
                beta: kv.f64_or("lorenz_beta", d.beta)?,
                dt: positive("dt", kv.f64_or("dt", d.dt)?)?,
            })
        }
        "pointmass" => {
            let d = Pointmass::default();
            let damping = kv.f64_or("damping", d.damping)?;
            if damping < 0.0 {
                return Err(bad("damping", "must be >= 0"));
            }
            Model::Pointmass(Pointmass {
                mass: positive("mass", kv.f64_or("mass", d.mass)?)?,
                damping,
                force_bound: positive("force_bound", kv.f64_or("force_bound", d.force_bound)?)?,
                dt: positive("dt", kv.f64_or("dt", d.dt)?)?,
            })
        }
        "cartpole" => {
            let task = match kv.str("task")?.as_deref().unwrap_or("balance") {
                "balance" => CartpoleTask::Balance,
                "swingup" => CartpoleTask::Swingup,
                other => return Err(bad("task", &format!("must be balance or swingup, not `{other}`"))),
            };
            let d = Cartpole::new(task);
            Model::Cartpole(Cartpole {
                cart_mass: positive("cart_mass", kv.f64_or("cart_mass", d.cart_mass)?)?,
                pole_mass: positive("pole_mass", kv.f64_or("pole_mass", d.pole_mass)?)?,
                half_length: positive("pole_half_length", kv.f64_or("pole_half_length", d.half_length)?)?,
                gravity: kv.f64_or("gravity", d.gravity)?,
                force_bound: positive("force_bound", kv.f64_or("force_bound", d.force_bound)?)?,
                dt: positive("dt", kv.f64_or("dt", d.dt)?)?,
                task,
            })
        }
        "logistic-control" => {
            let d = LogisticControl::default();
            Model::LogisticControl(LogisticControl {
                band_low: kv.f64_or("band_low", d.band_low)?,
                band_high: kv.f64_or("band_high", d.band_high)?,
                band_edge: positive("band_edge", kv.f64_or("band_edge", d.band_edge)?)?,
            })
        }
        "linear" => {
            let rate = kv.f64_or("rate", LinearContraction::default().rate)?;
            if rate.abs() >= 1.0 {
                return Err(bad("rate", "must satisfy |rate| < 1"));
            }
            Model::Linear(LinearContraction { rate })
        }
        other => {
            return Err(Error::Config(format!(
                "{}: unknown system `{other}` (expected one of {})",
                kv.origin(),
                SYSTEM_IDS.join(", ")
            )))
        }
    };
    let mut sys = System::from(model);
    if let Some(lo) = kv.f64_list("action_low")? {
        sys.action_low = lo;
    }
    if let Some(hi) = kv.f64_list("action_high")? {
        sys.action_high = hi;
    }
    let m = sys.action_dim();
    if sys.action_high.len() != m || sys.action_low.iter().zip(&sys.action_high).any(|(l, h)| !(l <= h)) {
        return Err(Error::Config(format!(
            "{}: action_low / action_high must have equal length with low <= high",
            kv.origin()
        )));
    }
    let default_m = System::from(sys.model.clone()).action_dim();
    if m != default_m {
        return Err(Error::Config(format!(
            "{}: system `{id}` takes {default_m} action dimension(s), bounds give {m}",
            kv.origin()
        )));
    }
    Ok(sys)
}
