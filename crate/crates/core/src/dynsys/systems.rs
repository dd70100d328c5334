//! Shipped deterministic systems.
//!
//! Discrete maps act directly on the state. Continuous-time systems are
//! advanced by one fixed-step RK4 integration of length `dt`; their
//! Lyapunov exponents are reported per unit time.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::rng;

/// Fold a value back into `[0, 1]` by reflection at the edges.
///
/// The unit interval is invariant under the logistic family, so only
/// perturbed companion trajectories ever leave it.
fn reflect_unit<S: Scalar>(x: S) -> S {
    let v = x.value();
    if v < 0.0 {
        -x
    } else if v > 1.0 {
        -x + 2.0
    } else {
        x
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    // 1 / (1 + e^-x) written through tanh to stay finite for large |x|
    (x * 0.5).tanh() * 0.5 + 0.5
}

fn rk4<S: Scalar, F>(s: &[S], dt: f64, field: F) -> Vec<S>
where
    F: Fn(&[S]) -> Vec<S>,
{
    let shifted = |base: &[S], k: &[S], h: f64| -> Vec<S> { base.iter().zip(k).map(|(&b, &ki)| b + ki * h).collect() };
    let k1 = field(s);
    let k2 = field(&shifted(s, &k1, 0.5 * dt));
    let k3 = field(&shifted(s, &k2, 0.5 * dt));
    let k4 = field(&shifted(s, &k3, dt));
    (0..s.len())
        .map(|i| s[i] + (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0))
        .collect()
}

/// Logistic map `x' = a x (1 - x)` with the growth rate `a` as the action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticMap;

/// Hénon map `(x, y) -> (1 - a x^2 + y, b x)`; takes no action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HenonMap {
    pub a: f64,
    pub b: f64,
}

impl Default for HenonMap {
    fn default() -> Self {
        HenonMap { a: 1.4, b: 0.3 }
    }
}

/// Lorenz flow; takes no action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lorenz {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
}

impl Default for Lorenz {
    fn default() -> Self {
        Lorenz {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
        }
    }
}

impl Lorenz {
    pub fn vector_field<S: Scalar>(&self, s: &[S]) -> Vec<S> {
        let (x, y, z) = (s[0], s[1], s[2]);
        vec![(y - x) * self.sigma, x * (-z + self.rho) - y, x * y - z * self.beta]
    }
}

/// Planar point mass with viscous damping, state `(x, y, vx, vy)`,
/// action = 2-D force.
///
/// Reward: `exp(-(x^2 + y^2) / 0.1^2)`, a smooth bump at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pointmass {
    pub mass: f64,
    pub damping: f64,
    pub force_bound: f64,
    pub dt: f64,
}

impl Default for Pointmass {
    fn default() -> Self {
        Pointmass {
            mass: 1.0,
            damping: 0.5,
            force_bound: 1.0,
            dt: 0.01,
        }
    }
}

impl Pointmass {
    pub fn vector_field<S: Scalar>(&self, s: &[S], a: &[S]) -> Vec<S> {
        vec![
            s[2],
            s[3],
            (a[0] - s[2] * self.damping) / self.mass,
            (a[1] - s[3] * self.damping) / self.mass,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CartpoleTask {
    Balance,
    Swingup,
}

/// Frictionless cart-pole, state `(x, x_dot, theta, theta_dot)` with
/// `theta = 0` upright; action = horizontal force on the cart.
///
/// The pole is a uniform rod of half-length `l`.
///
/// Rewards, both in `[0, 1]` with the angle wrapped to `(-pi, pi]`:
/// * balance: `exp(-(theta / 0.3)^2) * exp(-(x / 1.0)^2)`
/// * swingup: `(1 + cos theta) / 2 * exp(-(x / 2.0)^2)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cartpole {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub half_length: f64,
    pub gravity: f64,
    pub force_bound: f64,
    pub dt: f64,
    pub task: CartpoleTask,
}

impl Cartpole {
    pub fn new(task: CartpoleTask) -> Self {
        Cartpole {
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            gravity: 9.81,
            force_bound: 10.0,
            dt: 0.01,
            task,
        }
    }

    pub fn vector_field<S: Scalar>(&self, s: &[S], a: &[S]) -> Vec<S> {
        let total = self.cart_mass + self.pole_mass;
        let ml = self.pole_mass * self.half_length;
        let (x_dot, theta, theta_dot) = (s[1], s[2], s[3]);
        let (sin, cos) = (theta.sin(), theta.cos());
        let temp = (a[0] + theta_dot.square() * sin * ml) / total;
        let denom = (cos.square() * (-self.pole_mass / total) + 4.0 / 3.0) * self.half_length;
        let theta_acc = (sin * self.gravity - cos * temp) / denom;
        let x_acc = temp - theta_acc * cos * (ml / total);
        vec![x_dot, x_acc, theta_dot, theta_acc]
    }

    /// Total mechanical energy, conserved when unforced.
    pub fn energy(&self, s: &[f64]) -> f64 {
        let total = self.cart_mass + self.pole_mass;
        let (m, l) = (self.pole_mass, self.half_length);
        let (x_dot, theta, theta_dot) = (s[1], s[2], s[3]);
        0.5 * total * x_dot * x_dot
            + m * l * x_dot * theta_dot * theta.cos()
            + (2.0 / 3.0) * m * l * l * theta_dot * theta_dot
            + m * self.gravity * l * theta.cos()
    }
}

/// Logistic growth under a controlled growth rate.
///
/// Reward is a smooth band: `sig((x - low) / k) * sig((high - x) / k)`
/// with `sig` the logistic sigmoid and `k` the edge width. The default
/// upper edge sits outside `[0, 1]`, so the reward only punishes a
/// population that crashes towards zero: any non-collapsing growth rate,
/// periodic or chaotic, earns close to full reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticControl {
    pub band_low: f64,
    pub band_high: f64,
    pub band_edge: f64,
}

impl Default for LogisticControl {
    fn default() -> Self {
        LogisticControl {
            band_low: 0.05,
            band_high: 1.1,
            band_edge: 0.01,
        }
    }
}

impl LogisticControl {
    pub fn band<S: Scalar>(&self, x: S) -> S {
        sigmoid((x - self.band_low) / self.band_edge) * sigmoid((-x + self.band_high) / self.band_edge)
    }
}

/// Scalar linear map `x' = rate * x + u`, reward `-|x|`.
///
/// With `|rate| < 1` and `|u| <= 1` the interval `|x| <= 1 / (1 - |rate|)`
/// is invariant, which bounds the reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearContraction {
    pub rate: f64,
}

impl Default for LinearContraction {
    fn default() -> Self {
        LinearContraction { rate: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Logistic(LogisticMap),
    Henon(HenonMap),
    Lorenz(Lorenz),
    Pointmass(Pointmass),
    Cartpole(Cartpole),
    LogisticControl(LogisticControl),
    Linear(LinearContraction),
}

/// A deterministic system together with its action bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct System {
    pub model: Model,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl From<Model> for System {
    fn from(model: Model) -> Self {
        let (action_low, action_high) = default_bounds(&model);
        System {
            model,
            action_low,
            action_high,
        }
    }
}

fn default_bounds(model: &Model) -> (Vec<f64>, Vec<f64>) {
    match model {
        Model::Logistic(_) | Model::LogisticControl(_) => (vec![0.0], vec![4.0]),
        Model::Henon(_) | Model::Lorenz(_) => (vec![], vec![]),
        Model::Pointmass(p) => (vec![-p.force_bound; 2], vec![p.force_bound; 2]),
        Model::Cartpole(c) => (vec![-c.force_bound], vec![c.force_bound]),
        Model::Linear(_) => (vec![-1.0], vec![1.0]),
    }
}

pub const SYSTEM_IDS: &[&str] = &[
    "logistic",
    "henon",
    "lorenz",
    "pointmass",
    "cartpole",
    "logistic-control",
    "linear",
];

impl System {
    pub fn logistic() -> Self {
        Model::Logistic(LogisticMap).into()
    }
    pub fn henon() -> Self {
        Model::Henon(HenonMap::default()).into()
    }
    pub fn lorenz() -> Self {
        Model::Lorenz(Lorenz::default()).into()
    }
    pub fn pointmass() -> Self {
        Model::Pointmass(Pointmass::default()).into()
    }
    pub fn pointmass_frictionless() -> Self {
        Model::Pointmass(Pointmass {
            damping: 0.0,
            ..Pointmass::default()
        })
        .into()
    }
    pub fn cartpole(task: CartpoleTask) -> Self {
        Model::Cartpole(Cartpole::new(task)).into()
    }
    pub fn logistic_control() -> Self {
        Model::LogisticControl(LogisticControl::default()).into()
    }
    pub fn linear(rate: f64) -> Self {
        Model::Linear(LinearContraction { rate }).into()
    }

    pub fn id(&self) -> &'static str {
        match &self.model {
            Model::Logistic(_) => "logistic",
            Model::Henon(_) => "henon",
            Model::Lorenz(_) => "lorenz",
            Model::Pointmass(_) => "pointmass",
            Model::Cartpole(_) => "cartpole",
            Model::LogisticControl(_) => "logistic-control",
            Model::Linear(_) => "linear",
        }
    }

    pub fn reward_id(&self) -> &'static str {
        match &self.model {
            Model::Logistic(_) | Model::Henon(_) | Model::Lorenz(_) => "zero",
            Model::Pointmass(_) => "target",
            Model::Cartpole(c) => match c.task {
                CartpoleTask::Balance => "balance",
                CartpoleTask::Swingup => "swingup",
            },
            Model::LogisticControl(_) => "band",
            Model::Linear(_) => "neg-abs",
        }
    }

    pub fn state_dim(&self) -> usize {
        match &self.model {
            Model::Logistic(_) | Model::LogisticControl(_) | Model::Linear(_) => 1,
            Model::Henon(_) => 2,
            Model::Lorenz(_) => 3,
            Model::Pointmass(_) | Model::Cartpole(_) => 4,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    /// Integration step for continuous-time systems, `None` for maps.
    pub fn dt(&self) -> Option<f64> {
        match &self.model {
            Model::Lorenz(l) => Some(l.dt),
            Model::Pointmass(p) => Some(p.dt),
            Model::Cartpole(c) => Some(c.dt),
            _ => None,
        }
    }

    /// Time represented by one step: `dt` for flows, 1 for maps.
    pub fn step_duration(&self) -> f64 {
        self.dt().unwrap_or(1.0)
    }

    pub fn reward_bounds(&self) -> (f64, f64) {
        match &self.model {
            Model::Logistic(_) | Model::Henon(_) | Model::Lorenz(_) => (0.0, 0.0),
            Model::Linear(l) => (-1.0 / (1.0 - l.rate.abs()), 0.0),
            _ => (0.0, 1.0),
        }
    }

    pub fn clamp_action<S: Scalar>(&self, a: &[S]) -> Vec<S> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&x, (&lo, &hi))| x.clamp(lo, hi))
            .collect()
    }

    /// Deterministic transition. Actions are clamped to the bounds first.
    /// No validation is done here; see [`System::step`].
    pub fn transition<S: Scalar>(&self, s: &[S], a: &[S]) -> Vec<S> {
        let a = self.clamp_action(a);
        match &self.model {
            Model::Logistic(_) | Model::LogisticControl(_) => {
                let x = reflect_unit(s[0]);
                vec![a[0] * x * (-x + 1.0)]
            }
            Model::Henon(h) => vec![-s[0].square() * h.a + s[1] + 1.0, s[0] * h.b],
            Model::Lorenz(l) => rk4(s, l.dt, |x| l.vector_field(x)),
            Model::Pointmass(p) => rk4(s, p.dt, |x| p.vector_field(x, &a)),
            Model::Cartpole(c) => rk4(s, c.dt, |x| c.vector_field(x, &a)),
            Model::Linear(l) => vec![s[0] * l.rate + a[0]],
        }
    }

    pub fn check_dims(&self, s: &[f64], a: &[f64]) -> crate::Result<()> {
        if s.len() != self.state_dim() {
            return Err(crate::Error::Dimension {
                what: "state",
                expected: self.state_dim(),
                found: s.len(),
            });
        }
        if a.len() != self.action_dim() {
            return Err(crate::Error::Dimension {
                what: "action",
                expected: self.action_dim(),
                found: a.len(),
            });
        }
        Ok(())
    }

    /// Validated single step on plain numbers.
    pub fn step(&self, s: &[f64], a: &[f64]) -> crate::Result<Vec<f64>> {
        self.check_dims(s, a)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(crate::Error::NonFiniteState);
        }
        let a: Vec<f64> = a.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
        Ok(self.transition(s, &a))
    }

    /// `r(s, a)`; every shipped reward depends on the state only.
    pub fn reward(&self, s: &[f64], _a: &[f64]) -> f64 {
        match &self.model {
            Model::Logistic(_) | Model::Henon(_) | Model::Lorenz(_) => 0.0,
            Model::Pointmass(_) => (-(s[0] * s[0] + s[1] * s[1]) / 0.01).exp(),
            Model::Cartpole(c) => {
                let theta = s[2].sin().atan2(s[2].cos());
                match c.task {
                    CartpoleTask::Balance => (-(theta / 0.3).powi(2)).exp() * (-(s[0] / 1.0).powi(2)).exp(),
                    CartpoleTask::Swingup => 0.5 * (1.0 + theta.cos()) * (-(s[0] / 2.0).powi(2)).exp(),
                }
            }
            Model::LogisticControl(lc) => lc.band(s[0]),
            Model::Linear(_) => -s[0].abs(),
        }
    }

    /// Per-dimension uniform box of the initial-state distribution
    /// (`lo == hi` means the coordinate is fixed).
    pub fn initial_box(&self) -> Vec<(f64, f64)> {
        match &self.model {
            Model::Logistic(_) | Model::LogisticControl(_) => vec![(0.1, 0.9)],
            Model::Henon(_) => vec![(-0.1, 0.1), (-0.1, 0.1)],
            Model::Lorenz(_) => vec![(-5.0, 5.0), (-5.0, 5.0), (20.0, 30.0)],
            Model::Pointmass(_) => vec![(-0.25, 0.25), (-0.25, 0.25), (0.0, 0.0), (0.0, 0.0)],
            Model::Cartpole(c) => {
                let theta = match c.task {
                    CartpoleTask::Balance => (-0.1, 0.1),
                    CartpoleTask::Swingup => (PI - 0.1, PI + 0.1),
                };
                vec![(0.0, 0.0), (0.0, 0.0), theta, (0.0, 0.0)]
            }
            Model::Linear(_) => vec![(0.5, 1.0)],
        }
    }

    pub fn sample_initial(&self, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        self.initial_box()
            .into_iter()
            .map(|(lo, hi)| if lo == hi { lo } else { r.random_range(lo..hi) })
            .collect()
    }

    /// Reason the transition is not differentiable at `(s, a)`, if any.
    pub fn non_smooth_reason(&self, s: &[f64], a: &[f64]) -> Option<String> {
        for (i, ((&x, &lo), &hi)) in a.iter().zip(&self.action_low).zip(&self.action_high).enumerate() {
            if x == lo || x == hi {
                return Some(format!("action {i} sits exactly on its bound {x}"));
            }
        }
        if matches!(self.model, Model::Logistic(_) | Model::LogisticControl(_)) && (s[0] == 0.0 || s[0] == 1.0) {
            return Some(format!("state {} is on the reflecting edge of [0, 1]", s[0]));
        }
        if matches!(self.model, Model::Linear(_)) && s[0] == 0.0 {
            return Some("reward -|x| has a kink at 0".into());
        }
        None
    }
}
