//! Simulated control tasks with a uniform episodic API and ground-truth safety checks.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::controllers::Bound;
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::cholesky_with_jitter;
use crate::objectives::{BoxConstraint, ConstraintExpr};

pub const REGISTRY: [&str; 4] = ["linear_cars", "mountain_car", "pendulum_swingup", "cartpole"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    /// Dimension of the observation seen by the learner.
    pub state_dim: usize,
    pub control_dim: usize,
    pub control_bounds: Vec<Bound>,
    /// Simulator step in seconds.
    pub dt: f64,
    /// Initial distribution of the latent simulator state.
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    pub observation_noise_std: Vec<f64>,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.control_dim == 0 {
            return Err(Error::InvalidArgument("environment dimensions must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        ensure_dim("control bounds", self.control_dim, self.control_bounds.len())?;
        ensure_dim("observation noise", self.state_dim, self.observation_noise_std.len())?;
        ensure_dim("initial covariance", self.init_mean.len(), self.init_cov.nrows())?;
        ensure_dim("initial covariance", self.init_mean.len(), self.init_cov.ncols())?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearCarsParams {
    pub dt: f64,
    pub mass: f64,
    pub u_max: f64,
    /// Half-width of the junction zone.
    pub junction: f64,
}

impl Default for LinearCarsParams {
    fn default() -> Self {
        LinearCarsParams {
            dt: 0.1,
            mass: 1.0,
            u_max: 2.0,
            junction: 1.0,
        }
    }
}

/// Car 1 is pushed by `u`; car 2 coasts.
pub fn linear_cars_step(state: &[f64; 4], u: f64, p: &LinearCarsParams) -> [f64; 4] {
    let [p1, v1, p2, v2] = *state;
    [p1 + p.dt * v1, v1 + p.dt * u / p.mass, p2 + p.dt * v2, v2]
}

pub fn linear_cars_safe(state: &[f64], junction: f64) -> bool {
    state[0].abs() > junction || state[2].abs() > junction
}

/// Returns `(next, reward, terminal)`.
pub fn mountain_car_step(state: &[f64; 2], u: f64) -> ([f64; 2], f64, bool) {
    let [mut position, mut velocity] = *state;
    let force = u.clamp(-1.0, 1.0);
    velocity += force * 0.0015 - 0.0025 * (3.0 * position).cos();
    velocity = velocity.clamp(-0.07, 0.07);
    position += velocity;
    position = position.clamp(-1.2, 0.6);
    if position == -1.2 && velocity < 0.0 {
        velocity = 0.0;
    }
    let done = position >= 0.45 && velocity >= 0.0;
    let reward = if done { 100.0 } else { 0.0 } - 0.1 * u * u;
    ([position, velocity], reward, done)
}

pub fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Latent state `[angle, angular velocity]` with angle 0 upright. Returns `(next, reward)`.
pub fn pendulum_step(state: &[f64; 2], u: f64) -> ([f64; 2], f64) {
    let (g, m, l, dt) = (10.0, 1.0, 1.0, 0.05);
    let [th, thdot] = *state;
    let u = u.clamp(-2.0, 2.0);
    let cost = angle_normalize(th).powi(2) + 0.1 * thdot * thdot + 0.001 * u * u;
    let newthdot = thdot + (-3.0 * g / (2.0 * l) * (th + PI).sin() + 3.0 / (m * l * l) * u) * dt;
    let newth = th + newthdot * dt;
    ([newth, newthdot.clamp(-8.0, 8.0)], -cost)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub half_length: f64,
    pub gravity: f64,
    pub dt: f64,
    pub force_max: f64,
    pub angle_threshold: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            gravity: 9.8,
            dt: 0.02,
            force_max: 10.0,
            angle_threshold: 12.0 * 2.0 * PI / 360.0,
        }
    }
}

pub fn cartpole_derivative(s: &[f64; 4], force: f64, p: &CartPoleParams) -> [f64; 4] {
    let [_, xd, th, thd] = *s;
    let total = p.cart_mass + p.pole_mass;
    let pml = p.pole_mass * p.half_length;
    let (sin, cos) = th.sin_cos();
    let temp = (force + pml * thd * thd * sin) / total;
    let thacc = (p.gravity * sin - cos * temp) / (p.half_length * (4.0 / 3.0 - p.pole_mass * cos * cos / total));
    let xacc = temp - pml * thacc * cos / total;
    [xd, xacc, thd, thacc]
}

/// One RK4 step of length `dt`.
pub fn cartpole_integrate(s: &[f64; 4], force: f64, dt: f64, p: &CartPoleParams) -> [f64; 4] {
    let add = |a: &[f64; 4], k: &[f64; 4], h: f64| std::array::from_fn::<f64, 4, _>(|i| a[i] + h * k[i]);
    let k1 = cartpole_derivative(s, force, p);
    let k2 = cartpole_derivative(&add(s, &k1, dt / 2.0), force, p);
    let k3 = cartpole_derivative(&add(s, &k2, dt / 2.0), force, p);
    let k4 = cartpole_derivative(&add(s, &k3, dt), force, p);
    std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Returns `(next, reward, terminal)`; reward is +1 while the pole is within the threshold.
pub fn cartpole_step(state: &[f64; 4], u: f64, p: &CartPoleParams) -> ([f64; 4], f64, bool) {
    let next = cartpole_integrate(state, u.clamp(-p.force_max, p.force_max), p.dt, p);
    let upright = next[2].abs() <= p.angle_threshold;
    (next, if upright { 1.0 } else { 0.0 }, !upright)
}

/// Total mechanical energy of the unforced cart-pole.
pub fn cartpole_energy(s: &[f64; 4], p: &CartPoleParams) -> f64 {
    let [_, xd, th, thd] = *s;
    let total = p.cart_mass + p.pole_mass;
    let (m, l) = (p.pole_mass, p.half_length);
    0.5 * total * xd * xd + m * l * xd * thd * th.cos() + 2.0 / 3.0 * m * l * l * thd * thd + m * p.gravity * l * th.cos()
}

/// Replaces each listed angle coordinate by its `(cos, sin)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigEncoding {
    pub angle_dims: Vec<usize>,
}

impl TrigEncoding {
    pub fn encoded_dim(&self, latent_dim: usize) -> usize {
        latent_dim + self.angle_dims.len()
    }

    pub fn encode(&self, latent: &DVector<f64>) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.encoded_dim(latent.len()));
        for (i, v) in latent.iter().enumerate() {
            if self.angle_dims.contains(&i) {
                out.push(v.cos());
                out.push(v.sin());
            } else {
                out.push(*v);
            }
        }
        DVector::from_vec(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dynamics {
    LinearCars(LinearCarsParams),
    MountainCar,
    Pendulum,
    CartPole(CartPoleParams),
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observation: DVector<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// A single-owner simulator instance.
#[derive(Clone, Debug)]
pub struct Environment {
    spec: EnvSpec,
    dynamics: Dynamics,
    encoding: Option<TrigEncoding>,
    safe_set: Option<ConstraintExpr>,
    scaling: Option<ObservationScaling>,
    latent: DVector<f64>,
}

/// Affine map from simulator observations to learner coordinates: `(obs - offset) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationScaling {
    pub offset: DVector<f64>,
    pub scale: DVector<f64>,
}

impl ObservationScaling {
    pub fn new(offset: DVector<f64>, scale: DVector<f64>) -> Result<Self> {
        ensure_dim("observation scale", offset.len(), scale.len())?;
        if scale.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("observation scales must be positive and offsets finite".into()));
        }
        Ok(ObservationScaling { offset, scale })
    }

    pub fn apply(&self, raw: &DVector<f64>) -> DVector<f64> {
        (raw - &self.offset).component_div(&self.scale)
    }

    pub fn invert(&self, scaled: &DVector<f64>) -> DVector<f64> {
        scaled.component_mul(&self.scale) + &self.offset
    }
}

impl Environment {
    pub fn new(spec: EnvSpec, dynamics: Dynamics, encoding: Option<TrigEncoding>) -> Result<Self> {
        spec.validate()?;
        let latent_dim = match dynamics {
            Dynamics::LinearCars(_) | Dynamics::CartPole(_) => 4,
            Dynamics::MountainCar | Dynamics::Pendulum => 2,
        };
        ensure_dim("initial mean", latent_dim, spec.init_mean.len())?;
        let obs_dim = encoding.as_ref().map_or(latent_dim, |e| e.encoded_dim(latent_dim));
        ensure_dim("observation dim", obs_dim, spec.state_dim)?;
        let latent = spec.init_mean.clone();
        Ok(Environment {
            spec,
            dynamics,
            encoding,
            safe_set: None,
            scaling: None,
            latent,
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn latent(&self) -> &DVector<f64> {
        &self.latent
    }

    pub fn safe_set(&self) -> Option<&ConstraintExpr> {
        self.safe_set.as_ref()
    }

    pub fn with_safe_set(mut self, expr: Option<ConstraintExpr>) -> Self {
        self.safe_set = expr;
        self
    }

    /// Replaces the latent initial distribution.
    pub fn with_initial_distribution(mut self, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        ensure_dim("initial mean", self.latent.len(), mean.len())?;
        self.spec.init_mean = mean;
        self.spec.init_cov = cov;
        self.spec.validate()?;
        Ok(self)
    }

    /// Per-dimension observation noise standard deviations.
    pub fn with_observation_noise(mut self, std: Vec<f64>) -> Self {
        self.spec.observation_noise_std = std;
        self
    }

    /// Observations are reported as `(obs - offset) / scale`; the safe set is checked on the scaled values.
    pub fn with_observation_scaling(mut self, scaling: Option<ObservationScaling>) -> Result<Self> {
        if let Some(s) = &scaling {
            ensure_dim("observation scaling", self.spec.state_dim, s.offset.len())?;
        }
        self.scaling = scaling;
        Ok(self)
    }

    pub fn scaling(&self) -> Option<&ObservationScaling> {
        self.scaling.as_ref()
    }

    /// Maps a learner-coordinate observation back to simulator units.
    pub fn unscale(&self, observation: &DVector<f64>) -> DVector<f64> {
        self.scaling.as_ref().map_or_else(|| observation.clone(), |s| s.invert(observation))
    }

    pub fn has_encoding(&self) -> bool {
        self.encoding.is_some()
    }

    /// Ground-truth safety of an observation.
    pub fn is_safe(&self, observation: &DVector<f64>) -> bool {
        self.safe_set.as_ref().map_or(true, |e| e.is_safe(observation))
    }

    fn clean_observation(&self) -> DVector<f64> {
        match &self.encoding {
            Some(e) => e.encode(&self.latent),
            None => self.latent.clone(),
        }
    }

    fn observe<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let mut obs = self.clean_observation();
        for (o, sd) in obs.iter_mut().zip(&self.spec.observation_noise_std) {
            if *sd > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                *o += sd * z;
            }
        }
        match &self.scaling {
            Some(s) => s.apply(&obs),
            None => obs,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<DVector<f64>> {
        let n = self.spec.init_mean.len();
        let chol = cholesky_with_jitter(&self.spec.init_cov)?;
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        self.latent = &self.spec.init_mean + chol.factor.l() * z;
        Ok(self.observe(rng))
    }

    /// Sets the latent state directly (for tests and replay).
    pub fn set_latent(&mut self, latent: DVector<f64>) -> Result<()> {
        ensure_dim("latent state", self.latent.len(), latent.len())?;
        self.latent = latent;
        Ok(())
    }

    pub fn step<R: Rng + ?Sized>(&mut self, control: &DVector<f64>, rng: &mut R) -> Result<StepOutcome> {
        ensure_dim("control", self.spec.control_dim, control.len())?;
        let mut u = control[0];
        let b = self.spec.control_bounds[0];
        if u < b.lower || u > b.upper {
            log::warn!("{}: control {u} outside [{}, {}], clipping", self.spec.name, b.lower, b.upper);
            u = b.clip(u);
        }
        let s = &self.latent;
        let (next, reward, terminal) = match &self.dynamics {
            Dynamics::LinearCars(p) => {
                let n = linear_cars_step(&[s[0], s[1], s[2], s[3]], u, p);
                (n.to_vec(), n[0], false)
            }
            Dynamics::MountainCar => {
                let (n, r, d) = mountain_car_step(&[s[0], s[1]], u);
                (n.to_vec(), r, d)
            }
            Dynamics::Pendulum => {
                let (n, r) = pendulum_step(&[s[0], s[1]], u);
                (n.to_vec(), r, false)
            }
            Dynamics::CartPole(p) => {
                let (n, r, d) = cartpole_step(&[s[0], s[1], s[2], s[3]], u, p);
                (n.to_vec(), r, d)
            }
        };
        self.latent = DVector::from_vec(next);
        Ok(StepOutcome {
            observation: self.observe(rng),
            reward,
            terminal,
        })
    }
}

fn bound(lower: f64, upper: f64) -> Bound {
    Bound::new(lower, upper).expect("static bounds are ordered")
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(v))
}

/// Default junction constraint for the two-car task.
pub fn linear_cars_constraint(junction: f64) -> ConstraintExpr {
    ConstraintExpr::Or(vec![
        ConstraintExpr::Box(BoxConstraint::outside(0, -junction, junction)),
        ConstraintExpr::Box(BoxConstraint::outside(2, -junction, junction)),
    ])
}

/// Builds a registered environment with its default constants.
pub fn make_env(name: &str) -> Result<Environment> {
    match name {
        "linear_cars" => {
            let p = LinearCarsParams::default();
            let spec = EnvSpec {
                name: name.into(),
                state_dim: 4,
                control_dim: 1,
                control_bounds: vec![bound(-p.u_max, p.u_max)],
                dt: p.dt,
                init_mean: DVector::from_vec(vec![-5.0, 0.0, -3.0, 1.0]),
                init_cov: DMatrix::identity(4, 4) * 0.1,
                observation_noise_std: vec![0.01; 4],
            };
            Ok(Environment::new(spec, Dynamics::LinearCars(p), None)?.with_safe_set(Some(linear_cars_constraint(p.junction))))
        }
        "mountain_car" => {
            let spec = EnvSpec {
                name: name.into(),
                state_dim: 2,
                control_dim: 1,
                control_bounds: vec![bound(-1.0, 1.0)],
                dt: 1.0,
                init_mean: DVector::from_vec(vec![-0.5, 0.0]),
                init_cov: diag(&[0.04 / 12.0, 1e-8]),
                observation_noise_std: vec![0.0; 2],
            };
            Environment::new(spec, Dynamics::MountainCar, None)
        }
        "pendulum_swingup" => {
            let spec = EnvSpec {
                name: name.into(),
                state_dim: 3,
                control_dim: 1,
                control_bounds: vec![bound(-2.0, 2.0)],
                dt: 0.05,
                init_mean: DVector::from_vec(vec![PI, 0.0]),
                init_cov: diag(&[0.01, 0.01]),
                observation_noise_std: vec![0.0; 3],
            };
            Environment::new(spec, Dynamics::Pendulum, Some(TrigEncoding { angle_dims: vec![0] }))
        }
        "cartpole" => {
            let p = CartPoleParams::default();
            let spec = EnvSpec {
                name: name.into(),
                state_dim: 4,
                control_dim: 1,
                control_bounds: vec![bound(-p.force_max, p.force_max)],
                dt: p.dt,
                init_mean: DVector::zeros(4),
                init_cov: DMatrix::identity(4, 4) * 0.01,
                observation_noise_std: vec![0.0; 4],
            };
            Environment::new(spec, Dynamics::CartPole(p), None)
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown environment '{other}', expected one of {}",
            REGISTRY.join(", ")
        ))),
    }
}
