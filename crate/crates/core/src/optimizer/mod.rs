//! Policy improvement: analytic gradient of `J = R + xi * Q` and quasi-Newton search.

pub mod lbfgs;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::belief::GaussianBelief;
use crate::controllers::Policy;
use crate::error::{Error, Result};
use crate::gp::DynamicsModel;
use crate::objectives::{expected_reward_grad, safe_probability_grad, safety_product, safety_product_grad, RewardSpec, SafetySpec};
use crate::propagation::{model_layer, rollout_beliefs, step_backward, PredictedTrajectory};

use lbfgs::{minimize, LbfgsOptions};

/// Gradient norm below which a start point is treated as flat and extra restarts are spent.
pub const FLAT_GRADIENT: f64 = 1e-8;
/// Extra restarts allowed when a flat start is detected.
pub const MAX_FLAT_RESTARTS: usize = 2;
/// Relative scale of restart perturbations.
pub const RESTART_SCALE: f64 = 0.1;

/// Everything the objective depends on besides the policy parameters.
#[derive(Clone, Debug)]
pub struct PolicyContext<'a> {
    pub model: &'a DynamicsModel,
    pub reward: &'a RewardSpec,
    pub safety: Option<&'a SafetySpec>,
    pub init: &'a GaussianBelief,
    pub horizon: usize,
}

impl PolicyContext<'_> {
    fn xi(&self) -> f64 {
        self.safety.map_or(0.0, |s| s.xi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveEval {
    pub j: f64,
    pub reward: f64,
    pub safety: f64,
    pub grad: DVector<f64>,
    /// Set when the rollout left the numerically valid region; `j` is then `-inf`.
    pub diverged: bool,
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Divergence { .. } | Error::NotPsd { .. } | Error::IllConditioned { .. })
}

/// Predicted trajectory with its per-step reward and safe-probability vectors filled in.
pub fn predict(policy: &Policy, ctx: &PolicyContext<'_>) -> Result<PredictedTrajectory> {
    let mut traj = rollout_beliefs(ctx.model, policy, ctx.init, ctx.horizon)?;
    crate::objectives::annotate(&mut traj, ctx.reward, ctx.safety)?;
    Ok(traj)
}

pub fn objective_and_gradient(theta: &[f64], template: &Policy, ctx: &PolicyContext<'_>) -> Result<ObjectiveEval> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("policy parameters must be finite".into()));
    }
    let policy = template.with_theta(theta)?;
    let diverged = || ObjectiveEval {
        j: f64::NEG_INFINITY,
        reward: f64::NEG_INFINITY,
        safety: 0.0,
        grad: DVector::zeros(theta.len()),
        diverged: true,
    };
    let traj = match rollout_beliefs(ctx.model, &policy, ctx.init, ctx.horizon) {
        Ok(t) => t,
        Err(e) if is_divergence(&e) => return Ok(diverged()),
        Err(e) => return Err(e),
    };
    let h = traj.beliefs.len();
    let n = ctx.init.dim();
    let mut mean_bar = Vec::with_capacity(h);
    let mut cov_bar = Vec::with_capacity(h);
    let mut reward = 0.0;
    let mut qs = Vec::with_capacity(h);
    let mut q_grads = Vec::with_capacity(h);
    for b in &traj.beliefs {
        let g = expected_reward_grad(b, ctx.reward)?;
        reward += g.value;
        mean_bar.push(g.mean);
        cov_bar.push(g.cov);
        if let Some(s) = ctx.safety {
            let q = safe_probability_grad(b, &s.expr, &s.qmc)?;
            qs.push(q.value);
            q_grads.push(q);
        }
    }
    let safety = if ctx.safety.is_some() { safety_product(&qs) } else { 1.0 };
    let xi = ctx.xi();
    if xi != 0.0 {
        let dq = safety_product_grad(&qs);
        for t in 0..h {
            mean_bar[t] += &q_grads[t].mean * (xi * dq[t]);
            cov_bar[t] += &q_grads[t].cov * (xi * dq[t]);
        }
    }

    let layer = model_layer(ctx.model);
    let mut grad = DVector::zeros(theta.len());
    let mut carry_mean = DVector::<f64>::zeros(n);
    let mut carry_cov = DMatrix::<f64>::zeros(n, n);
    for t in (0..h).rev() {
        let prev = if t == 0 { ctx.init } else { &traj.beliefs[t - 1] };
        let m_bar = &mean_bar[t] + &carry_mean;
        let c_bar = &cov_bar[t] + &carry_cov;
        let sg = step_backward(ctx.model, &layer, &policy, prev, &m_bar, &c_bar)?;
        grad += sg.theta;
        carry_mean = sg.mean;
        carry_cov = sg.cov;
    }
    let j = reward + xi * safety;
    if !j.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Ok(diverged());
    }
    Ok(ObjectiveEval {
        j,
        reward,
        safety,
        grad,
        diverged: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub theta_opt: Vec<f64>,
    pub j_opt: f64,
    pub r_opt: f64,
    pub q_opt: f64,
    pub xi: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub gradient_norm_final: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImproveOptions {
    pub maxiter: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ImproveOptions {
    fn default() -> Self {
        ImproveOptions {
            maxiter: 100,
            restarts: 1,
            seed: 0,
        }
    }
}

/// Maximizes the composite objective starting from `policy`; the result is never worse than the start.
pub fn improve_policy(policy: &Policy, ctx: &PolicyContext<'_>, opts: &ImproveOptions) -> Result<(Policy, OptimizationReport)> {
    if opts.maxiter == 0 {
        return Err(Error::InvalidArgument("maxiter must be at least 1".into()));
    }
    let theta0: Vec<f64> = policy.theta().iter().copied().collect();
    let mut best_theta = theta0.clone();
    let mut best = objective_and_gradient(&theta0, policy, ctx)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut last_error: Option<Error> = None;

    let lopts = LbfgsOptions {
        max_iter: opts.maxiter,
        ..LbfgsOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut runs = opts.restarts.max(1);
    let mut flat_extra = 0;
    let mut run = 0;
    while run < runs {
        let start: Vec<f64> = if run == 0 {
            theta0.clone()
        } else {
            best_theta
                .iter()
                .map(|v| {
                    let sd = RESTART_SCALE * (v.abs() + 1.0);
                    v + Normal::new(0.0, sd).expect("finite sd").sample(&mut rng)
                })
                .collect()
        };
        run += 1;
        let mut failure = None;
        let res = minimize(
            |x: &[f64]| match objective_and_gradient(x, policy, ctx) {
                Ok(e) if !e.diverged => (-e.j, e.grad.iter().map(|g| -g).collect()),
                Ok(_) => (f64::INFINITY, vec![0.0; x.len()]),
                Err(e) => {
                    failure.get_or_insert(e);
                    (f64::INFINITY, vec![0.0; x.len()])
                }
            },
            &start,
            &lopts,
        );
        if let Some(e) = failure {
            log::debug!("objective error during restart {run}: {e}");
            last_error = Some(e);
        }
        iterations += res.iterations;
        let g0 = res.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if res.iterations == 0 && g0 < FLAT_GRADIENT && flat_extra < MAX_FLAT_RESTARTS {
            flat_extra += 1;
            runs += 1;
        }
        if res.f.is_finite() && -res.f > best.j {
            let eval = objective_and_gradient(&res.x, policy, ctx)?;
            if !eval.diverged && eval.j > best.j {
                best = eval;
                best_theta = res.x.clone();
                converged = res.converged;
            }
        }
    }
    if best.diverged {
        return Err(Error::OptimizationFailed(format!(
            "every restart diverged{}",
            last_error.map(|e| format!(" (last error: {e})")).unwrap_or_default()
        )));
    }
    let report = OptimizationReport {
        gradient_norm_final: best.grad.norm(),
        theta_opt: best_theta.clone(),
        j_opt: best.j,
        r_opt: best.reward,
        q_opt: best.safety,
        xi: ctx.xi(),
        iterations_used: iterations,
        converged,
    };
    Ok((policy.with_theta(&best_theta)?, report))
}
