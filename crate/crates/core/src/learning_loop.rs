//! Training loop: random rollouts, model refits, policy improvement and the safety gate.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::GaussianBelief;
use crate::controllers::Policy;
use crate::environments::Environment;
use crate::error::{ensure_dim, Error, Result};
use crate::gp::{fit_with_options, DynamicsModel, FitOptions, HyperPenalty, HyperPrior, RegressionDataset};
use crate::objectives::{RewardSpec, SafetySpec};
use crate::optimizer::{improve_policy, ImproveOptions, PolicyContext};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub epsilon: f64,
    pub xi_up: f64,
    pub xi_down: f64,
    pub conservative_fraction: f64,
    pub xi_min: f64,
    pub max_retries: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            epsilon: 0.05,
            xi_up: 2.0,
            xi_down: 0.7,
            conservative_fraction: 0.25,
            xi_min: 1e-2,
            max_retries: 5,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.xi_up > 1.0) {
            return bad("xi_up must exceed 1");
        }
        if !(self.xi_down > 0.0 && self.xi_down < 1.0) {
            return bad("xi_down must lie in (0, 1)");
        }
        if !(self.conservative_fraction > 0.0 && self.conservative_fraction < 1.0) {
            return bad("conservative_fraction must lie in (0, 1)");
        }
        if !(self.xi_min > 0.0) {
            return bad("xi_min must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Deploy,
    Blocked,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub decision: GateDecision,
    pub risk: f64,
    pub xi_before: f64,
    pub xi_after: f64,
}

/// Blocks when `1 - q_pred > epsilon`; raises xi on a block and lowers it when the risk is well under the threshold.
pub fn safety_gate(q_pred: f64, xi: f64, cfg: &GateConfig) -> Result<GateOutcome> {
    if !(0.0..=1.0).contains(&q_pred) {
        return Err(Error::InvalidArgument(format!("predicted safety {q_pred} is not a probability")));
    }
    let risk = 1.0 - q_pred;
    let (decision, xi_after) = if risk > cfg.epsilon {
        (GateDecision::Blocked, xi * cfg.xi_up)
    } else if risk <= cfg.conservative_fraction * cfg.epsilon {
        (GateDecision::Deploy, (xi * cfg.xi_down).max(cfg.xi_min))
    } else {
        (GateDecision::Deploy, xi)
    };
    Ok(GateOutcome {
        decision,
        risk,
        xi_before: xi,
        xi_after,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicyConfig {
    Rbf { n_basis: usize },
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fit_restarts: usize,
    pub fit_max_iter: usize,
    pub fixed_noise: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fit_restarts: 2,
            fit_max_iter: 100,
            fixed_noise: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Random rollouts before the first model fit.
    pub initial_rollouts: usize,
    /// Policy-improvement iterations.
    pub episodes: usize,
    pub horizon: usize,
    /// Simulator steps per planning step (zero-order hold).
    pub subs: usize,
    /// Initial planning belief, in observation coordinates.
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    pub xi_init: f64,
    pub gate: GateConfig,
    pub maxiter: usize,
    pub restarts: usize,
    pub normalize: bool,
    pub seed: u64,
    pub policy: PolicyConfig,
    /// Extra evaluation episodes of the deployed policy after each iteration.
    pub eval_repeats: usize,
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.initial_rollouts == 0 || self.episodes == 0 || self.horizon == 0 || self.subs == 0 {
            return bad("J, N, H and SUBS must all be at least 1");
        }
        if self.maxiter == 0 {
            return bad("maxiter must be at least 1");
        }
        ensure_dim("S_init", self.init_mean.len(), self.init_cov.nrows())?;
        ensure_dim("S_init", self.init_mean.len(), self.init_cov.ncols())?;
        GaussianBelief::new(self.init_mean.clone(), self.init_cov.clone())?.check_invariants()?;
        if !(self.xi_init >= 0.0) || !self.xi_init.is_finite() {
            return bad("xi_init must be finite and non-negative");
        }
        if let PolicyConfig::Rbf { n_basis: 0 } = self.policy {
            return bad("RBF policies need at least one basis function");
        }
        self.gate.validate()
    }

    fn init_belief(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.init_mean.clone(),
            cov: self.init_cov.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    Random,
    Learned,
    Blocked,
    Eval,
}

impl EpisodeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EpisodeKind::Random => "random",
            EpisodeKind::Learned => "learned",
            EpisodeKind::Blocked => "blocked",
            EpisodeKind::Eval => "eval",
        }
    }

    /// Episodes whose data feed the model.
    pub fn is_training(&self) -> bool {
        matches!(self, EpisodeKind::Random | EpisodeKind::Learned)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub index: usize,
    pub iteration: usize,
    pub kind: EpisodeKind,
    /// Observed states, one row per planning step, including the initial one.
    pub states: DMatrix<f64>,
    pub controls: DMatrix<f64>,
    pub native_rewards: Vec<f64>,
    pub violated: bool,
    /// Row of `states` where the first violation was observed.
    pub violation_step: Option<usize>,
    pub policy_snapshot: Option<Policy>,
    pub xi: f64,
    pub predicted_risk: Option<f64>,
}

impl EpisodeRecord {
    pub fn steps(&self) -> usize {
        self.controls.nrows()
    }

    pub fn native_return(&self) -> f64 {
        self.native_rewards.iter().fold(0.0, |a, r| a + r)
    }

    pub fn transitions(&self) -> Result<RegressionDataset> {
        let states: Vec<DVector<f64>> = (0..self.states.nrows()).map(|i| self.states.row(i).transpose()).collect();
        let controls: Vec<DVector<f64>> = (0..self.controls.nrows()).map(|i| self.controls.row(i).transpose()).collect();
        RegressionDataset::from_transitions(&states, &controls)
    }

    fn blocked(index: usize, iteration: usize, state_dim: usize, control_dim: usize, policy: &Policy, xi: f64, risk: f64) -> Self {
        EpisodeRecord {
            index,
            iteration,
            kind: EpisodeKind::Blocked,
            states: DMatrix::zeros(0, state_dim),
            controls: DMatrix::zeros(0, control_dim),
            native_rewards: Vec::new(),
            violated: false,
            violation_step: None,
            policy_snapshot: Some(policy.clone()),
            xi,
            predicted_risk: Some(risk),
        }
    }
}

/// Runs one episode of `horizon` planning steps, holding each control for `subs` simulator steps.
/// Stops at a terminal state or at the first observed constraint violation.
pub fn execute_episode<R, C>(env: &mut Environment, mut controller: C, horizon: usize, subs: usize, rng: &mut R) -> Result<EpisodeRecord>
where
    R: Rng + ?Sized,
    C: FnMut(&DVector<f64>, &mut R) -> Result<DVector<f64>>,
{
    let n = env.spec().state_dim;
    let m = env.spec().control_dim;
    let mut obs = env.reset(rng)?;
    let mut states = vec![obs.clone()];
    let mut controls = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut violation_step = None;
    'episode: for t in 0..horizon {
        let u = controller(&obs, rng)?;
        ensure_dim("controller output", m, u.len())?;
        let mut total = 0.0;
        let mut terminal = false;
        for _ in 0..subs {
            let out = env.step(&u, rng)?;
            total += out.reward;
            obs = out.observation;
            if out.terminal {
                terminal = true;
                break;
            }
        }
        states.push(obs.clone());
        controls.push(u);
        rewards.push(total);
        if !env.is_safe(&obs) {
            violation_step = Some(t + 1);
            break 'episode;
        }
        if terminal {
            break;
        }
    }
    let states = DMatrix::from_fn(states.len(), n, |i, d| states[i][d]);
    let controls = DMatrix::from_fn(controls.len(), m, |i, d| controls[i][d]);
    Ok(EpisodeRecord {
        index: 0,
        iteration: 0,
        kind: EpisodeKind::Random,
        states,
        controls,
        native_rewards: rewards,
        violated: violation_step.is_some(),
        violation_step,
        policy_snapshot: None,
        xi: 0.0,
        predicted_risk: None,
    })
}

/// Episodes with controls drawn uniformly within the bounds.
pub fn collect_random_rollouts<R: Rng + ?Sized>(env: &mut Environment, config: &RunConfig, rng: &mut R) -> Result<Vec<EpisodeRecord>> {
    let bounds = env.spec().control_bounds.clone();
    (0..config.initial_rollouts)
        .map(|i| {
            let mut rec = execute_episode(
                env,
                |_, r: &mut R| Ok(DVector::from_iterator(bounds.len(), bounds.iter().map(|b| r.gen_range(b.lower..=b.upper)))),
                config.horizon,
                config.subs,
                rng,
            )?;
            rec.index = i;
            Ok(rec)
        })
        .collect()
}

/// Mutable state of one experiment.
#[derive(Clone, Debug)]
pub struct TrainingState {
    pub model: DynamicsModel,
    /// Starting point for the next policy optimization.
    pub policy: Policy,
    /// Last policy that passed the gate.
    pub deployed: Option<Policy>,
    pub safety: Option<SafetySpec>,
    pub history: Vec<EpisodeRecord>,
    pub iteration: usize,
}

impl TrainingState {
    pub fn xi(&self) -> f64 {
        self.safety.as_ref().map_or(0.0, |s| s.xi)
    }

    fn next_index(&self) -> usize {
        self.history.len()
    }
}

fn fit_options(config: &RunConfig, salt: u64) -> FitOptions {
    FitOptions {
        restarts: config.model.fit_restarts,
        fixed_noise: config.model.fixed_noise,
        max_iter: config.model.fit_max_iter,
        seed: config.seed.wrapping_mul(1_000_003).wrapping_add(salt),
        normalize: config.normalize,
        penalty: Some(HyperPenalty::default()),
    }
}

fn fit_model(dataset: RegressionDataset, previous: Option<&DynamicsModel>, config: &RunConfig, salt: u64) -> Result<DynamicsModel> {
    let start = match previous {
        Some(p) => DynamicsModel::with_hyperparams(dataset, p.hyperparams())?,
        None => DynamicsModel::new(dataset)?,
    };
    fit_with_options(&start, &HyperPrior::none(), &fit_options(config, salt))
}

fn initial_policy<R: Rng + ?Sized>(env: &Environment, data: &RegressionDataset, config: &RunConfig, rng: &mut R) -> Result<Policy> {
    let n = env.spec().state_dim;
    let bounds = env.spec().control_bounds.clone();
    match config.policy {
        PolicyConfig::Linear => Policy::linear(DMatrix::zeros(bounds.len(), n), DVector::zeros(bounds.len()), bounds),
        PolicyConfig::Rbf { n_basis } => {
            let rows = data.n_points() as f64;
            let mean = DVector::from_fn(n, |d, _| data.inputs().column(d).sum() / rows);
            let var = DVector::from_fn(n, |d, _| {
                let c = data.inputs().column(d);
                (c.iter().map(|v| (v - mean[d]).powi(2)).sum::<f64>() / rows).max(1e-6)
            });
            let spread = GaussianBelief::new(mean, DMatrix::from_diagonal(&var))?;
            Policy::random_rbf(n_basis, &spread, &DVector::zeros(n), bounds, rng)
        }
    }
}

/// Consumer of finished episodes, called as soon as each one is recorded.
pub trait EpisodeSink {
    fn record(&mut self, episode: &EpisodeRecord) -> Result<()>;
}

impl<F: FnMut(&EpisodeRecord) -> Result<()>> EpisodeSink for F {
    fn record(&mut self, episode: &EpisodeRecord) -> Result<()> {
        self(episode)
    }
}

/// Discards episodes.
pub struct NullSink;

impl EpisodeSink for NullSink {
    fn record(&mut self, _: &EpisodeRecord) -> Result<()> {
        Ok(())
    }
}

/// One experiment: environment, objective and all the state that evolves during training.
pub struct Experiment<'a> {
    pub env: Environment,
    pub config: RunConfig,
    pub reward: RewardSpec,
    rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    sink: &'a mut dyn EpisodeSink,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub history: Vec<EpisodeRecord>,
    pub final_state: TrainingState,
}

impl ExperimentResult {
    pub fn violations(&self) -> usize {
        count_violations(&self.history)
    }

    pub fn blocked(&self) -> usize {
        count_blocked(&self.history)
    }

    pub fn best_safe_return(&self) -> Option<f64> {
        best_safe_return(&self.history)
    }
}

/// Violations among training episodes.
pub fn count_violations(history: &[EpisodeRecord]) -> usize {
    history.iter().filter(|e| e.kind.is_training() && e.violated).count()
}

pub fn count_blocked(history: &[EpisodeRecord]) -> usize {
    history.iter().filter(|e| e.kind == EpisodeKind::Blocked).count()
}

/// Highest return among non-violating episodes of learned policies.
pub fn best_safe_return(history: &[EpisodeRecord]) -> Option<f64> {
    history
        .iter()
        .filter(|e| matches!(e.kind, EpisodeKind::Learned | EpisodeKind::Eval) && !e.violated)
        .map(|e| e.native_return())
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))))
}

impl<'a> Experiment<'a> {
    pub fn new(env: Environment, config: RunConfig, reward: RewardSpec, sink: &'a mut dyn EpisodeSink) -> Result<Self> {
        config.validate()?;
        reward.validate()?;
        ensure_dim("S_init vs environment", env.spec().state_dim, config.init_mean.len())?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed);
        eval_rng.set_stream(1);
        Ok(Experiment {
            env,
            config,
            reward,
            rng,
            eval_rng,
            sink,
        })
    }

    fn emit(&mut self, state: &mut TrainingState, mut rec: EpisodeRecord) -> Result<()> {
        rec.index = state.next_index();
        rec.iteration = state.iteration;
        self.sink.record(&rec)?;
        state.history.push(rec);
        Ok(())
    }

    /// Random rollouts, first model fit and initial policy.
    /// The safety spec's weight is reset to `xi_init`.
    pub fn initialize(&mut self, mut safety: Option<SafetySpec>) -> Result<TrainingState> {
        if let Some(s) = safety.as_mut() {
            s.xi = self.config.xi_init;
            s.validate()?;
        }
        let records = collect_random_rollouts(&mut self.env, &self.config, &mut self.rng)?;
        let mut data: Option<RegressionDataset> = None;
        for r in &records {
            if r.steps() == 0 {
                continue;
            }
            let part = r.transitions()?;
            data = Some(match data {
                Some(d) => d.append(&part)?,
                None => part,
            });
        }
        let data = data.ok_or_else(|| Error::InvalidArgument("random rollouts produced no transitions".into()))?;
        let model = fit_model(data, None, &self.config, 0)?;
        let policy = initial_policy(&self.env, model.dataset(), &self.config, &mut self.rng)?;
        let mut state = TrainingState {
            model,
            policy,
            deployed: None,
            safety,
            history: Vec::new(),
            iteration: 0,
        };
        for rec in records {
            self.emit(&mut state, rec)?;
        }
        Ok(state)
    }

    /// Improve, gate (with bounded retries), deploy, refit.
    pub fn training_iteration(&mut self, state: &mut TrainingState) -> Result<()> {
        state.iteration += 1;
        let init = self.config.init_belief();
        let attempts = 1 + if state.safety.is_some() { self.config.gate.max_retries } else { 0 };
        let n = self.env.spec().state_dim;
        let m = self.env.spec().control_dim;
        let mut deploy: Option<(Policy, f64)> = None;
        for attempt in 0..attempts {
            let ctx = PolicyContext {
                model: &state.model,
                reward: &self.reward,
                safety: state.safety.as_ref(),
                init: &init,
                horizon: self.config.horizon,
            };
            let opts = ImproveOptions {
                maxiter: self.config.maxiter,
                restarts: self.config.restarts,
                seed: self.config.seed.wrapping_mul(7919).wrapping_add((state.iteration * 64 + attempt) as u64),
            };
            let (candidate, report) = improve_policy(&state.policy, &ctx, &opts)?;
            log::info!(
                "iteration {} attempt {attempt}: J {:.4} R {:.4} Q {:.4} xi {:.4}",
                state.iteration,
                report.j_opt,
                report.r_opt,
                report.q_opt,
                report.xi
            );
            state.policy = candidate.clone();
            let Some(spec) = state.safety.as_mut() else {
                deploy = Some((candidate, 0.0));
                break;
            };
            let gate = safety_gate(report.q_opt.clamp(0.0, 1.0), spec.xi, &self.config.gate)?;
            spec.xi = gate.xi_after;
            match gate.decision {
                GateDecision::Deploy => {
                    deploy = Some((candidate, gate.risk));
                    break;
                }
                GateDecision::Blocked => {
                    log::info!("blocked: predicted risk {:.4} > {}", gate.risk, self.config.gate.epsilon);
                    let rec = EpisodeRecord::blocked(0, 0, n, m, &candidate, gate.xi_before, gate.risk);
                    self.emit(state, rec)?;
                }
            }
        }
        if let Some((policy, risk)) = deploy {
            if state.safety.is_some() {
                assert!(risk <= self.config.gate.epsilon, "deploying a policy with predicted risk {risk}");
            }
            let mut rec = execute_episode(&mut self.env, |x, _| policy.act(x), self.config.horizon, self.config.subs, &mut self.rng)?;
            rec.kind = EpisodeKind::Learned;
            rec.policy_snapshot = Some(policy.clone());
            rec.xi = state.xi();
            rec.predicted_risk = state.safety.as_ref().map(|_| risk);
            let new_data = (rec.steps() > 0).then(|| rec.transitions()).transpose()?;
            self.emit(state, rec)?;
            if let Some(d) = new_data {
                let data = state.model.dataset().append(&d)?;
                state.model = fit_model(data, Some(&state.model), &self.config, state.iteration as u64)?;
            }
            state.deployed = Some(policy);
        }
        if let Some(policy) = state.deployed.clone() {
            for _ in 0..self.config.eval_repeats {
                let mut rec = execute_episode(&mut self.env, |x, _| policy.act(x), self.config.horizon, self.config.subs, &mut self.eval_rng)?;
                rec.kind = EpisodeKind::Eval;
                rec.xi = state.xi();
                self.emit(state, rec)?;
            }
        }
        Ok(())
    }

    /// Runs the full experiment; a failure carries the number of completed episodes.
    pub fn run(mut self, safety: Option<SafetySpec>) -> Result<ExperimentResult> {
        let wrap = |done: usize, e: Error| match e {
            Error::Experiment { .. } => e,
            other => Error::Experiment {
                completed_episodes: done,
                source: Box::new(other),
            },
        };
        let mut state = self.initialize(safety).map_err(|e| wrap(0, e))?;
        for _ in 0..self.config.episodes {
            if let Err(e) = self.training_iteration(&mut state) {
                return Err(wrap(state.history.len(), e));
            }
        }
        Ok(ExperimentResult {
            history: state.history.clone(),
            final_state: state,
        })
    }
}

/// Convenience wrapper: runs an experiment, streaming each episode into `sink`.
pub fn run_experiment(
    env: Environment,
    config: &RunConfig,
    reward: &RewardSpec,
    safety: Option<SafetySpec>,
    sink: &mut dyn EpisodeSink,
) -> Result<ExperimentResult> {
    Experiment::new(env, config.clone(), reward.clone(), sink)?.run(safety)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::make_env;
    use crate::objectives::{BoxConstraint, ConstraintExpr};

    fn gate() -> GateConfig {
        GateConfig::default()
    }

    #[test]
    fn gate_blocks_risky_policy_and_raises_xi() {
        let out = safety_gate(0.90, 10.0, &gate()).unwrap();
        assert_eq!(out.decision, GateDecision::Blocked);
        assert!((out.risk - 0.1).abs() < 1e-15);
        assert_eq!(out.xi_after, 20.0);
    }

    #[test]
    fn gate_conservative_branch_lowers_xi() {
        let out = safety_gate(0.999, 10.0, &gate()).unwrap();
        assert_eq!(out.decision, GateDecision::Deploy);
        assert!((out.xi_after - 7.0).abs() < 1e-12);
        let floored = safety_gate(1.0, 0.011, &gate()).unwrap();
        assert_eq!(floored.xi_after, 0.01);
    }

    #[test]
    fn gate_middle_branch_keeps_xi() {
        let out = safety_gate(0.96, 10.0, &gate()).unwrap();
        assert_eq!(out.decision, GateDecision::Deploy);
        assert_eq!(out.xi_after, 10.0);
        assert!(safety_gate(1.2, 1.0, &gate()).is_err());
    }

    pub(crate) fn mountain_config(seed: u64) -> RunConfig {
        RunConfig {
            initial_rollouts: 2,
            episodes: 1,
            horizon: 25,
            subs: 5,
            init_mean: DVector::from_vec(vec![-0.5, 0.0]),
            init_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![0.0033, 1e-6])),
            xi_init: 0.0,
            gate: gate(),
            maxiter: 5,
            restarts: 1,
            normalize: true,
            seed,
            policy: PolicyConfig::Rbf { n_basis: 5 },
            eval_repeats: 1,
            model: ModelConfig {
                fit_restarts: 1,
                fit_max_iter: 30,
                fixed_noise: None,
            },
        }
    }

    #[test]
    fn random_rollouts_respect_bounds_and_length() {
        let mut env = make_env("mountain_car").unwrap();
        let cfg = mountain_config(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recs = collect_random_rollouts(&mut env, &cfg, &mut rng).unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            assert!(r.steps() <= 25);
            assert_eq!(r.states.nrows(), r.steps() + 1);
            assert!(r.controls.iter().all(|u| (-1.0..=1.0).contains(u)));
        }
        let mut env2 = make_env("mountain_car").unwrap();
        let again = collect_random_rollouts(&mut env2, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(recs, again);
    }

    #[test]
    fn violation_truncates_episode() {
        let mut env = make_env("linear_cars").unwrap();
        env = env
            .with_initial_distribution(DVector::from_vec(vec![-1.5, 1.0, -1.5, 1.0]), DMatrix::identity(4, 4) * 1e-12)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = execute_episode(&mut env, |_, _| Ok(DVector::from_element(1, 0.0)), 25, 1, &mut rng).unwrap();
        assert!(rec.violated);
        let k = rec.violation_step.unwrap();
        assert_eq!(rec.steps(), k);
        assert!(!env.is_safe(&rec.states.row(k).transpose()));
        for i in 0..k {
            assert!(env.is_safe(&rec.states.row(i).transpose()));
        }
    }

    #[test]
    fn short_run_is_deterministic_and_bookkeeping_holds() {
        let run = |seed| {
            let mut sink = NullSink;
            let reward = RewardSpec::exponential_diag(DVector::from_vec(vec![0.5, 0.0]), &[0.3, 0.05]).unwrap();
            run_experiment(make_env("mountain_car").unwrap(), &mountain_config(seed), &reward, None, &mut sink).unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a.history, b.history);
        let executed: usize = a.history.iter().filter(|e| e.kind.is_training()).map(|e| e.steps()).sum();
        assert_eq!(a.final_state.model.dataset().n_points(), executed);
        assert_eq!(a.history.iter().filter(|e| e.kind == EpisodeKind::Learned).count(), 1);
        assert_eq!(a.history.iter().filter(|e| e.kind == EpisodeKind::Eval).count(), 1);
    }

    #[test]
    fn risky_policy_is_never_executed() {
        // a safe set the start state almost surely leaves: every candidate is blocked
        let mut env = make_env("mountain_car").unwrap();
        let expr = ConstraintExpr::Box(BoxConstraint::inside(0, -0.5005, -0.4995));
        env = env.with_safe_set(Some(expr.clone()));
        let mut cfg = mountain_config(2);
        cfg.gate.max_retries = 2;
        cfg.xi_init = 1.0;
        let safety = SafetySpec::new(expr, 0.05, 1.0).unwrap();
        let reward = RewardSpec::exponential_diag(DVector::from_vec(vec![0.5, 0.0]), &[0.3, 0.05]).unwrap();
        let mut sink = NullSink;
        let mut exp = Experiment::new(env, cfg, reward, &mut sink).unwrap();
        let mut state = exp.initialize(Some(safety)).unwrap();
        let before = state.history.len();
        let mut xis = vec![state.xi()];
        exp.training_iteration(&mut state).unwrap();
        let new = &state.history[before..];
        assert_eq!(new.len(), 3);
        assert!(new.iter().all(|e| e.kind == EpisodeKind::Blocked && e.steps() == 0));
        for e in new {
            assert!(e.predicted_risk.unwrap() > 0.05);
            xis.push(e.xi);
        }
        xis.push(state.xi());
        assert!(xis.windows(2).skip(1).all(|w| w[1] > w[0]), "{xis:?}");
        assert!(state.deployed.is_none());
    }

    proptest::proptest! {
        #[test]
        fn xi_rises_only_when_blocked(qs in proptest::collection::vec(0.0f64..=1.0, 1..40), xi0 in 0.01f64..100.0) {
            let cfg = gate();
            let mut xi = xi0;
            for q in qs {
                let g = safety_gate(q, xi, &cfg).unwrap();
                proptest::prop_assert_eq!(g.decision == GateDecision::Blocked, g.risk > cfg.epsilon);
                match g.decision {
                    GateDecision::Blocked => proptest::prop_assert!(g.xi_after > g.xi_before),
                    GateDecision::Deploy => proptest::prop_assert!(g.xi_after <= g.xi_before || g.xi_after == cfg.xi_min),
                }
                xi = g.xi_after;
            }
        }
    }
}
