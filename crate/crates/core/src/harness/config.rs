//! Experiment configuration files.
//!
//! ```toml
//! [env]
//! name = "linear_cars"
//! m_init = [-5.0, 0.0, -3.0, 1.0]
//! S_init = [0.1, 0.1, 0.1, 0.1]
//!
//! [reward]
//! kind = "linear"
//! direction = [1.0, 0.0, 0.0, 0.0]
//!
//! [constraints]
//! th = 0.05
//! combine = "or"
//! box = [
//!   { dim = 0, lower = -1.0, upper = 1.0, mode = "outside" },
//!   { dim = 2, lower = -1.0, upper = 1.0, mode = "outside" },
//! ]
//!
//! [loop]
//! J = 5
//! N = 8
//! H = 25
//! SUBS = 1
//! controller = "rbf"
//! basis = 40
//!
//! [optimizer]
//! maxiter = 20
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::environments::{make_env, Environment, ObservationScaling};
use crate::error::{Error, Result};
use crate::learning_loop::{GateConfig, ModelConfig, PolicyConfig, RunConfig};
use crate::normal::QmcSettings;
use crate::objectives::{BoxConstraint, BoxMode, ConstraintExpr, RewardSpec, SafetySpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn to_matrix(&self, n: usize, field: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Diagonal(d) => {
                if d.len() != n {
                    return Err(config_err(field, format!("expected {n} diagonal entries, got {}", d.len())));
                }
                Ok(DMatrix::from_diagonal(&DVector::from_row_slice(d)))
            }
            MatrixSpec::Full(rows) => {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(config_err(field, format!("expected a {n}x{n} matrix")));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        }
    }
}

fn config_err(location: &str, message: impl Into<String>) -> Error {
    Error::Config {
        location: location.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub name: String,
    /// Where episodes start: the `m_init`/`S_init` distribution or the simulator's own.
    #[serde(default)]
    pub reset: ResetMode,
    pub m_init: Vec<f64>,
    #[serde(rename = "S_init")]
    pub s_init: MatrixSpec,
    #[serde(default)]
    pub observation_noise: Option<Vec<f64>>,
    /// The learner sees `(obs - observation_offset) / observation_scale`; every other
    /// state quantity in the file is in those coordinates.
    #[serde(default)]
    pub observation_offset: Option<Vec<f64>>,
    #[serde(default)]
    pub observation_scale: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    #[default]
    Config,
    Native,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSection {
    Linear {
        direction: Vec<f64>,
    },
    Exponential {
        target: Vec<f64>,
        #[serde(default)]
        widths: Option<Vec<f64>>,
        #[serde(default)]
        weight: Option<Vec<Vec<f64>>>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    And,
    Or,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxEntry {
    pub dim: usize,
    pub lower: f64,
    pub upper: f64,
    #[serde(default)]
    pub mode: BoxMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupEntry {
    #[serde(default)]
    pub combine: Combine,
    #[serde(rename = "box")]
    pub boxes: Vec<BoxEntry>,
}

fn default_xi_init() -> f64 {
    30.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintsSection {
    /// Risk threshold.
    pub th: f64,
    #[serde(default = "default_xi_init")]
    pub xi_init: f64,
    #[serde(default)]
    pub xi_up: Option<f64>,
    #[serde(default)]
    pub xi_down: Option<f64>,
    #[serde(default)]
    pub conservative_fraction: Option<f64>,
    #[serde(default)]
    pub xi_min: Option<f64>,
    #[serde(default)]
    pub max_retries: Option<usize>,
    #[serde(default)]
    pub combine: Combine,
    #[serde(default, rename = "box")]
    pub boxes: Vec<BoxEntry>,
    #[serde(default, rename = "group")]
    pub groups: Vec<GroupEntry>,
    #[serde(default)]
    pub qmc: Option<QmcSettings>,
}

fn default_true() -> bool {
    true
}

fn default_restarts() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopSection {
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "SUBS", default = "one")]
    pub subs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eval_repeats: usize,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default = "default_controller")]
    pub controller: String,
    #[serde(default)]
    pub basis: Option<usize>,
}

fn one() -> usize {
    1
}

fn default_controller() -> String {
    "rbf".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub maxiter: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub fit_restarts: Option<usize>,
    #[serde(default)]
    pub fit_max_iter: Option<usize>,
    #[serde(default)]
    pub fixed_noise: Option<f64>,
}

/// Parsed configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSection,
    pub reward: RewardSection,
    #[serde(default)]
    pub constraints: Option<ConstraintsSection>,
    #[serde(rename = "loop")]
    pub loop_: LoopSection,
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub model: Option<ModelSection>,
}

/// Everything needed to launch a run, validated.
#[derive(Clone, Debug)]
pub struct ResolvedExperiment {
    pub name: String,
    pub env: Environment,
    pub run: RunConfig,
    pub reward: RewardSpec,
    pub safety: Option<SafetySpec>,
}

pub const BUNDLED: [(&str, &str); 4] = [
    ("linear_cars_safe", include_str!("../../../../configs/linear_cars_safe.toml")),
    ("mountain_car", include_str!("../../../../configs/mountain_car.toml")),
    ("pendulum_swingup", include_str!("../../../../configs/pendulum_swingup.toml")),
    ("cartpole", include_str!("../../../../configs/cartpole.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let location = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "config".into());
            config_err(&location, e.message().to_string())
        })
    }

    /// Reads a file, or a bundled config when `path` names one and no such file exists.
    pub fn load(path: &str) -> Result<(String, Self)> {
        let p = Path::new(path);
        let text = if p.exists() {
            std::fs::read_to_string(p)?
        } else if let Some(t) = bundled(path) {
            t.to_string()
        } else {
            return Err(config_err(path, "no such file or bundled config"));
        };
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.into());
        Ok((name, Self::parse(&text)?))
    }

    fn constraint_expr(&self) -> Result<Option<ConstraintExpr>> {
        let Some(c) = &self.constraints else {
            return Ok(None);
        };
        let leaf = |b: &BoxEntry, at: String| -> Result<ConstraintExpr> {
            if !(b.lower < b.upper) {
                return Err(config_err(&at, format!("lower ({}) must be below upper ({})", b.lower, b.upper)));
            }
            Ok(ConstraintExpr::Box(BoxConstraint {
                dim: b.dim,
                lower: b.lower,
                upper: b.upper,
                mode: b.mode,
            }))
        };
        let join = |combine: Combine, items: Vec<ConstraintExpr>| match combine {
            Combine::And => ConstraintExpr::And(items),
            Combine::Or => ConstraintExpr::Or(items),
        };
        let mut items = Vec::new();
        for (i, b) in c.boxes.iter().enumerate() {
            items.push(leaf(b, format!("constraints.box[{i}]"))?);
        }
        for (g, group) in c.groups.iter().enumerate() {
            let inner = group
                .boxes
                .iter()
                .enumerate()
                .map(|(i, b)| leaf(b, format!("constraints.group[{g}].box[{i}]")))
                .collect::<Result<Vec<_>>>()?;
            items.push(join(group.combine, inner));
        }
        if items.is_empty() {
            return Err(config_err("constraints", "at least one box is required"));
        }
        let expr = if items.len() == 1 { items.pop().unwrap() } else { join(c.combine, items) };
        expr.validate().map_err(|e| config_err("constraints", e.to_string()))?;
        Ok(Some(expr))
    }

    pub fn resolve(&self, name: &str, seed_override: Option<u64>) -> Result<ResolvedExperiment> {
        let mut env = make_env(&self.env.name).map_err(|e| config_err("env.name", e.to_string()))?;
        let n = env.spec().state_dim;
        if self.env.m_init.len() != n {
            return Err(config_err("env.m_init", format!("expected {n} entries, got {}", self.env.m_init.len())));
        }
        let init_mean = DVector::from_row_slice(&self.env.m_init);
        let init_cov = self.env.s_init.to_matrix(n, "env.S_init")?;
        let scaling = match (&self.env.observation_offset, &self.env.observation_scale) {
            (None, None) => None,
            (Some(o), Some(s)) if o.len() == n && s.len() == n => Some(
                ObservationScaling::new(DVector::from_row_slice(o), DVector::from_row_slice(s))
                    .map_err(|e| config_err("env.observation_scale", e.to_string()))?,
            ),
            _ => {
                return Err(config_err(
                    "env.observation_scale",
                    format!("observation_offset and observation_scale must both be given with {n} entries"),
                ))
            }
        };
        if self.env.reset == ResetMode::Config && !env.has_encoding() {
            let (mean, cov) = match &scaling {
                Some(s) => {
                    let d = DMatrix::from_diagonal(&s.scale);
                    (s.invert(&init_mean), &d * &init_cov * &d)
                }
                None => (init_mean.clone(), init_cov.clone()),
            };
            env = env.with_initial_distribution(mean, cov).map_err(|e| config_err("env.S_init", e.to_string()))?;
        }
        env = env.with_observation_scaling(scaling).map_err(|e| config_err("env.observation_scale", e.to_string()))?;
        if let Some(noise) = &self.env.observation_noise {
            if noise.len() != n || noise.iter().any(|v| !(*v >= 0.0)) {
                return Err(config_err("env.observation_noise", format!("expected {n} non-negative entries")));
            }
            env = env.with_observation_noise(noise.clone());
        }

        let reward = match &self.reward {
            RewardSection::Linear { direction } => {
                if direction.len() != n {
                    return Err(config_err("reward.direction", format!("expected {n} entries")));
                }
                RewardSpec::Linear {
                    direction: DVector::from_row_slice(direction),
                }
            }
            RewardSection::Exponential { target, widths, weight } => {
                if target.len() != n {
                    return Err(config_err("reward.target", format!("expected {n} entries")));
                }
                let target = DVector::from_row_slice(target);
                match (widths, weight) {
                    (Some(w), None) => RewardSpec::exponential_diag(target, w).map_err(|e| config_err("reward.widths", e.to_string()))?,
                    (None, Some(rows)) => {
                        let weight = MatrixSpec::Full(rows.clone()).to_matrix(n, "reward.weight")?;
                        let spec = RewardSpec::Exponential { target, weight };
                        spec.validate().map_err(|e| config_err("reward.weight", e.to_string()))?;
                        spec
                    }
                    _ => return Err(config_err("reward", "exponential rewards need exactly one of `widths` or `weight`")),
                }
            }
        };

        let expr = self.constraint_expr()?;
        if let Some(e) = &expr {
            if e.max_dim() >= n {
                return Err(config_err("constraints", format!("constraint dimension {} exceeds state dimension {n}", e.max_dim())));
            }
        }
        let mut gate = GateConfig::default();
        let mut xi_init = 0.0;
        let safety = match (&self.constraints, expr.clone()) {
            (Some(c), Some(expr)) => {
                gate.epsilon = c.th;
                gate.xi_up = c.xi_up.unwrap_or(gate.xi_up);
                gate.xi_down = c.xi_down.unwrap_or(gate.xi_down);
                gate.conservative_fraction = c.conservative_fraction.unwrap_or(gate.conservative_fraction);
                gate.xi_min = c.xi_min.unwrap_or(gate.xi_min);
                gate.max_retries = c.max_retries.unwrap_or(gate.max_retries);
                gate.validate().map_err(|e| config_err("constraints", e.to_string()))?;
                xi_init = c.xi_init;
                let mut spec = SafetySpec::new(expr, c.th, c.xi_init).map_err(|e| config_err("constraints.th", e.to_string()))?;
                if let Some(q) = c.qmc {
                    spec.qmc = q;
                }
                Some(spec)
            }
            _ => None,
        };
        env = env.with_safe_set(expr);

        let l = &self.loop_;
        let policy = match l.controller.as_str() {
            "rbf" => PolicyConfig::Rbf {
                n_basis: l.basis.ok_or_else(|| config_err("loop.basis", "RBF controllers need `basis`"))?,
            },
            "linear" => PolicyConfig::Linear,
            other => return Err(config_err("loop.controller", format!("unknown controller '{other}'"))),
        };
        let defaults = ModelConfig::default();
        let model = self.model.clone().unwrap_or_default();
        let run = RunConfig {
            initial_rollouts: l.j,
            episodes: l.n,
            horizon: l.h,
            subs: l.subs,
            init_mean,
            init_cov,
            xi_init,
            gate,
            maxiter: self.optimizer.maxiter,
            restarts: self.optimizer.restarts,
            normalize: l.normalize,
            seed: seed_override.unwrap_or(l.seed),
            policy,
            eval_repeats: l.eval_repeats,
            model: ModelConfig {
                fit_restarts: model.fit_restarts.unwrap_or(defaults.fit_restarts),
                fit_max_iter: model.fit_max_iter.unwrap_or(defaults.fit_max_iter),
                fixed_noise: model.fixed_noise,
            },
        };
        run.validate().map_err(|e| config_err("loop", e.to_string()))?;
        Ok(ResolvedExperiment {
            name: name.into(),
            env,
            run,
            reward,
            safety,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_resolve() {
        for (name, text) in BUNDLED {
            let cfg = ExperimentConfig::parse(text).unwrap();
            cfg.resolve(name, None).unwrap();
        }
    }

    #[test]
    fn linear_cars_keys_are_echoed() {
        let cfg = ExperimentConfig::parse(bundled("linear_cars_safe").unwrap()).unwrap();
        let r = cfg.resolve("linear_cars_safe", Some(3)).unwrap();
        assert_eq!(r.run.initial_rollouts, 5);
        assert_eq!(r.run.episodes, 8);
        assert_eq!(r.run.horizon, 25);
        assert_eq!(r.run.maxiter, 20);
        assert_eq!(r.run.seed, 3);
        assert_eq!(r.safety.as_ref().unwrap().epsilon, 0.05);
        assert_eq!(r.run.policy, PolicyConfig::Rbf { n_basis: 40 });
        assert!(r.env.safe_set().is_some());
    }

    #[test]
    fn inverted_box_is_rejected_with_location() {
        let text = bundled("linear_cars_safe").unwrap().replace("lower = -1.0, upper = 1.0", "lower = 1.0, upper = -1.0");
        let err = ExperimentConfig::parse(&text).unwrap().resolve("x", None).unwrap_err();
        match err {
            Error::Config { location, .. } => assert!(location.starts_with("constraints.box[0]"), "{location}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn syntax_errors_report_the_line() {
        let err = ExperimentConfig::parse("[env]\nname = \"mountain_car\"\nm_init = [1, \n").unwrap_err();
        assert!(matches!(err, Error::Config { ref location, .. } if location.starts_with("line")), "{err}");
        let unknown = bundled("mountain_car").unwrap().replace("[optimizer]", "[optimizer]\nmax_iterations = 3");
        let err = ExperimentConfig::parse(&unknown).unwrap_err();
        assert!(err.to_string().contains("max_iterations"), "{err}");
    }
}
