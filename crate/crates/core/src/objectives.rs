//! Expected rewards, safe-set probabilities and the composite objective `R + xi * Q`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::belief::GaussianBelief;
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{sub_matrix, sub_vector};
use crate::normal::{self, QmcSettings};
use crate::propagation::PredictedTrajectory;

/// Marginal variances below this are treated as a point mass.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Maximum number of conjunctive terms after expanding a constraint tree.
pub const MAX_DNF_TERMS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    /// `exp(-1/2 (x - target)^T weight (x - target))`
    Exponential { target: DVector<f64>, weight: DMatrix<f64> },
    /// `direction^T x`
    Linear { direction: DVector<f64> },
    WeightedSum { terms: Vec<(RewardSpec, f64)> },
}

impl RewardSpec {
    /// Exponential reward with diagonal weight `1 / width^2`.
    pub fn exponential_diag(target: DVector<f64>, widths: &[f64]) -> Result<Self> {
        ensure_dim("reward widths", target.len(), widths.len())?;
        let w = DVector::from_iterator(widths.len(), widths.iter().map(|s| 1.0 / (s * s)));
        let spec = RewardSpec::Exponential {
            target,
            weight: DMatrix::from_diagonal(&w),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RewardSpec::Exponential { target, weight } => {
                ensure_dim("reward weight", target.len(), weight.nrows())?;
                ensure_dim("reward weight", target.len(), weight.ncols())?;
                if crate::linalg::max_asymmetry(weight) > 1e-12 || weight.clone().cholesky().is_none() {
                    return Err(Error::InvalidArgument("reward weight must be symmetric positive definite".into()));
                }
                Ok(())
            }
            RewardSpec::Linear { direction } => {
                if direction.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("linear reward direction must be finite".into()));
                }
                Ok(())
            }
            RewardSpec::WeightedSum { terms } => terms.iter().try_for_each(|(t, _)| t.validate()),
        }
    }

    /// Deterministic reward at a single state.
    pub fn point_reward(&self, x: &DVector<f64>) -> Result<f64> {
        expected_reward(&GaussianBelief::point(x.clone()), self)
    }
}

struct ExpTerms {
    value: f64,
    p: DMatrix<f64>,
    p_delta: DVector<f64>,
}

fn exponential_terms(belief: &GaussianBelief, target: &DVector<f64>, weight: &DMatrix<f64>) -> Result<ExpTerms> {
    ensure_dim("reward target", belief.dim(), target.len())?;
    let n = belief.dim();
    let a = DMatrix::identity(n, n) + &belief.cov * weight;
    let lu = a.clone().lu();
    // P = W A^{-1}  <=>  A^T P^T = W^T
    let pt = lu_transpose_solve(&a, weight)?;
    let p = crate::linalg::symmetrize(&pt.transpose());
    let det = lu.determinant();
    if !(det > 0.0) {
        return Err(Error::InvalidArgument(format!("I + Sigma W has non-positive determinant {det}")));
    }
    let delta = &belief.mean - target;
    let p_delta = &p * &delta;
    let value = det.powf(-0.5) * (-0.5 * delta.dot(&p_delta)).exp();
    Ok(ExpTerms { value, p, p_delta })
}

fn lu_transpose_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.transpose()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::InvalidArgument("singular matrix in reward evaluation".into()))
}

pub fn expected_exponential_reward(belief: &GaussianBelief, target: &DVector<f64>, weight: &DMatrix<f64>) -> Result<f64> {
    Ok(exponential_terms(belief, target, weight)?.value)
}

pub fn expected_linear_reward(belief: &GaussianBelief, direction: &DVector<f64>) -> Result<f64> {
    ensure_dim("reward direction", belief.dim(), direction.len())?;
    Ok(direction.dot(&belief.mean))
}

pub fn expected_reward(belief: &GaussianBelief, spec: &RewardSpec) -> Result<f64> {
    match spec {
        RewardSpec::Exponential { target, weight } => expected_exponential_reward(belief, target, weight),
        RewardSpec::Linear { direction } => expected_linear_reward(belief, direction),
        RewardSpec::WeightedSum { terms } => terms
            .iter()
            .map(|(t, c)| expected_reward(belief, t).map(|v| c * v))
            .sum(),
    }
}

/// Value and gradients with respect to the belief mean and (symmetric) covariance.
#[derive(Clone, Debug)]
pub struct BeliefGradient {
    pub value: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl BeliefGradient {
    fn zero(value: f64, n: usize) -> Self {
        BeliefGradient {
            value,
            mean: DVector::zeros(n),
            cov: DMatrix::zeros(n, n),
        }
    }
}

pub fn expected_reward_grad(belief: &GaussianBelief, spec: &RewardSpec) -> Result<BeliefGradient> {
    let n = belief.dim();
    match spec {
        RewardSpec::Exponential { target, weight } => {
            let t = exponential_terms(belief, target, weight)?;
            let mean = &t.p_delta * (-t.value);
            let cov = (&t.p * -0.5 + &t.p_delta * t.p_delta.transpose() * 0.5) * t.value;
            Ok(BeliefGradient { value: t.value, mean, cov })
        }
        RewardSpec::Linear { direction } => {
            let mut g = BeliefGradient::zero(expected_linear_reward(belief, direction)?, n);
            g.mean = direction.clone();
            Ok(g)
        }
        RewardSpec::WeightedSum { terms } => {
            let mut acc = BeliefGradient::zero(0.0, n);
            for (t, c) in terms {
                let g = expected_reward_grad(belief, t)?;
                acc.value += c * g.value;
                acc.mean += g.mean * *c;
                acc.cov += g.cov * *c;
            }
            Ok(acc)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxMode {
    /// Safe when `lower <= x[dim] <= upper`.
    #[default]
    Inside,
    /// Safe when `x[dim]` lies outside `[lower, upper]`.
    Outside,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxConstraint {
    pub dim: usize,
    pub lower: f64,
    pub upper: f64,
    #[serde(default)]
    pub mode: BoxMode,
}

impl BoxConstraint {
    pub fn inside(dim: usize, lower: f64, upper: f64) -> Self {
        BoxConstraint {
            dim,
            lower,
            upper,
            mode: BoxMode::Inside,
        }
    }

    pub fn outside(dim: usize, lower: f64, upper: f64) -> Self {
        BoxConstraint {
            dim,
            lower,
            upper,
            mode: BoxMode::Outside,
        }
    }

    fn contains(&self, x: f64) -> bool {
        let inside = self.lower <= x && x <= self.upper;
        match self.mode {
            BoxMode::Inside => inside,
            BoxMode::Outside => !inside,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintExpr {
    Box(BoxConstraint),
    And(Vec<ConstraintExpr>),
    Or(Vec<ConstraintExpr>),
}

impl ConstraintExpr {
    fn depth(&self) -> usize {
        match self {
            ConstraintExpr::Box(_) => 0,
            ConstraintExpr::And(c) | ConstraintExpr::Or(c) => 1 + c.iter().map(|e| e.depth()).max().unwrap_or(0),
        }
    }

    fn boxes(&self) -> Vec<&BoxConstraint> {
        match self {
            ConstraintExpr::Box(b) => vec![b],
            ConstraintExpr::And(c) | ConstraintExpr::Or(c) => c.iter().flat_map(|e| e.boxes()).collect(),
        }
    }

    /// Ground-truth indicator of the safe set.
    pub fn is_safe(&self, x: &DVector<f64>) -> bool {
        match self {
            ConstraintExpr::Box(b) => b.contains(x[b.dim]),
            ConstraintExpr::And(c) => c.iter().all(|e| e.is_safe(x)),
            ConstraintExpr::Or(c) => c.iter().any(|e| e.is_safe(x)),
        }
    }

    pub fn max_dim(&self) -> usize {
        self.boxes().iter().map(|b| b.dim).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let boxes = self.boxes();
        if boxes.is_empty() {
            return Err(Error::InvalidArgument("constraint needs at least one box".into()));
        }
        for b in boxes {
            if !(b.lower < b.upper) {
                return Err(Error::InvalidArgument(format!(
                    "constraint on dim {} needs lower < upper, got [{}, {}]",
                    b.dim, b.lower, b.upper
                )));
            }
        }
        if self.depth() > 2 {
            return Err(Error::InvalidArgument("constraint trees deeper than 2 are not supported".into()));
        }
        let terms = self.dnf().len();
        if terms > MAX_DNF_TERMS {
            return Err(Error::InvalidArgument(format!(
                "constraint expands to {terms} disjunctive terms; at most {MAX_DNF_TERMS} are supported"
            )));
        }
        Ok(())
    }

    /// Disjunctive normal form over box literals.
    fn dnf(&self) -> Vec<Vec<BoxConstraint>> {
        match self {
            ConstraintExpr::Box(b) => vec![vec![*b]],
            ConstraintExpr::Or(c) => c.iter().flat_map(|e| e.dnf()).collect(),
            ConstraintExpr::And(c) => c.iter().fold(vec![Vec::new()], |acc, e| {
                let right = e.dnf();
                acc.iter()
                    .flat_map(|l| {
                        right.iter().map(move |r| {
                            let mut t = l.clone();
                            t.extend(r.iter().cloned());
                            t
                        })
                    })
                    .collect()
            }),
        }
    }

    /// Signed sum of rectangle probabilities equal to the safe-set probability.
    pub(crate) fn rectangles(&self) -> Vec<(f64, Rectangle)> {
        let terms = self.dnf();
        let mut acc: BTreeMap<Vec<(usize, u64, u64)>, (f64, Rectangle)> = BTreeMap::new();
        let k = terms.len();
        for mask in 1u32..(1 << k) {
            let sign = if mask.count_ones() % 2 == 1 { 1.0 } else { -1.0 };
            let literals: Vec<BoxConstraint> = (0..k)
                .filter(|i| mask & (1 << i) != 0)
                .flat_map(|i| terms[i].iter().cloned())
                .collect();
            let positives: Vec<&BoxConstraint> = literals.iter().filter(|b| b.mode == BoxMode::Inside).collect();
            let negatives: Vec<&BoxConstraint> = literals.iter().filter(|b| b.mode == BoxMode::Outside).collect();
            for nmask in 0u32..(1 << negatives.len()) {
                let nsign = if nmask.count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                let mut rect = Rectangle::default();
                for b in positives.iter().copied().chain(
                    (0..negatives.len())
                        .filter(|j| nmask & (1 << j) != 0)
                        .map(|j| negatives[j]),
                ) {
                    rect.intersect(b.dim, b.lower, b.upper);
                }
                let key = rect.key();
                let entry = acc.entry(key).or_insert((0.0, rect));
                entry.0 += sign * nsign;
            }
        }
        acc.into_values().filter(|(c, _)| *c != 0.0).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct Rectangle {
    pub bounds: BTreeMap<usize, (f64, f64)>,
}

impl Rectangle {
    fn intersect(&mut self, dim: usize, lower: f64, upper: f64) {
        let e = self.bounds.entry(dim).or_insert((f64::NEG_INFINITY, f64::INFINITY));
        e.0 = e.0.max(lower);
        e.1 = e.1.min(upper);
    }

    fn key(&self) -> Vec<(usize, u64, u64)> {
        self.bounds.iter().map(|(d, (l, u))| (*d, l.to_bits(), u.to_bits())).collect()
    }

    fn is_empty(&self) -> bool {
        self.bounds.values().any(|(l, u)| l >= u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetySpec {
    pub expr: ConstraintExpr,
    /// Risk threshold in `(0, 1)`.
    pub epsilon: f64,
    /// Current weight on the safety term.
    pub xi: f64,
    #[serde(default)]
    pub qmc: QmcSettings,
}

impl SafetySpec {
    pub fn new(expr: ConstraintExpr, epsilon: f64, xi: f64) -> Result<Self> {
        let s = SafetySpec {
            expr,
            epsilon,
            xi,
            qmc: QmcSettings::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.expr.validate()?;
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return Err(Error::InvalidArgument(format!("xi must be finite and non-negative, got {}", self.xi)));
        }
        Ok(())
    }

    pub fn is_safe(&self, x: &DVector<f64>) -> bool {
        self.expr.is_safe(x)
    }
}

fn interval_prob_grad(mu: f64, var: f64, lower: f64, upper: f64) -> (f64, f64, f64) {
    let sd = var.sqrt();
    let bu = (upper - mu) / sd;
    let bl = (lower - mu) / sd;
    let p = (normal::cdf(bu) - normal::cdf(bl)).max(0.0);
    let (pu, pl) = (normal::pdf(bu), normal::pdf(bl));
    let bpu = if bu.is_finite() { bu * pu } else { 0.0 };
    let bpl = if bl.is_finite() { bl * pl } else { 0.0 };
    (p, -(pu - pl) / sd, -(bpu - bpl) / (2.0 * var))
}

/// Probability of one rectangle with gradients on the full belief.
fn rectangle_prob_grad(belief: &GaussianBelief, rect: &Rectangle, qmc: &QmcSettings, want_grad: bool) -> BeliefGradient {
    let n = belief.dim();
    let mut out = BeliefGradient::zero(0.0, n);
    if rect.is_empty() {
        return out;
    }
    let mut factor = 1.0;
    let mut dims = Vec::new();
    for (&d, &(l, u)) in &rect.bounds {
        if l == f64::NEG_INFINITY && u == f64::INFINITY {
            continue;
        }
        if belief.cov[(d, d)] < DEGENERATE_VARIANCE {
            let m = belief.mean[d];
            if !(l <= m && m <= u) {
                factor = 0.0;
            }
            continue;
        }
        dims.push((d, l, u));
    }
    if factor == 0.0 {
        return out;
    }
    let diagonal = dims
        .iter()
        .all(|(i, _, _)| dims.iter().all(|(j, _, _)| i == j || belief.cov[(*i, *j)] == 0.0));
    if dims.len() <= 1 || diagonal {
        // product of independent intervals
        let parts: Vec<(f64, f64, f64)> = dims
            .iter()
            .map(|&(d, l, u)| interval_prob_grad(belief.mean[d], belief.cov[(d, d)], l, u))
            .collect();
        let value: f64 = parts.iter().map(|p| p.0).product::<f64>() * factor;
        out.value = value;
        if want_grad {
            for (k, &(d, _, _)) in dims.iter().enumerate() {
                let others: f64 = parts.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, p)| p.0).product();
                out.mean[d] = parts[k].1 * others * factor;
                out.cov[(d, d)] = parts[k].2 * others * factor;
            }
        }
        return out;
    }
    if dims.len() == 2 {
        let (i, li, ui) = dims[0];
        let (j, lj, uj) = dims[1];
        let (si, sj) = (belief.cov[(i, i)].sqrt(), belief.cov[(j, j)].sqrt());
        let rho = (belief.cov[(i, j)] / (si * sj)).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
        let z = |b: f64, m: f64, s: f64| (b - m) / s;
        let (mi, mj) = (belief.mean[i], belief.mean[j]);
        let corners = [(ui, uj, 1.0), (li, uj, -1.0), (ui, lj, -1.0), (li, lj, 1.0)];
        let mut value = 0.0;
        for &(bi, bj, sgn) in &corners {
            let (h, k) = (z(bi, mi, si), z(bj, mj, sj));
            if h == f64::NEG_INFINITY || k == f64::NEG_INFINITY {
                continue;
            }
            value += sgn * normal::bvn_cdf(h, k, rho);
            if !want_grad {
                continue;
            }
            let (dh, dk, dr) = normal::bvn_cdf_grad(h, k, rho);
            let (dh, dk, dr) = (sgn * dh * factor, sgn * dk * factor, sgn * dr * factor);
            out.mean[i] += -dh / si;
            out.mean[j] += -dk / sj;
            let hh = if h.is_finite() { h } else { 0.0 };
            let kk = if k.is_finite() { k } else { 0.0 };
            out.cov[(i, i)] += -dh * hh / (2.0 * si * si) - dr * rho / (2.0 * si * si);
            out.cov[(j, j)] += -dk * kk / (2.0 * sj * sj) - dr * rho / (2.0 * sj * sj);
            let cross = dr / (si * sj);
            out.cov[(i, j)] += 0.5 * cross;
            out.cov[(j, i)] += 0.5 * cross;
        }
        out.value = value.clamp(0.0, 1.0) * factor;
        return out;
    }
    let idx: Vec<usize> = dims.iter().map(|d| d.0).collect();
    let eval = |mean: &DVector<f64>, cov: &DMatrix<f64>, settings: &QmcSettings| {
        let lower = DVector::from_fn(idx.len(), |k, _| dims[k].1 - mean[k]);
        let upper = DVector::from_fn(idx.len(), |k, _| dims[k].2 - mean[k]);
        normal::genz_rectangle(&lower, &upper, cov, settings).value
    };
    let mean = sub_vector(&belief.mean, &idx);
    let cov = sub_matrix(&belief.cov, &idx);
    out.value = eval(&mean, &cov, qmc).clamp(0.0, 1.0) * factor;
    if want_grad {
        // central differences on the deterministic lattice, with early stopping off
        let fixed = QmcSettings { abs_tol: 0.0, ..*qmc };
        for a in 0..idx.len() {
            let h = 1e-4 * cov[(a, a)].sqrt();
            let mut mp = mean.clone();
            mp[a] += h;
            let mut mm = mean.clone();
            mm[a] -= h;
            out.mean[idx[a]] = factor * (eval(&mp, &cov, &fixed) - eval(&mm, &cov, &fixed)) / (2.0 * h);
            for b in 0..=a {
                let h = 1e-4 * (cov[(a, a)] * cov[(b, b)]).sqrt();
                let bump = |c: &mut DMatrix<f64>, v: f64| {
                    c[(a, b)] += v;
                    if a != b {
                        c[(b, a)] += v;
                    }
                };
                let mut cp = cov.clone();
                bump(&mut cp, h);
                let mut cm = cov.clone();
                bump(&mut cm, -h);
                let d = factor * (eval(&mean, &cp, &fixed) - eval(&mean, &cm, &fixed)) / (2.0 * h);
                if a == b {
                    out.cov[(idx[a], idx[a])] = d;
                } else {
                    out.cov[(idx[a], idx[b])] = 0.5 * d;
                    out.cov[(idx[b], idx[a])] = 0.5 * d;
                }
            }
        }
    }
    out
}

fn safe_probability_impl(belief: &GaussianBelief, expr: &ConstraintExpr, qmc: &QmcSettings, want_grad: bool) -> Result<BeliefGradient> {
    if expr.max_dim() >= belief.dim() {
        return Err(Error::DimensionMismatch {
            context: "constraint dimension",
            expected: belief.dim(),
            got: expr.max_dim() + 1,
        });
    }
    let mut acc = BeliefGradient::zero(0.0, belief.dim());
    for (coef, rect) in expr.rectangles() {
        let r = rectangle_prob_grad(belief, &rect, qmc, want_grad);
        acc.value += coef * r.value;
        if want_grad {
            acc.mean += r.mean * coef;
            acc.cov += r.cov * coef;
        }
    }
    if acc.value < 0.0 || acc.value > 1.0 {
        acc.value = acc.value.clamp(0.0, 1.0);
        acc.mean.fill(0.0);
        acc.cov.fill(0.0);
    }
    Ok(acc)
}

/// Probability mass of the safe set under the belief.
pub fn safe_probability(belief: &GaussianBelief, expr: &ConstraintExpr) -> Result<f64> {
    safe_probability_with(belief, expr, &QmcSettings::default())
}

pub fn safe_probability_with(belief: &GaussianBelief, expr: &ConstraintExpr, qmc: &QmcSettings) -> Result<f64> {
    Ok(safe_probability_impl(belief, expr, qmc, false)?.value)
}

pub fn safe_probability_grad(belief: &GaussianBelief, expr: &ConstraintExpr, qmc: &QmcSettings) -> Result<BeliefGradient> {
    safe_probability_impl(belief, expr, qmc, true)
}

fn non_empty(traj: &PredictedTrajectory) -> Result<()> {
    if traj.beliefs.is_empty() {
        return Err(Error::InvalidArgument("trajectory is empty".into()));
    }
    Ok(())
}

/// Sum of per-step expected rewards.
pub fn episode_return(traj: &PredictedTrajectory, reward: &RewardSpec) -> Result<f64> {
    non_empty(traj)?;
    traj.beliefs.iter().map(|b| expected_reward(b, reward)).sum()
}

/// Product of per-step safe probabilities, accumulated in log space.
pub fn safety_product(per_step: &[f64]) -> f64 {
    if per_step.iter().any(|q| *q <= 0.0) {
        return 0.0;
    }
    per_step.iter().map(|q| q.ln()).sum::<f64>().exp()
}

/// Gradient of `safety_product` with respect to each factor (prefix/suffix products).
pub fn safety_product_grad(per_step: &[f64]) -> Vec<f64> {
    let h = per_step.len();
    let mut prefix = vec![1.0; h + 1];
    for t in 0..h {
        prefix[t + 1] = prefix[t] * per_step[t];
    }
    let mut suffix = vec![1.0; h + 1];
    for t in (0..h).rev() {
        suffix[t] = suffix[t + 1] * per_step[t];
    }
    (0..h).map(|t| prefix[t] * suffix[t + 1]).collect()
}

pub fn episode_safety(traj: &PredictedTrajectory, spec: &SafetySpec) -> Result<f64> {
    non_empty(traj)?;
    let qs = traj
        .beliefs
        .iter()
        .map(|b| safe_probability_with(b, &spec.expr, &spec.qmc))
        .collect::<Result<Vec<_>>>()?;
    Ok(safety_product(&qs))
}

pub fn composite_objective(traj: &PredictedTrajectory, reward: &RewardSpec, spec: &SafetySpec) -> Result<f64> {
    Ok(episode_return(traj, reward)? + spec.xi * episode_safety(traj, spec)?)
}

/// Fills the per-step reward and safe-probability vectors of a trajectory.
pub fn annotate(traj: &mut PredictedTrajectory, reward: &RewardSpec, safety: Option<&SafetySpec>) -> Result<()> {
    traj.per_step_reward = traj
        .beliefs
        .iter()
        .map(|b| expected_reward(b, reward))
        .collect::<Result<_>>()?;
    traj.per_step_safe_prob = match safety {
        Some(s) => traj
            .beliefs
            .iter()
            .map(|b| safe_probability_with(b, &s.expr, &s.qmc))
            .collect::<Result<_>>()?,
        None => vec![1.0; traj.beliefs.len()],
    };
    Ok(())
}
