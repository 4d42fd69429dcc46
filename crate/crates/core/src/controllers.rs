//! Deterministic feedback policies with exact Gaussian-input moment computations.
//!
//! Raw policy outputs are squashed into the control bounds by
//! `u = mid + amp * sin(v / amp)`, which keeps every control moment analytic.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::belief::GaussianBelief;
use crate::error::{ensure_dim, Error, Result};
use crate::gp::{matrix_from_rows, matrix_rows};
use crate::linalg::{cholesky_with_jitter, symmetrize};
use crate::se_moments::{SeAdjoint, SeLayer, SeOutput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

impl Bound {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "control bound needs finite lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Bound { lower, upper })
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn amp(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }

    pub fn clip(&self, u: f64) -> f64 {
        u.clamp(self.lower, self.upper)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyKind {
    /// `v = weights * x + offset`, weights `[m x n]`.
    Linear { weights: DMatrix<f64>, offset: DVector<f64> },
    /// `v_a = sum_i weights[i, a] exp(-1/2 |(x - centers_i) / l|^2)`.
    Rbf {
        centers: DMatrix<f64>,
        log_lengthscales: DVector<f64>,
        weights: DMatrix<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    kind: PolicyKind,
    bounds: Vec<Bound>,
}

/// Moments of `(x, v)` before squashing.
#[derive(Clone, Debug)]
pub(crate) struct RawMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `cov(x, v)`, `[n x m]`.
    pub cross: DMatrix<f64>,
}

/// Adjoints flowing back out of a policy moment computation.
pub(crate) struct PolicyMomentGrad {
    pub state_mean: DVector<f64>,
    pub state_cov: DMatrix<f64>,
    pub theta: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct ActionMoments {
    pub control: GaussianBelief,
    /// `cov(x, u)`, `[n x m]`.
    pub cross_cov: DMatrix<f64>,
}

impl Policy {
    pub fn linear(weights: DMatrix<f64>, offset: DVector<f64>, bounds: Vec<Bound>) -> Result<Self> {
        ensure_dim("linear policy offset", weights.nrows(), offset.len())?;
        ensure_dim("control bounds", weights.nrows(), bounds.len())?;
        Policy::validated(PolicyKind::Linear { weights, offset }, bounds)
    }

    pub fn rbf(centers: DMatrix<f64>, lengthscales: DVector<f64>, weights: DMatrix<f64>, bounds: Vec<Bound>) -> Result<Self> {
        if lengthscales.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("RBF lengthscales must be positive".into()));
        }
        Policy::rbf_log(centers, lengthscales.map(f64::ln), weights, bounds)
    }

    fn rbf_log(centers: DMatrix<f64>, log_lengthscales: DVector<f64>, weights: DMatrix<f64>, bounds: Vec<Bound>) -> Result<Self> {
        ensure_dim("RBF lengthscales", centers.ncols(), log_lengthscales.len())?;
        ensure_dim("RBF weights rows", centers.nrows(), weights.nrows())?;
        ensure_dim("control bounds", weights.ncols(), bounds.len())?;
        if centers.nrows() == 0 {
            return Err(Error::InvalidArgument("RBF policy needs at least one basis function".into()));
        }
        Policy::validated(
            PolicyKind::Rbf {
                centers,
                log_lengthscales,
                weights,
            },
            bounds,
        )
    }

    fn validated(kind: PolicyKind, bounds: Vec<Bound>) -> Result<Self> {
        for b in &bounds {
            Bound::new(b.lower, b.upper)?;
        }
        let p = Policy { kind, bounds };
        if p.theta().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("policy parameters must be finite".into()));
        }
        Ok(p)
    }

    /// Random RBF policy: centers from `N(mean, cov + diag(state_var))`,
    /// weights from `N(0, amp^2 / n_basis)`, lengthscales at the spread of the centers.
    pub fn random_rbf<R: Rng + ?Sized>(
        n_basis: usize,
        init: &GaussianBelief,
        state_var: &DVector<f64>,
        bounds: Vec<Bound>,
        rng: &mut R,
    ) -> Result<Self> {
        let n = init.dim();
        ensure_dim("state variance", n, state_var.len())?;
        let mut spread = init.cov.clone();
        for d in 0..n {
            spread[(d, d)] += state_var[d];
        }
        let chol = cholesky_with_jitter(&spread)?;
        let l = chol.factor.l();
        let centers = DMatrix::from_fn(n_basis, n, |_, _| 0.0);
        let mut centers = centers;
        for i in 0..n_basis {
            let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
            let c = &init.mean + &l * z;
            centers.set_row(i, &c.transpose());
        }
        let lengthscales = DVector::from_fn(n, |d, _| spread[(d, d)].sqrt().max(1e-3));
        let m = bounds.len();
        let mut weights = DMatrix::zeros(n_basis, m);
        for (a, b) in bounds.iter().enumerate() {
            let normal = Normal::new(0.0, b.amp() / (n_basis as f64).sqrt())
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for i in 0..n_basis {
                weights[(i, a)] = normal.sample(rng);
            }
        }
        Policy::rbf(centers, lengthscales, weights, bounds)
    }

    pub fn kind(&self) -> &PolicyKind {
        &self.kind
    }

    pub fn bounds(&self) -> &[Bound] {
        &self.bounds
    }

    pub fn state_dim(&self) -> usize {
        match &self.kind {
            PolicyKind::Linear { weights, .. } => weights.ncols(),
            PolicyKind::Rbf { centers, .. } => centers.ncols(),
        }
    }

    pub fn control_dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn n_params(&self) -> usize {
        match &self.kind {
            PolicyKind::Linear { weights, offset } => weights.len() + offset.len(),
            PolicyKind::Rbf {
                centers,
                log_lengthscales,
                weights,
            } => centers.len() + log_lengthscales.len() + weights.len(),
        }
    }

    /// Flattened trainable parameters. Linear: `[weights row-major, offset]`;
    /// RBF: `[centers row-major, log lengthscales, weights row-major]`.
    pub fn theta(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        let push_rows = |m: &DMatrix<f64>, out: &mut Vec<f64>| {
            for i in 0..m.nrows() {
                out.extend(m.row(i).iter());
            }
        };
        match &self.kind {
            PolicyKind::Linear { weights, offset } => {
                push_rows(weights, &mut out);
                out.extend(offset.iter());
            }
            PolicyKind::Rbf {
                centers,
                log_lengthscales,
                weights,
            } => {
                push_rows(centers, &mut out);
                out.extend(log_lengthscales.iter());
                push_rows(weights, &mut out);
            }
        }
        DVector::from_vec(out)
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        ensure_dim("policy parameter vector", self.n_params(), theta.len())?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("policy parameters must be finite".into()));
        }
        let take = |off: &mut usize, r: usize, c: usize| {
            let m = DMatrix::from_fn(r, c, |i, j| theta[*off + i * c + j]);
            *off += r * c;
            m
        };
        let mut off = 0;
        let kind = match &self.kind {
            PolicyKind::Linear { weights, .. } => {
                let w = take(&mut off, weights.nrows(), weights.ncols());
                let b = DVector::from_column_slice(&theta[off..off + weights.nrows()]);
                PolicyKind::Linear { weights: w, offset: b }
            }
            PolicyKind::Rbf { centers, weights, .. } => {
                let c = take(&mut off, centers.nrows(), centers.ncols());
                let ll = DVector::from_column_slice(&theta[off..off + centers.ncols()]);
                off += centers.ncols();
                let w = take(&mut off, weights.nrows(), weights.ncols());
                PolicyKind::Rbf {
                    centers: c,
                    log_lengthscales: ll,
                    weights: w,
                }
            }
        };
        Ok(Policy {
            kind,
            bounds: self.bounds.clone(),
        })
    }

    /// Pre-squash output `v(x)`.
    pub fn raw_output(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            PolicyKind::Linear { weights, offset } => weights * x + offset,
            PolicyKind::Rbf {
                centers,
                log_lengthscales,
                weights,
            } => {
                let k = DVector::from_fn(centers.nrows(), |i, _| {
                    let mut q = 0.0;
                    for d in 0..x.len() {
                        let z = (x[d] - centers[(i, d)]) * (-log_lengthscales[d]).exp();
                        q += z * z;
                    }
                    (-0.5 * q).exp()
                });
                weights.tr_mul(&k)
            }
        }
    }

    /// Squashed deterministic control.
    pub fn act(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_dim("policy input", self.state_dim(), x.len())?;
        let v = self.raw_output(x);
        Ok(DVector::from_fn(v.len(), |j, _| {
            let b = self.bounds[j];
            b.mid() + b.amp() * (v[j] / b.amp()).sin()
        }))
    }

    fn se_layer<'a>(centers: &'a DMatrix<f64>, log_lengthscales: &DVector<f64>, weights: &DMatrix<f64>) -> SeLayer<'a> {
        let lam = log_lengthscales.map(|ll| (-2.0 * ll).exp());
        SeLayer {
            centers,
            outputs: (0..weights.ncols())
                .map(|a| SeOutput {
                    inv_sq_lengthscales: lam.clone(),
                    signal_variance: 1.0,
                    weights: Cow::Owned(weights.column(a).into_owned()),
                    inv_gram: None,
                    noise_variance: 0.0,
                })
                .collect(),
        }
    }

    pub(crate) fn raw_moments(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<RawMoments> {
        ensure_dim("policy input", self.state_dim(), mean.len())?;
        match &self.kind {
            PolicyKind::Linear { weights, offset } => Ok(RawMoments {
                mean: weights * mean + offset,
                cov: symmetrize(&(weights * cov * weights.transpose())),
                cross: cov * weights.transpose(),
            }),
            PolicyKind::Rbf {
                centers,
                log_lengthscales,
                weights,
            } => {
                let m = Policy::se_layer(centers, log_lengthscales, weights).forward(mean, cov)?;
                Ok(RawMoments {
                    mean: m.mean,
                    cov: m.cov,
                    cross: m.input_output_cov,
                })
            }
        }
    }

    pub(crate) fn raw_moments_backward(
        &self,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        mean_bar: &DVector<f64>,
        cov_bar: &DMatrix<f64>,
        cross_bar: &DMatrix<f64>,
    ) -> Result<PolicyMomentGrad> {
        match &self.kind {
            PolicyKind::Linear { weights, .. } => {
                let sb = cov_bar;
                let w_bar = mean_bar * mean.transpose()
                    + sb * weights * cov.transpose()
                    + sb.transpose() * weights * cov
                    + cross_bar.transpose() * cov;
                let state_cov = weights.transpose() * sb * weights + cross_bar * weights;
                let state_mean = weights.tr_mul(mean_bar);
                let mut theta = Vec::with_capacity(self.n_params());
                for i in 0..w_bar.nrows() {
                    theta.extend(w_bar.row(i).iter());
                }
                theta.extend(mean_bar.iter());
                Ok(PolicyMomentGrad {
                    state_mean,
                    state_cov: symmetrize(&state_cov),
                    theta: DVector::from_vec(theta),
                })
            }
            PolicyKind::Rbf {
                centers,
                log_lengthscales,
                weights,
            } => {
                let layer = Policy::se_layer(centers, log_lengthscales, weights);
                let g = layer.backward(
                    mean,
                    cov,
                    &SeAdjoint {
                        mean: mean_bar.clone(),
                        cov: cov_bar.clone(),
                        input_output_cov: cross_bar.clone(),
                    },
                )?;
                let mut theta = Vec::with_capacity(self.n_params());
                for i in 0..g.centers.nrows() {
                    theta.extend(g.centers.row(i).iter());
                }
                for d in 0..log_lengthscales.len() {
                    let lam = (-2.0 * log_lengthscales[d]).exp();
                    let total: f64 = g.inv_sq_lengthscales.iter().map(|v| v[d]).sum();
                    theta.push(total * (-2.0 * lam));
                }
                for i in 0..weights.nrows() {
                    for a in 0..weights.ncols() {
                        theta.push(g.weights[a][i]);
                    }
                }
                Ok(PolicyMomentGrad {
                    state_mean: g.mean,
                    state_cov: g.cov,
                    theta: DVector::from_vec(theta),
                })
            }
        }
    }

    /// Control distribution and state-control cross-covariance under `x ~ state`.
    pub fn moments_of_action(&self, state: &GaussianBelief) -> Result<ActionMoments> {
        let raw = self.raw_moments(&state.mean, &state.cov)?;
        let sq = squash_moments(&raw, &self.bounds)?;
        Ok(ActionMoments {
            control: GaussianBelief {
                mean: sq.mean,
                cov: sq.cov,
            },
            cross_cov: sq.cross,
        })
    }
}

struct SineTerms {
    amp: DVector<f64>,
    mid: DVector<f64>,
    mw: DVector<f64>,
    sw: DMatrix<f64>,
    /// `E[sin w_j]`
    es: DVector<f64>,
    /// `E[cos w_j]`
    ec: DVector<f64>,
}

fn sine_terms(raw: &RawMoments, bounds: &[Bound]) -> Result<SineTerms> {
    let m = bounds.len();
    ensure_dim("squash input", m, raw.mean.len())?;
    let amp = DVector::from_fn(m, |j, _| bounds[j].amp());
    let mid = DVector::from_fn(m, |j, _| bounds[j].mid());
    let mw = raw.mean.component_div(&amp);
    let sw = DMatrix::from_fn(m, m, |i, j| raw.cov[(i, j)] / (amp[i] * amp[j]));
    let es = DVector::from_fn(m, |j, _| (-0.5 * sw[(j, j)]).exp() * mw[j].sin());
    let ec = DVector::from_fn(m, |j, _| (-0.5 * sw[(j, j)]).exp() * mw[j].cos());
    Ok(SineTerms {
        amp,
        mid,
        mw,
        sw,
        es,
        ec,
    })
}

/// `cov(sin w_i, sin w_j)` written with `expm1` so it stays accurate as the variance vanishes.
fn sine_cov(st: &SineTerms, i: usize, j: usize) -> f64 {
    let base = (-0.5 * (st.sw[(i, i)] + st.sw[(j, j)])).exp();
    let s = st.sw[(i, j)];
    0.5 * base * (s.exp_m1() * (st.mw[i] - st.mw[j]).cos() - (-s).exp_m1() * (st.mw[i] + st.mw[j]).cos())
}

/// Exact moments of `(x, mid + amp sin(v / amp))` given the moments of `(x, v)`.
pub(crate) fn squash_moments(raw: &RawMoments, bounds: &[Bound]) -> Result<RawMoments> {
    let st = sine_terms(raw, bounds)?;
    let m = bounds.len();
    let mean = &st.mid + st.amp.component_mul(&st.es);
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            cov[(i, j)] = st.amp[i] * st.amp[j] * sine_cov(&st, i, j);
        }
    }
    let mut cross = raw.cross.clone();
    for (j, mut col) in cross.column_iter_mut().enumerate() {
        col *= st.ec[j];
    }
    Ok(RawMoments {
        mean,
        cov: symmetrize(&cov),
        cross,
    })
}

/// Reverse pass of `squash_moments`: returns adjoints of the raw `(mean, cov, cross)`.
pub(crate) fn squash_moments_backward(
    raw: &RawMoments,
    bounds: &[Bound],
    mean_bar: &DVector<f64>,
    cov_bar: &DMatrix<f64>,
    cross_bar: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let st = sine_terms(raw, bounds)?;
    let m = bounds.len();
    let es_bar = mean_bar.component_mul(&st.amp);
    let mut ec_bar = DVector::<f64>::zeros(m);
    let mut mw_bar = DVector::<f64>::zeros(m);
    let mut sw_bar = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let k = cov_bar[(i, j)] * st.amp[i] * st.amp[j];
            if k == 0.0 {
                continue;
            }
            let base = (-0.5 * (st.sw[(i, i)] + st.sw[(j, j)])).exp();
            let (a, b) = (st.sw[(i, j)].exp_m1(), (-st.sw[(i, j)]).exp_m1());
            let (dm, sm) = (st.mw[i] - st.mw[j], st.mw[i] + st.mw[j]);
            let c = 0.5 * base * (a * dm.cos() - b * sm.cos());
            mw_bar[i] += k * 0.5 * base * (-a * dm.sin() + b * sm.sin());
            mw_bar[j] += k * 0.5 * base * (a * dm.sin() + b * sm.sin());
            sw_bar[(i, i)] += k * (-0.5 * c);
            sw_bar[(j, j)] += k * (-0.5 * c);
            sw_bar[(i, j)] += k * 0.5 * base * ((a + 1.0) * dm.cos() + (b + 1.0) * sm.cos());
        }
    }
    let mut raw_cross_bar = cross_bar.clone();
    for j in 0..m {
        ec_bar[j] += cross_bar.column(j).dot(&raw.cross.column(j));
        raw_cross_bar.column_mut(j).scale_mut(st.ec[j]);
    }
    for j in 0..m {
        // es = e sin(mw), ec = e cos(mw), e = exp(-sw_jj / 2)
        mw_bar[j] += es_bar[j] * st.ec[j] - ec_bar[j] * st.es[j];
        sw_bar[(j, j)] += -0.5 * (es_bar[j] * st.es[j] + ec_bar[j] * st.ec[j]);
    }
    let raw_mean_bar = mw_bar.component_div(&st.amp);
    let raw_cov_bar = DMatrix::from_fn(m, m, |i, j| sw_bar[(i, j)] / (st.amp[i] * st.amp[j]));
    Ok((raw_mean_bar, symmetrize(&raw_cov_bar), raw_cross_bar))
}

/// Moments of the squashed control `mid + amp sin(v / amp)` for `v ~ pre`.
pub fn squash_control(pre: &GaussianBelief, bounds: &[Bound]) -> Result<GaussianBelief> {
    let raw = RawMoments {
        mean: pre.mean.clone(),
        cov: pre.cov.clone(),
        cross: DMatrix::zeros(0, pre.dim()),
    };
    let sq = squash_moments(&raw, bounds)?;
    Ok(GaussianBelief {
        mean: sq.mean,
        cov: sq.cov,
    })
}

const POLICY_FORMAT: &str = "policy";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum PolicyBody {
    Linear {
        weights: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
    Rbf {
        centers: Vec<Vec<f64>>,
        log_lengthscales: Vec<f64>,
        weights: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PolicyDocument {
    format: String,
    version: u32,
    state_dim: usize,
    bounds: Vec<Bound>,
    policy: PolicyBody,
}

impl Policy {
    pub fn to_text(&self) -> String {
        let policy = match &self.kind {
            PolicyKind::Linear { weights, offset } => PolicyBody::Linear {
                weights: matrix_rows(weights),
                offset: offset.iter().cloned().collect(),
            },
            PolicyKind::Rbf {
                centers,
                log_lengthscales,
                weights,
            } => PolicyBody::Rbf {
                centers: matrix_rows(centers),
                log_lengthscales: log_lengthscales.iter().cloned().collect(),
                weights: matrix_rows(weights),
            },
        };
        let doc = PolicyDocument {
            format: POLICY_FORMAT.into(),
            version: 1,
            state_dim: self.state_dim(),
            bounds: self.bounds.clone(),
            policy,
        };
        toml::to_string(&doc).expect("policy is always serializable")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: PolicyDocument = toml::from_str(text).map_err(|e| Error::Config {
            location: "policy".into(),
            message: e.to_string(),
        })?;
        if doc.format != POLICY_FORMAT {
            return Err(Error::InvalidArgument(format!("unexpected format {:?}", doc.format)));
        }
        let m = doc.bounds.len();
        match doc.policy {
            PolicyBody::Linear { weights, offset } => Policy::linear(
                matrix_from_rows(&weights, doc.state_dim)?,
                DVector::from_vec(offset),
                doc.bounds,
            ),
            PolicyBody::Rbf {
                centers,
                log_lengthscales,
                weights,
            } => Policy::rbf_log(
                matrix_from_rows(&centers, doc.state_dim)?,
                DVector::from_vec(log_lengthscales),
                matrix_from_rows(&weights, m)?,
                doc.bounds,
            ),
        }
    }
}
