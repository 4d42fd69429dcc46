//! Multi-output Gaussian-process dynamics model.
//!
//! One independent GP with a squared-exponential ARD kernel is trained per
//! output dimension on `(state, control) -> state delta` pairs. Hyperparameters
//! are fitted by maximizing the marginal likelihood in log-space with L-BFGS.
//! Data normalization is implemented as an exact re-parameterization: the fit
//! runs on standardized data and the optimum is mapped back to raw units, so
//! every downstream consumer works in the original units.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::belief::GaussianBelief;
use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{cholesky_with_jitter, JitteredCholesky};
use crate::optimizer::lbfgs::{self, LbfgsOptions};

/// Noise variance is never allowed below this fraction of the signal variance.
pub const NOISE_FLOOR_RATIO: f64 = 1e-6;

/// Training pairs: `inputs` rows are `(state, control)`, `targets` rows are state deltas.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionDataset {
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
}

impl RegressionDataset {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        ensure_dim("dataset rows", inputs.nrows(), targets.nrows())?;
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(RegressionDataset { inputs, targets })
    }

    /// Builds delta targets from consecutive states and the controls applied between them.
    pub fn from_transitions(states: &[DVector<f64>], controls: &[DVector<f64>]) -> Result<Self> {
        if states.len() != controls.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} states cannot bracket {} controls",
                states.len(),
                controls.len()
            )));
        }
        let n = states.first().map_or(0, |s| s.len());
        let m = controls.first().map_or(0, |u| u.len());
        let rows = controls.len();
        let mut inputs = DMatrix::zeros(rows, n + m);
        let mut targets = DMatrix::zeros(rows, n);
        for t in 0..rows {
            for d in 0..n {
                inputs[(t, d)] = states[t][d];
                targets[(t, d)] = states[t + 1][d] - states[t][d];
            }
            for d in 0..m {
                inputs[(t, n + d)] = controls[t][d];
            }
        }
        RegressionDataset::new(inputs, targets)
    }

    pub fn append(&self, other: &RegressionDataset) -> Result<Self> {
        if self.n_points() == 0 {
            return Ok(other.clone());
        }
        if other.n_points() == 0 {
            return Ok(self.clone());
        }
        ensure_dim("dataset input dim", self.input_dim(), other.input_dim())?;
        ensure_dim("dataset output dim", self.output_dim(), other.output_dim())?;
        let stack = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
            out.rows_mut(0, a.nrows()).copy_from(a);
            out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
            out
        };
        RegressionDataset::new(stack(&self.inputs, &other.inputs), stack(&self.targets, &other.targets))
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    pub fn n_points(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub lengthscales: DVector<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelHyperparams {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.lengthscales.iter().all(|l| *l > 0.0 && l.is_finite())
            && self.signal_variance > 0.0
            && self.noise_variance > 0.0;
        if !all_positive {
            return Err(Error::InvalidArgument(format!(
                "kernel hyperparameters must be strictly positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn noise_floor(&self) -> f64 {
        NOISE_FLOOR_RATIO * self.signal_variance
    }
}

/// Squared-exponential ARD covariance `sf2 * exp(-1/2 sum_d ((a_d - b_d) / l_d)^2)`.
pub fn kernel_eval(a: &DVector<f64>, b: &DVector<f64>, h: &KernelHyperparams) -> Result<f64> {
    ensure_dim("kernel input a", h.lengthscales.len(), a.len())?;
    ensure_dim("kernel input b", h.lengthscales.len(), b.len())?;
    let mut q = 0.0;
    for d in 0..a.len() {
        let z = (a[d] - b[d]) / h.lengthscales[d];
        q += z * z;
    }
    Ok(h.signal_variance * (-0.5 * q).exp())
}

fn gram(inputs: &DMatrix<f64>, h: &KernelHyperparams) -> DMatrix<f64> {
    let n = inputs.nrows();
    let inv_l2: Vec<f64> = h.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = h.signal_variance;
        for j in 0..i {
            let mut q = 0.0;
            for (d, w) in inv_l2.iter().enumerate() {
                let z = inputs[(i, d)] - inputs[(j, d)];
                q += z * z * w;
            }
            let v = h.signal_variance * (-0.5 * q).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma prior needs shape > 0 and rate > 0, got ({shape}, {rate})"
            )));
        }
        Ok(GammaPrior { shape, rate })
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        self.shape * self.rate.ln() - libm::lgamma(self.shape) + (self.shape - 1.0) * x.ln()
            - self.rate * x
    }

    /// Derivative of `log_pdf` with respect to `x`.
    fn dlog_pdf(&self, x: f64) -> f64 {
        (self.shape - 1.0) / x - self.rate
    }
}

/// Optional Gamma priors; the lengthscale prior applies to every input dimension.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub lengthscale: Option<GammaPrior>,
    pub signal_variance: Option<GammaPrior>,
    pub noise_variance: Option<GammaPrior>,
}

impl HyperPrior {
    pub fn none() -> Self {
        HyperPrior::default()
    }

    fn log_density(&self, h: &KernelHyperparams) -> f64 {
        let mut lp = 0.0;
        if let Some(p) = self.lengthscale {
            lp += h.lengthscales.iter().map(|l| p.log_pdf(*l)).sum::<f64>();
        }
        if let Some(p) = self.signal_variance {
            lp += p.log_pdf(h.signal_variance);
        }
        if let Some(p) = self.noise_variance {
            lp += p.log_pdf(h.noise_variance);
        }
        lp
    }
}

/// Per-output GP state: hyperparameters plus factors cached for prediction.
#[derive(Clone, Debug)]
pub struct OutputGp {
    pub hyper: KernelHyperparams,
    pub(crate) chol: JitteredCholesky,
    /// `(K + sn2 I)^{-1} y`
    pub alpha: DVector<f64>,
    /// `(K + sn2 I)^{-1}`
    pub inv_gram: DMatrix<f64>,
}

impl OutputGp {
    fn build(inputs: &DMatrix<f64>, y: &DVector<f64>, hyper: KernelHyperparams) -> Result<Self> {
        hyper.validate()?;
        let mut k = gram(inputs, &hyper);
        for i in 0..k.nrows() {
            k[(i, i)] += hyper.noise_variance;
        }
        let chol = cholesky_with_jitter(&k)?;
        let alpha = chol.solve_vec(y);
        let inv_gram = chol.inverse();
        Ok(OutputGp {
            hyper,
            chol,
            alpha,
            inv_gram,
        })
    }
}

/// The learned transition model: dataset plus one fitted GP per state dimension.
#[derive(Clone, Debug)]
pub struct DynamicsModel {
    dataset: RegressionDataset,
    outputs: Vec<OutputGp>,
}

impl DynamicsModel {
    /// Creates a model with data-driven initial hyperparameters (not yet fitted).
    pub fn new(dataset: RegressionDataset) -> Result<Self> {
        let hypers = initial_hyperparams(&dataset);
        DynamicsModel::with_hyperparams(dataset, hypers)
    }

    pub fn with_hyperparams(dataset: RegressionDataset, hypers: Vec<KernelHyperparams>) -> Result<Self> {
        ensure_dim("hyperparameter sets", dataset.output_dim(), hypers.len())?;
        if dataset.n_points() == 0 {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let outputs = hypers
            .into_iter()
            .enumerate()
            .map(|(a, h)| {
                ensure_dim("lengthscales", dataset.input_dim(), h.lengthscales.len())?;
                OutputGp::build(dataset.inputs(), &dataset.targets().column(a).into_owned(), h)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DynamicsModel { dataset, outputs })
    }

    pub fn dataset(&self) -> &RegressionDataset {
        &self.dataset
    }

    pub fn outputs(&self) -> &[OutputGp] {
        &self.outputs
    }

    pub fn hyperparams(&self) -> Vec<KernelHyperparams> {
        self.outputs.iter().map(|o| o.hyper.clone()).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.dataset.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.dataset.output_dim()
    }

    /// Predictive distribution of the state delta at a deterministic input.
    /// Output covariance is diagonal because the output GPs are independent.
    pub fn predict_point(&self, z: &DVector<f64>) -> Result<GaussianBelief> {
        ensure_dim("prediction input", self.input_dim(), z.len())?;
        let x = self.dataset.inputs();
        let e = self.output_dim();
        let mut mean = DVector::zeros(e);
        let mut cov = DMatrix::zeros(e, e);
        for (a, out) in self.outputs.iter().enumerate() {
            let kstar = DVector::from_fn(x.nrows(), |i, _| {
                let mut q = 0.0;
                for d in 0..z.len() {
                    let r = (x[(i, d)] - z[d]) / out.hyper.lengthscales[d];
                    q += r * r;
                }
                out.hyper.signal_variance * (-0.5 * q).exp()
            });
            mean[a] = kstar.dot(&out.alpha);
            let mut w = kstar.clone();
            out.chol.factor.l_dirty().solve_lower_triangular_mut(&mut w);
            let var = out.hyper.signal_variance - w.norm_squared() + out.hyper.noise_variance;
            cov[(a, a)] = var.max(out.hyper.noise_variance * 1e-3);
        }
        GaussianBelief::new(mean, cov)
    }
}

fn column_stats(m: &DMatrix<f64>, c: usize) -> (f64, f64) {
    let n = m.nrows() as f64;
    let col = m.column(c);
    let mean = col.sum() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Lengthscales at the per-dimension input standard deviation, signal variance
/// at the target variance and noise at one percent of it.
pub fn initial_hyperparams(dataset: &RegressionDataset) -> Vec<KernelHyperparams> {
    let lengthscales = DVector::from_fn(dataset.input_dim(), |d, _| {
        let (_, var) = column_stats(dataset.inputs(), d);
        if var > 1e-20 {
            var.sqrt()
        } else {
            1.0
        }
    });
    (0..dataset.output_dim())
        .map(|a| {
            let (_, var) = column_stats(dataset.targets(), a);
            let sf2 = var.max(1e-10);
            KernelHyperparams {
                lengthscales: lengthscales.clone(),
                signal_variance: sf2,
                noise_variance: 0.01 * sf2,
            }
        })
        .collect()
}

/// NLML of one output dimension, minus the log prior density when priors are set.
pub fn negative_log_marginal_likelihood(
    model: &DynamicsModel,
    output_dim: usize,
    priors: &HyperPrior,
) -> Result<f64> {
    let out = model
        .outputs
        .get(output_dim)
        .ok_or_else(|| Error::InvalidArgument(format!("no output dimension {output_dim}")))?;
    let y = model.dataset.targets().column(output_dim).into_owned();
    let n = y.len() as f64;
    let nlml = 0.5 * y.dot(&out.alpha) + 0.5 * out.chol.log_det() + 0.5 * n * (2.0 * PI).ln();
    Ok(nlml - priors.log_density(&out.hyper))
}

/// Log-space parameterization used during fitting:
/// `[ln l_1..ln l_D, ln sf2, ln(sn2 - floor)]`, the last entry omitted when noise is fixed.
struct NlmlProblem<'a> {
    inputs: &'a DMatrix<f64>,
    y: DVector<f64>,
    priors: HyperPrior,
    fixed_noise: Option<f64>,
    /// Squared pairwise differences per input dimension, row-major.
    sq_diff: Vec<Vec<f64>>,
    /// Barrier and the per-dimension input spread it is measured against.
    penalty: Option<(HyperPenalty, Vec<f64>)>,
}

impl<'a> NlmlProblem<'a> {
    fn new(inputs: &'a DMatrix<f64>, y: DVector<f64>, priors: HyperPrior, fixed_noise: Option<f64>) -> Self {
        let n = inputs.nrows();
        let sq_diff = (0..inputs.ncols())
            .map(|d| {
                let mut v = Vec::with_capacity(n * n);
                for i in 0..n {
                    for j in 0..n {
                        let z = inputs[(i, d)] - inputs[(j, d)];
                        v.push(z * z);
                    }
                }
                v
            })
            .collect();
        NlmlProblem {
            inputs,
            y,
            priors,
            fixed_noise,
            sq_diff,
            penalty: None,
        }
    }

    fn with_penalty(mut self, penalty: Option<HyperPenalty>) -> Self {
        self.penalty = penalty.map(|p| {
            let spread = (0..self.inputs.ncols())
                .map(|d| {
                    let (_, var) = column_stats(self.inputs, d);
                    if var > 1e-20 {
                        var.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            (p, spread)
        });
        self
    }

    /// Barrier value and its gradient in the log-space parameterization.
    fn penalty_terms(&self, h: &KernelHyperparams) -> (f64, Vec<f64>) {
        let d = self.dim();
        let n_params = d + 1 + usize::from(self.fixed_noise.is_none());
        let mut grad = vec![0.0; n_params];
        let Some((pen, spread)) = &self.penalty else {
            return (0.0, grad);
        };
        let power = pen.power as f64;
        let mut value = 0.0;
        let ls_scale = pen.max_lengthscale_ratio.ln();
        for dim in 0..d {
            let z = (h.lengthscales[dim].ln() - spread[dim].ln()) / ls_scale;
            value += z.powi(pen.power);
            grad[dim] = power * z.powi(pen.power - 1) / ls_scale;
        }
        let snr_scale = pen.max_snr.ln();
        let z = 0.5 * (h.signal_variance.ln() - h.noise_variance.ln()) / snr_scale;
        value += z.powi(pen.power);
        let dz = power * z.powi(pen.power - 1) * 0.5 / snr_scale;
        if self.fixed_noise.is_none() {
            let floor = NOISE_FLOOR_RATIO * h.signal_variance;
            grad[d] = dz * (1.0 - floor / h.noise_variance);
            grad[d + 1] = -dz * (h.noise_variance - floor) / h.noise_variance;
        } else {
            grad[d] = dz;
        }
        (value, grad)
    }

    fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    fn to_params(&self, h: &KernelHyperparams) -> Vec<f64> {
        let mut p: Vec<f64> = h.lengthscales.iter().map(|l| l.ln()).collect();
        p.push(h.signal_variance.ln());
        if self.fixed_noise.is_none() {
            let excess = (h.noise_variance - h.noise_floor()).max(1e-9 * h.signal_variance);
            p.push(excess.ln());
        }
        p
    }

    fn from_params(&self, p: &[f64]) -> KernelHyperparams {
        let d = self.dim();
        let lengthscales = DVector::from_fn(d, |i, _| p[i].exp());
        let signal_variance = p[d].exp();
        let noise_variance = match self.fixed_noise {
            Some(v) => v,
            None => NOISE_FLOOR_RATIO * signal_variance + p[d + 1].exp(),
        };
        KernelHyperparams {
            lengthscales,
            signal_variance,
            noise_variance,
        }
    }

    fn value(&self, h: &KernelHyperparams) -> Result<f64> {
        let n = self.y.len();
        let mut k = gram(self.inputs, h);
        for i in 0..n {
            k[(i, i)] += h.noise_variance;
        }
        let chol = cholesky_with_jitter(&k)?;
        let alpha = chol.solve_vec(&self.y);
        Ok(0.5 * self.y.dot(&alpha) + 0.5 * chol.log_det() + 0.5 * n as f64 * (2.0 * PI).ln()
            - self.priors.log_density(h)
            + self.penalty_terms(h).0)
    }

    fn value_and_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let h = self.from_params(p);
        let n = self.y.len();
        let d = self.dim();
        let kf = gram(self.inputs, &h);
        let mut k = kf.clone();
        for i in 0..n {
            k[(i, i)] += h.noise_variance;
        }
        let chol = cholesky_with_jitter(&k)?;
        let alpha = chol.solve_vec(&self.y);
        let nlml = 0.5 * self.y.dot(&alpha) + 0.5 * chol.log_det() + 0.5 * n as f64 * (2.0 * PI).ln();
        // W = K^{-1} - alpha alpha^T ; dNLML = 1/2 tr(W dK)
        let mut w = chol.inverse();
        w.ger(-1.0, &alpha, &alpha, 1.0);
        let mut grad = vec![0.0; p.len()];
        for (dim, g) in grad.iter_mut().enumerate().take(d) {
            let inv_l2 = 1.0 / (h.lengthscales[dim] * h.lengthscales[dim]);
            let sq = &self.sq_diff[dim];
            let mut acc = 0.0;
            for j in 0..n {
                for i in 0..n {
                    acc += w[(i, j)] * kf[(i, j)] * sq[i * n + j];
                }
            }
            *g = 0.5 * acc * inv_l2;
        }
        let w_dot_kf: f64 = w.iter().zip(kf.iter()).map(|(a, b)| a * b).sum();
        let tr_w = w.trace();
        grad[d] = 0.5 * w_dot_kf;
        if self.fixed_noise.is_none() {
            let floor = NOISE_FLOOR_RATIO * h.signal_variance;
            let excess = h.noise_variance - floor;
            grad[d] += 0.5 * tr_w * floor;
            grad[d + 1] = 0.5 * tr_w * excess;
        }
        // priors enter as -log p(h)
        if let Some(pr) = self.priors.lengthscale {
            for (dim, g) in grad.iter_mut().enumerate().take(d) {
                let l = h.lengthscales[dim];
                *g -= pr.dlog_pdf(l) * l;
            }
        }
        if let Some(pr) = self.priors.signal_variance {
            grad[d] -= pr.dlog_pdf(h.signal_variance) * h.signal_variance;
        }
        if let Some(pr) = self.priors.noise_variance {
            if self.fixed_noise.is_none() {
                let floor = NOISE_FLOOR_RATIO * h.signal_variance;
                let dn = pr.dlog_pdf(h.noise_variance);
                grad[d] -= dn * floor;
                grad[d + 1] -= dn * (h.noise_variance - floor);
            }
        }
        let (pen, pen_grad) = self.penalty_terms(&h);
        for (g, pg) in grad.iter_mut().zip(pen_grad) {
            *g += pg;
        }
        Ok((nlml - self.priors.log_density(&h) + pen, grad))
    }
}

/// Options controlling hyperparameter fitting.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub restarts: usize,
    pub fixed_noise: Option<f64>,
    pub max_iter: usize,
    pub seed: u64,
    /// Fit on standardized data and map the optimum back to raw units.
    pub normalize: bool,
    pub penalty: Option<HyperPenalty>,
}

/// Steep barrier keeping the signal-to-noise ratio `sf / sn` and the ratio of each
/// lengthscale to the input spread below the given limits:
/// `sum_d (ln(l_d / spread_d) / ln(max_lengthscale_ratio))^p + (ln(sf / sn) / ln(max_snr))^p`.
/// Unbounded ratios make `sf2 - tr(K^{-1} Q)` numerically meaningless.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPenalty {
    pub max_snr: f64,
    pub max_lengthscale_ratio: f64,
    pub power: i32,
}

impl Default for HyperPenalty {
    fn default() -> Self {
        HyperPenalty {
            max_snr: 500.0,
            max_lengthscale_ratio: 100.0,
            power: 30,
        }
    }
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 3,
            fixed_noise: None,
            max_iter: 200,
            seed: 0,
            normalize: false,
            penalty: None,
        }
    }
}

/// Fits every output GP starting from the model's current hyperparameters.
pub fn fit_hyperparameters(
    model: &DynamicsModel,
    priors: &HyperPrior,
    restarts: usize,
    fixed_noise: Option<f64>,
) -> Result<DynamicsModel> {
    fit_with_options(
        model,
        priors,
        &FitOptions {
            restarts,
            fixed_noise,
            ..FitOptions::default()
        },
    )
}

/// Affine standardization of a dataset: inputs by mean/std, targets by std only.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub input_mean: DVector<f64>,
    pub input_std: DVector<f64>,
    pub target_std: DVector<f64>,
}

impl Normalization {
    pub fn from_dataset(ds: &RegressionDataset) -> Self {
        let safe_std = |var: f64| if var > 1e-20 { var.sqrt() } else { 1.0 };
        let mut input_mean = DVector::zeros(ds.input_dim());
        let mut input_std = DVector::zeros(ds.input_dim());
        for d in 0..ds.input_dim() {
            let (m, v) = column_stats(ds.inputs(), d);
            input_mean[d] = m;
            input_std[d] = safe_std(v);
        }
        let target_std = DVector::from_fn(ds.output_dim(), |a, _| {
            let n = ds.n_points() as f64;
            let var = ds.targets().column(a).iter().map(|v| v * v).sum::<f64>() / n
                - (ds.targets().column(a).sum() / n).powi(2);
            safe_std(var)
        });
        Normalization {
            input_mean,
            input_std,
            target_std,
        }
    }

    pub fn apply(&self, ds: &RegressionDataset) -> Result<RegressionDataset> {
        let inputs = DMatrix::from_fn(ds.n_points(), ds.input_dim(), |i, d| {
            (ds.inputs()[(i, d)] - self.input_mean[d]) / self.input_std[d]
        });
        let targets = DMatrix::from_fn(ds.n_points(), ds.output_dim(), |i, a| {
            ds.targets()[(i, a)] / self.target_std[a]
        });
        RegressionDataset::new(inputs, targets)
    }

    pub fn hyper_to_normalized(&self, a: usize, h: &KernelHyperparams) -> KernelHyperparams {
        let s2 = self.target_std[a].powi(2);
        KernelHyperparams {
            lengthscales: h.lengthscales.component_div(&self.input_std),
            signal_variance: h.signal_variance / s2,
            noise_variance: h.noise_variance / s2,
        }
    }

    pub fn hyper_to_raw(&self, a: usize, h: &KernelHyperparams) -> KernelHyperparams {
        let s2 = self.target_std[a].powi(2);
        KernelHyperparams {
            lengthscales: h.lengthscales.component_mul(&self.input_std),
            signal_variance: h.signal_variance * s2,
            noise_variance: h.noise_variance * s2,
        }
    }
}

pub fn fit_with_options(model: &DynamicsModel, priors: &HyperPrior, opts: &FitOptions) -> Result<DynamicsModel> {
    if model.dataset.n_points() < 2 {
        return Err(Error::InvalidArgument("fitting needs at least 2 data points".into()));
    }
    let normalization = opts.normalize.then(|| Normalization::from_dataset(&model.dataset));
    let work_ds = match &normalization {
        Some(nz) => nz.apply(&model.dataset)?,
        None => model.dataset.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let perturb = Normal::new(0.0, 0.5).expect("valid sigma");
    let mut fitted = Vec::with_capacity(model.output_dim());
    for (a, out) in model.outputs.iter().enumerate() {
        let start = match &normalization {
            Some(nz) => nz.hyper_to_normalized(a, &out.hyper),
            None => out.hyper.clone(),
        };
        let fixed = opts.fixed_noise.map(|v| match &normalization {
            Some(nz) => v / nz.target_std[a].powi(2),
            None => v,
        });
        let problem = NlmlProblem::new(work_ds.inputs(), work_ds.targets().column(a).into_owned(), *priors, fixed)
            .with_penalty(opts.penalty);
        let mut start = start;
        if let Some(v) = fixed {
            start.noise_variance = v;
        }
        let baseline = problem.value(&start).ok();
        let mut best: Option<(f64, KernelHyperparams)> = baseline.map(|v| (v, start.clone()));
        let p0 = problem.to_params(&start);
        let lbfgs_opts = LbfgsOptions {
            max_iter: opts.max_iter,
            f_rel_tol: 1e-10,
            grad_tol: 1e-6,
            ..LbfgsOptions::default()
        };
        for r in 0..opts.restarts.max(1) {
            let init: Vec<f64> = if r == 0 {
                p0.clone()
            } else {
                p0.iter().map(|v| v + perturb.sample(&mut rng)).collect()
            };
            let res = lbfgs::minimize(
                |p| match problem.value_and_grad(p) {
                    Ok(v) => v,
                    Err(_) => (f64::INFINITY, vec![0.0; p.len()]),
                },
                &init,
                &lbfgs_opts,
            );
            if res.f.is_finite() {
                let h = problem.from_params(&res.x);
                if let Ok(v) = problem.value(&h) {
                    if best.as_ref().map_or(true, |(b, _)| v < *b) {
                        best = Some((v, h));
                    }
                }
            }
        }
        let (_, h) = best.ok_or_else(|| Error::IllConditioned {
            jitters: crate::linalg::JITTER_LADDER.iter().map(|j| j * start.signal_variance).collect(),
        })?;
        let mut raw = match &normalization {
            Some(nz) => nz.hyper_to_raw(a, &h),
            None => h,
        };
        if let Some(v) = opts.fixed_noise {
            raw.noise_variance = v;
        }
        fitted.push(raw);
    }
    DynamicsModel::with_hyperparams(model.dataset.clone(), fitted)
}

/// Checkpoint document: dataset matrices and per-output hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format: String,
    pub version: u32,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub outputs: Vec<CheckpointOutput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointOutput {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

pub const MODEL_FORMAT: &str = "gp-dynamics-model";

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidArgument("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl DynamicsModel {
    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format: MODEL_FORMAT.to_string(),
            version: 1,
            inputs: matrix_rows(self.dataset.inputs()),
            targets: matrix_rows(self.dataset.targets()),
            outputs: self
                .outputs
                .iter()
                .map(|o| CheckpointOutput {
                    lengthscales: o.hyper.lengthscales.iter().cloned().collect(),
                    signal_variance: o.hyper.signal_variance,
                    noise_variance: o.hyper.noise_variance,
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        if ck.format != MODEL_FORMAT {
            return Err(Error::InvalidArgument(format!("unexpected format {:?}", ck.format)));
        }
        let d = ck.outputs.first().map_or(0, |o| o.lengthscales.len());
        let inputs = matrix_from_rows(&ck.inputs, d)?;
        let targets = matrix_from_rows(&ck.targets, ck.outputs.len())?;
        let hypers = ck
            .outputs
            .iter()
            .map(|o| KernelHyperparams {
                lengthscales: DVector::from_vec(o.lengthscales.clone()),
                signal_variance: o.signal_variance,
                noise_variance: o.noise_variance,
            })
            .collect();
        DynamicsModel::with_hyperparams(RegressionDataset::new(inputs, targets)?, hypers)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(&self.to_checkpoint()).expect("checkpoint is always serializable")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ck: ModelCheckpoint = toml::from_str(text).map_err(|e| Error::Config {
            location: "model checkpoint".into(),
            message: e.to_string(),
        })?;
        DynamicsModel::from_checkpoint(&ck)
    }
}
