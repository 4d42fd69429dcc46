//! Exact moments of a weighted sum of squared-exponential bumps under a Gaussian input.
//!
//! For outputs `f_a(x) = sum_i beta_ai k_a(x, X_i)` and `x ~ N(m, s)` this computes
//! the mean, covariance and input-output covariance of `f`, plus the reverse-mode
//! gradients with respect to the input moments and the layer parameters. The GP
//! dynamics model adds the posterior-variance term (through the inverse Gram matrix)
//! and process noise; the RBF policy uses neither.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_dim, Result};
use crate::linalg::{cholesky_with_jitter, symmetrize};

pub struct SeOutput<'a> {
    /// `1 / l_d^2` per input dimension.
    pub inv_sq_lengthscales: DVector<f64>,
    pub signal_variance: f64,
    pub weights: Cow<'a, DVector<f64>>,
    /// Present for GP outputs: adds `sf2 - tr(K^{-1} Q)` to the variance.
    pub inv_gram: Option<&'a DMatrix<f64>>,
    pub noise_variance: f64,
}

pub struct SeLayer<'a> {
    pub centers: &'a DMatrix<f64>,
    pub outputs: Vec<SeOutput<'a>>,
}

#[derive(Clone, Debug)]
pub struct SeMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// `cov(x, f)`, shape `[input_dim x n_outputs]`.
    pub input_output_cov: DMatrix<f64>,
}

/// Adjoints of a scalar loss with respect to each `SeMoments` field.
#[derive(Clone, Debug)]
pub struct SeAdjoint {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub input_output_cov: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct SeGradients {
    pub mean: DVector<f64>,
    /// Symmetrized.
    pub cov: DMatrix<f64>,
    pub centers: DMatrix<f64>,
    pub inv_sq_lengthscales: Vec<DVector<f64>>,
    pub weights: Vec<DVector<f64>>,
}

struct MeanPart {
    b: DMatrix<f64>,
    q: DVector<f64>,
    /// Row `i` holds `(B nu_i)^T`.
    bnu: DMatrix<f64>,
    u: DVector<f64>,
    m: f64,
}

struct PairPart {
    t_mat: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    l: DVector<f64>,
    q: DMatrix<f64>,
}

impl<'a> SeLayer<'a> {
    pub fn input_dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.outputs.len()
    }

    fn check(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<()> {
        ensure_dim("moment input mean", self.input_dim(), mean.len())?;
        ensure_dim("moment input covariance", self.input_dim(), cov.nrows())?;
        ensure_dim("moment input covariance", self.input_dim(), cov.ncols())?;
        for out in &self.outputs {
            ensure_dim("lengthscales", self.input_dim(), out.inv_sq_lengthscales.len())?;
            ensure_dim("weights", self.centers.nrows(), out.weights.len())?;
        }
        Ok(())
    }

    fn deviations(&self, mean: &DVector<f64>) -> DMatrix<f64> {
        let mut nu = self.centers.clone();
        for (d, mut col) in nu.column_iter_mut().enumerate() {
            col.add_scalar_mut(-mean[d]);
        }
        nu
    }

    fn mean_part(&self, a: usize, nu: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<MeanPart> {
        let out = &self.outputs[a];
        let lam = &out.inv_sq_lengthscales;
        let mut sl = s.clone();
        for d in 0..lam.len() {
            sl[(d, d)] += 1.0 / lam[d];
        }
        let chol = cholesky_with_jitter(&sl)?;
        let b = chol.inverse();
        let log_c = out.signal_variance.ln() - 0.5 * (chol.log_det() + lam.iter().map(|v| v.ln()).sum::<f64>());
        let bnu = nu * &b;
        let n = nu.nrows();
        let q = DVector::from_fn(n, |i, _| (log_c - 0.5 * nu.row(i).dot(&bnu.row(i))).exp());
        let bq = out.weights.component_mul(&q);
        let m = bq.sum();
        let t = nu.tr_mul(&bq);
        let u = &b * &t;
        Ok(MeanPart { b, q, bnu, u, m })
    }

    fn scaled(nu: &DMatrix<f64>, lam: &DVector<f64>) -> DMatrix<f64> {
        let mut z = nu.clone();
        for (d, mut col) in z.column_iter_mut().enumerate() {
            col *= lam[d];
        }
        z
    }

    fn log_k(&self, a: usize, nu: &DMatrix<f64>) -> DVector<f64> {
        let out = &self.outputs[a];
        let lsf = out.signal_variance.ln();
        DVector::from_fn(nu.nrows(), |i, _| {
            let mut q = 0.0;
            for d in 0..nu.ncols() {
                q += out.inv_sq_lengthscales[d] * nu[(i, d)] * nu[(i, d)];
            }
            lsf - 0.5 * q
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn pair_part(
        &self,
        a: usize,
        b: usize,
        zeta_a: &DMatrix<f64>,
        zeta_b: &DMatrix<f64>,
        logk_a: &DVector<f64>,
        logk_b: &DVector<f64>,
        s: &DMatrix<f64>,
    ) -> Result<PairPart> {
        let dim = s.nrows();
        let l = &self.outputs[a].inv_sq_lengthscales + &self.outputs[b].inv_sq_lengthscales;
        let lh = l.map(f64::sqrt);
        let mut rs = DMatrix::from_fn(dim, dim, |i, j| lh[i] * s[(i, j)] * lh[j]);
        for d in 0..dim {
            rs[(d, d)] += 1.0;
        }
        let chol = cholesky_with_jitter(&rs)?;
        let logdet_r = chol.log_det();
        let rs_inv = chol.inverse();
        let t_mat = DMatrix::from_fn(dim, dim, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            (id - rs_inv[(i, j)]) / (lh[i] * lh[j])
        });
        let r_inv = DMatrix::from_fn(dim, dim, |i, j| rs_inv[(i, j)] * lh[j] / lh[i]);
        let zt_a = zeta_a * &t_mat;
        let zt_b = zeta_b * &t_mat;
        let n = zeta_a.nrows();
        let r = DVector::from_fn(n, |i, _| logk_a[i] + 0.5 * zt_a.row(i).dot(&zeta_a.row(i)) - 0.5 * logdet_r);
        let c = DVector::from_fn(n, |j, _| logk_b[j] + 0.5 * zt_b.row(j).dot(&zeta_b.row(j)));
        let mut q = zt_a * zeta_b.transpose();
        for j in 0..n {
            for i in 0..n {
                q[(i, j)] = (q[(i, j)] + r[i] + c[j]).exp();
            }
        }
        Ok(PairPart { t_mat, r_inv, l, q })
    }

    pub fn forward(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<SeMoments> {
        self.check(mean, cov)?;
        let e = self.n_outputs();
        let dim = self.input_dim();
        let nu = self.deviations(mean);
        let mut out_mean = DVector::zeros(e);
        let mut io_cov = DMatrix::zeros(dim, e);
        for a in 0..e {
            let mp = self.mean_part(a, &nu, cov)?;
            out_mean[a] = mp.m;
            io_cov.set_column(a, &(cov * &mp.u));
        }
        let zetas: Vec<DMatrix<f64>> = self
            .outputs
            .iter()
            .map(|o| Self::scaled(&nu, &o.inv_sq_lengthscales))
            .collect();
        let logks: Vec<DVector<f64>> = (0..e).map(|a| self.log_k(a, &nu)).collect();
        let mut out_cov = DMatrix::zeros(e, e);
        for a in 0..e {
            for b in a..e {
                let pp = self.pair_part(a, b, &zetas[a], &zetas[b], &logks[a], &logks[b], cov)?;
                let wa = self.outputs[a].weights.as_ref();
                let wb = self.outputs[b].weights.as_ref();
                let mut v = wa.dot(&(&pp.q * wb)) - out_mean[a] * out_mean[b];
                if a == b {
                    let out = &self.outputs[a];
                    if let Some(kinv) = out.inv_gram {
                        v += out.signal_variance - kinv.dot(&pp.q);
                    }
                    v += out.noise_variance;
                }
                out_cov[(a, b)] = v;
                out_cov[(b, a)] = v;
            }
        }
        Ok(SeMoments {
            mean: out_mean,
            cov: out_cov,
            input_output_cov: io_cov,
        })
    }

    /// Reverse pass: recomputes the forward intermediates, then pulls `adj` back.
    pub fn backward(&self, mean: &DVector<f64>, cov: &DMatrix<f64>, adj: &SeAdjoint) -> Result<SeGradients> {
        self.check(mean, cov)?;
        let e = self.n_outputs();
        let dim = self.input_dim();
        let n = self.centers.nrows();
        let nu = self.deviations(mean);
        let parts: Vec<MeanPart> = (0..e).map(|a| self.mean_part(a, &nu, cov)).collect::<Result<_>>()?;
        let zetas: Vec<DMatrix<f64>> = self
            .outputs
            .iter()
            .map(|o| Self::scaled(&nu, &o.inv_sq_lengthscales))
            .collect();
        let logks: Vec<DVector<f64>> = (0..e).map(|a| self.log_k(a, &nu)).collect();

        let mut m_bar = adj.mean.clone();
        let mut nu_bar = DMatrix::<f64>::zeros(n, dim);
        let mut s_bar = DMatrix::<f64>::zeros(dim, dim);
        let mut lam_bar: Vec<DVector<f64>> = vec![DVector::zeros(dim); e];
        let mut beta_bar: Vec<DVector<f64>> = vec![DVector::zeros(n); e];

        for a in 0..e {
            for b in a..e {
                let w = if a == b {
                    adj.cov[(a, a)]
                } else {
                    adj.cov[(a, b)] + adj.cov[(b, a)]
                };
                if w == 0.0 {
                    continue;
                }
                m_bar[a] -= w * parts[b].m;
                m_bar[b] -= w * parts[a].m;
                let pp = self.pair_part(a, b, &zetas[a], &zetas[b], &logks[a], &logks[b], cov)?;
                let wa = self.outputs[a].weights.as_ref();
                let wb = self.outputs[b].weights.as_ref();
                let kinv = if a == b { self.outputs[a].inv_gram } else { None };
                let mut g = DMatrix::from_fn(n, n, |i, j| pp.q[(i, j)] * w * wa[i] * wb[j]);
                if let Some(kinv) = kinv {
                    g -= pp.q.component_mul(kinv) * w;
                }
                beta_bar[a] += (&pp.q * wb) * w;
                beta_bar[b] += pp.q.tr_mul(wa) * w;

                let g_row = DVector::from_fn(n, |i, _| g.row(i).sum());
                let g_col = DVector::from_fn(n, |j, _| g.column(j).sum());
                let g_sum = g_row.sum();
                let za = &zetas[a];
                let zb = &zetas[b];
                let mut y_a = &g * zb;
                let mut y_b = g.tr_mul(za);
                for d in 0..dim {
                    for i in 0..n {
                        y_a[(i, d)] += g_row[i] * za[(i, d)];
                        y_b[(i, d)] += g_col[i] * zb[(i, d)];
                    }
                }
                let z = za.tr_mul(&y_a) + zb.tr_mul(&y_b);
                let yt_a = &y_a * &pp.t_mat;
                let yt_b = &y_b * &pp.t_mat;
                let lam_a = &self.outputs[a].inv_sq_lengthscales;
                let lam_b = &self.outputs[b].inv_sq_lengthscales;
                for d in 0..dim {
                    for i in 0..n {
                        nu_bar[(i, d)] += -g_row[i] * za[(i, d)] + yt_a[(i, d)] * lam_a[d];
                        nu_bar[(i, d)] += -g_col[i] * zb[(i, d)] + yt_b[(i, d)] * lam_b[d];
                    }
                }
                // logdet R and T = R^{-1} s
                let l_rinv = DMatrix::from_fn(dim, dim, |i, j| pp.l[i] * pp.r_inv[(i, j)]);
                s_bar -= l_rinv.transpose() * (0.5 * g_sum);
                let mut i_lt = -DMatrix::from_fn(dim, dim, |i, j| pp.l[i] * pp.t_mat[(i, j)]);
                for d in 0..dim {
                    i_lt[(d, d)] += 1.0;
                }
                s_bar += (i_lt * &z * &pp.r_inv).transpose() * 0.5;
                let tzt = &pp.t_mat * &z * &pp.t_mat;
                for d in 0..dim {
                    let l_bar = -0.5 * g_sum * pp.t_mat[(d, d)] - 0.5 * tzt[(d, d)];
                    let mut ga = l_bar;
                    let mut gb = l_bar;
                    for i in 0..n {
                        let v2 = nu[(i, d)] * nu[(i, d)];
                        ga += -0.5 * g_row[i] * v2 + nu[(i, d)] * yt_a[(i, d)];
                        gb += -0.5 * g_col[i] * v2 + nu[(i, d)] * yt_b[(i, d)];
                    }
                    lam_bar[a][d] += ga;
                    lam_bar[b][d] += gb;
                }
            }
        }

        for (a, mp) in parts.iter().enumerate() {
            let out = &self.outputs[a];
            let lam = &out.inv_sq_lengthscales;
            let beta = out.weights.as_ref();
            let c_bar = adj.input_output_cov.column(a).into_owned();
            let t_bar = &mp.b * (cov * &c_bar);
            s_bar += (&c_bar - &t_bar) * mp.u.transpose();
            for d in 0..dim {
                lam_bar[a][d] += t_bar[d] * mp.u[d] / (lam[d] * lam[d]);
            }
            let nu_t = &nu * &t_bar;
            let mut h = DVector::zeros(n);
            for i in 0..n {
                let q_bar = beta[i] * nu_t[i] + m_bar[a] * beta[i];
                beta_bar[a][i] += mp.q[i] * nu_t[i] + m_bar[a] * mp.q[i];
                h[i] = q_bar * mp.q[i];
                for d in 0..dim {
                    nu_bar[(i, d)] += beta[i] * mp.q[i] * t_bar[d] - h[i] * mp.bnu[(i, d)];
                }
            }
            let h_sum = h.sum();
            let mut hb = mp.bnu.clone();
            for i in 0..n {
                hb.row_mut(i).scale_mut(h[i]);
            }
            s_bar += mp.b.scale(-0.5 * h_sum) + mp.bnu.tr_mul(&hb) * 0.5;
            for d in 0..dim {
                let big_lam = 1.0 / lam[d];
                let mut acc = 0.0;
                for i in 0..n {
                    acc += h[i] * (-0.5 * mp.b[(d, d)] + 0.5 / big_lam + 0.5 * mp.bnu[(i, d)].powi(2));
                }
                lam_bar[a][d] += acc * (-1.0 / (lam[d] * lam[d]));
            }
        }

        let mean_bar = DVector::from_fn(dim, |d, _| -nu_bar.column(d).sum());
        Ok(SeGradients {
            mean: mean_bar,
            cov: symmetrize(&s_bar),
            centers: nu_bar,
            inv_sq_lengthscales: lam_bar,
            weights: beta_bar,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        centers: DMatrix<f64>,
        lams: Vec<DVector<f64>>,
        sf2: Vec<f64>,
        betas: Vec<DVector<f64>>,
        kinv: Vec<DMatrix<f64>>,
        noise: Vec<f64>,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        (&a * a.transpose()) * scale + DMatrix::identity(d, d) * (0.05 * scale)
    }

    fn fixture(seed: u64, n: usize, d: usize, e: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Fixture {
            centers: DMatrix::from_fn(n, d, |_, _| rng.gen_range(-1.5..1.5)),
            lams: (0..e).map(|_| DVector::from_fn(d, |_, _| rng.gen_range(0.3..2.0))).collect(),
            sf2: (0..e).map(|_| rng.gen_range(0.5..2.0)).collect(),
            betas: (0..e).map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))).collect(),
            kinv: (0..e).map(|_| random_spd(&mut rng, n, 0.3)).collect(),
            noise: (0..e).map(|_| rng.gen_range(0.01..0.1)).collect(),
            mean: DVector::from_fn(d, |_, _| rng.gen_range(-0.5..0.5)),
            cov: random_spd(&mut rng, d, 0.2),
        }
    }

    impl Fixture {
        fn layer(&self, with_gp_terms: bool) -> SeLayer<'_> {
            SeLayer {
                centers: &self.centers,
                outputs: (0..self.lams.len())
                    .map(|a| SeOutput {
                        inv_sq_lengthscales: self.lams[a].clone(),
                        signal_variance: self.sf2[a],
                        weights: Cow::Borrowed(&self.betas[a]),
                        inv_gram: with_gp_terms.then_some(&self.kinv[a]),
                        noise_variance: if with_gp_terms { self.noise[a] } else { 0.0 },
                    })
                    .collect(),
            }
        }
    }

    fn loss(m: &SeMoments, adj: &SeAdjoint) -> f64 {
        adj.mean.dot(&m.mean) + adj.cov.dot(&m.cov) + adj.input_output_cov.dot(&m.input_output_cov)
    }

    fn random_adjoint(seed: u64, d: usize, e: usize) -> SeAdjoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SeAdjoint {
            mean: DVector::from_fn(e, |_, _| rng.gen_range(-1.0..1.0)),
            cov: DMatrix::from_fn(e, e, |_, _| rng.gen_range(-1.0..1.0)),
            input_output_cov: DMatrix::from_fn(d, e, |_, _| rng.gen_range(-1.0..1.0)),
        }
    }

    fn assert_close(analytic: f64, fd: f64, what: &str) {
        let err = (analytic - fd).abs() / fd.abs().max(1e-2);
        assert!(err < 1e-5, "{what}: analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn reverse_pass_matches_finite_differences() {
        for (seed, gp) in [(1, true), (2, false), (3, true)] {
            let (n, d, e) = (5, 3, 2);
            let fx = fixture(seed, n, d, e);
            let adj = random_adjoint(seed + 100, d, e);
            let grads = fx.layer(gp).backward(&fx.mean, &fx.cov, &adj).unwrap();
            let eval = |f: &Fixture| loss(&f.layer(gp).forward(&f.mean, &f.cov).unwrap(), &adj);
            let h = 1e-6;
            for k in 0..d {
                let mut p = fixture(seed, n, d, e);
                p.mean[k] += h;
                let mut q = fixture(seed, n, d, e);
                q.mean[k] -= h;
                assert_close(grads.mean[k], (eval(&p) - eval(&q)) / (2.0 * h), "mean");
            }
            for i in 0..d {
                for j in 0..=i {
                    let bump = |f: &mut Fixture, v: f64| {
                        f.cov[(i, j)] += v;
                        if i != j {
                            f.cov[(j, i)] += v;
                        }
                    };
                    let mut p = fixture(seed, n, d, e);
                    bump(&mut p, h);
                    let mut q = fixture(seed, n, d, e);
                    bump(&mut q, -h);
                    let fd = (eval(&p) - eval(&q)) / (2.0 * h);
                    let analytic = if i == j { grads.cov[(i, i)] } else { 2.0 * grads.cov[(i, j)] };
                    assert_close(analytic, fd, "cov");
                }
            }
            for i in 0..n {
                for k in 0..d {
                    let mut p = fixture(seed, n, d, e);
                    p.centers[(i, k)] += h;
                    let mut q = fixture(seed, n, d, e);
                    q.centers[(i, k)] -= h;
                    assert_close(grads.centers[(i, k)], (eval(&p) - eval(&q)) / (2.0 * h), "centers");
                }
            }
            for a in 0..e {
                for k in 0..d {
                    let mut p = fixture(seed, n, d, e);
                    p.lams[a][k] += h;
                    let mut q = fixture(seed, n, d, e);
                    q.lams[a][k] -= h;
                    assert_close(grads.inv_sq_lengthscales[a][k], (eval(&p) - eval(&q)) / (2.0 * h), "lambda");
                }
                for i in 0..n {
                    let mut p = fixture(seed, n, d, e);
                    p.betas[a][i] += h;
                    let mut q = fixture(seed, n, d, e);
                    q.betas[a][i] -= h;
                    assert_close(grads.weights[a][i], (eval(&p) - eval(&q)) / (2.0 * h), "weights");
                }
            }
        }
    }

    #[test]
    fn single_bump_mean_has_closed_form() {
        // E[sf2 exp(-(x - c)^2 / (2 l^2))] for x ~ N(mu, s2)
        let centers = DMatrix::from_element(1, 1, 0.4);
        let beta = DVector::from_element(1, 1.0);
        let (l2, sf2, mu, s2) = (0.8_f64, 1.3, -0.2, 0.35);
        let layer = SeLayer {
            centers: &centers,
            outputs: vec![SeOutput {
                inv_sq_lengthscales: DVector::from_element(1, 1.0 / l2),
                signal_variance: sf2,
                weights: Cow::Borrowed(&beta),
                inv_gram: None,
                noise_variance: 0.0,
            }],
        };
        let m = layer
            .forward(&DVector::from_element(1, mu), &DMatrix::from_element(1, 1, s2))
            .unwrap();
        let expected = sf2 * (l2 / (l2 + s2)).sqrt() * (-(mu - 0.4_f64).powi(2) / (2.0 * (l2 + s2))).exp();
        assert!((m.mean[0] - expected).abs() < 1e-14);
        // second moment via the same identity with halved lengthscale squared
        let l2h = l2 / 2.0;
        let second = sf2 * sf2 * (l2h / (l2h + s2)).sqrt() * (-(mu - 0.4_f64).powi(2) / (2.0 * (l2h + s2))).exp();
        assert!((m.cov[(0, 0)] - (second - expected * expected)).abs() < 1e-13);
    }
}
