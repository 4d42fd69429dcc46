//! Univariate, bivariate and multivariate normal probabilities.
//!
//! The bivariate routine follows Genz's adaptation of the Drezner–Wesolowsky
//! method (Gauss–Legendre quadrature in the correlation coefficient), which is
//! accurate to roughly double precision. Higher-dimensional rectangles use
//! Genz's separation-of-variables transform integrated with a randomized
//! Richtmyer lattice.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWO_PI: f64 = 2.0 * PI;

pub fn pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x).exp() / TWO_PI.sqrt()
}

pub fn cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
    }
}

/// Inverse of the standard normal CDF (Acklam's rational approximation
/// followed by one Halley refinement step).
pub fn inv_cdf(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = cdf(x) - p;
    let u = e * TWO_PI.sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

// Gauss–Legendre nodes (negative half) and weights for 6, 12 and 20 points.
const GL6: [(f64, f64); 3] = [
    (0.1713244923791705, -0.9324695142031522),
    (0.3607615730481384, -0.6612093864662647),
    (0.4679139345726904, -0.2386191860831970),
];
const GL12: [(f64, f64); 6] = [
    (0.4717533638651177e-01, -0.9815606342467191),
    (0.1069393259953183, -0.9041172563704750),
    (0.1600783285433464, -0.7699026741943050),
    (0.2031674267230659, -0.5873179542866171),
    (0.2334925365383547, -0.3678314989981802),
    (0.2491470458134029, -0.1252334085114692),
];
const GL20: [(f64, f64); 10] = [
    (0.1761400713915212e-01, -0.9931285991850949),
    (0.4060142980038694e-01, -0.9639719272779138),
    (0.6267204833410906e-01, -0.9122344282513259),
    (0.8327674157670475e-01, -0.8391169718222188),
    (0.1019301198172404, -0.7463319064601508),
    (0.1181945319615184, -0.6360536807265150),
    (0.1316886384491766, -0.5108670019508271),
    (0.1420961093183821, -0.3737060887154196),
    (0.1491729864726037, -0.2277858511416451),
    (0.1527533871307259, -0.7652652113349733e-01),
];

/// `P(X > dh, Y > dk)` for standard normals with correlation `r`.
pub fn bvn_upper(dh: f64, dk: f64, r: f64) -> f64 {
    let r = r.clamp(-1.0, 1.0);
    if dh == f64::INFINITY || dk == f64::INFINITY {
        return 0.0;
    }
    if dh == f64::NEG_INFINITY {
        return if dk == f64::NEG_INFINITY { 1.0 } else { cdf(-dk) };
    }
    if dk == f64::NEG_INFINITY {
        return cdf(-dh);
    }
    let quad: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        if r != 0.0 {
            let hs = (h * h + k * k) / 2.0;
            let asr = r.asin();
            for &(w, x) in quad {
                for sign in [1.0, -1.0] {
                    let sn = (asr * (sign * x + 1.0) / 2.0).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr / (2.0 * TWO_PI);
        }
        return bvn + cdf(-h) * cdf(-k);
    }
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let a_s = (1.0 - r) * (1.0 + r);
        let mut a = a_s.sqrt();
        let b_s = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let asr = -(b_s / a_s + hk) / 2.0;
        if asr > -100.0 {
            bvn = a
                * asr.exp()
                * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0 + c * d * a_s * a_s / 5.0);
        }
        if -hk < 100.0 {
            let b = b_s.sqrt();
            bvn -= (-hk / 2.0).exp()
                * TWO_PI.sqrt()
                * cdf(-b / a)
                * b
                * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
        }
        a /= 2.0;
        for &(w, x) in quad {
            for sign in [1.0, -1.0] {
                let xs = (a * (sign * x + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                let asr = -(b_s / xs + hk) / 2.0;
                if asr > -100.0 {
                    bvn += a
                        * w
                        * asr.exp()
                        * ((-hk * xs / (2.0 * (1.0 + rs).powi(2))).exp() / rs
                            - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        bvn = -bvn / TWO_PI;
    }
    if r > 0.0 {
        bvn += cdf(-h.max(k));
    } else {
        bvn = -bvn;
        if k > h {
            if h < 0.0 {
                bvn += cdf(k) - cdf(h);
            } else {
                bvn += cdf(-h) - cdf(-k);
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// Lower-orthant bivariate normal CDF `P(X <= h, Y <= k)`.
pub fn bvn_cdf(h: f64, k: f64, r: f64) -> f64 {
    bvn_upper(-h, -k, r)
}

/// Bivariate standard normal density with correlation `r`.
pub fn bvn_pdf(h: f64, k: f64, r: f64) -> f64 {
    if h.is_infinite() || k.is_infinite() {
        return 0.0;
    }
    let one_minus = 1.0 - r * r;
    (-(h * h - 2.0 * r * h * k + k * k) / (2.0 * one_minus)).exp() / (TWO_PI * one_minus.sqrt())
}

/// Partial derivatives of `bvn_cdf(h, k, r)` with respect to `h`, `k` and `r`.
pub fn bvn_cdf_grad(h: f64, k: f64, r: f64) -> (f64, f64, f64) {
    let s = (1.0 - r * r).sqrt();
    let dh = if h.is_infinite() {
        0.0
    } else if k == f64::INFINITY {
        pdf(h)
    } else if k == f64::NEG_INFINITY {
        0.0
    } else {
        pdf(h) * cdf((k - r * h) / s)
    };
    let dk = if k.is_infinite() {
        0.0
    } else if h == f64::INFINITY {
        pdf(k)
    } else if h == f64::NEG_INFINITY {
        0.0
    } else {
        pdf(k) * cdf((h - r * k) / s)
    };
    (dh, dk, bvn_pdf(h, k, r))
}

/// Settings for quasi-Monte Carlo rectangle integration.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QmcSettings {
    pub points: usize,
    pub shifts: usize,
    pub abs_tol: f64,
    pub seed: u64,
}

impl Default for QmcSettings {
    fn default() -> Self {
        QmcSettings {
            points: 5_000,
            shifts: 8,
            abs_tol: 1e-4,
            seed: 0,
        }
    }
}

/// Result of a QMC rectangle integration: estimate and 3-sigma error bound.
#[derive(Clone, Copy, Debug)]
pub struct QmcEstimate {
    pub value: f64,
    pub error: f64,
}

const PRIMES: [f64; 16] = [
    2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0, 41.0, 43.0, 47.0, 53.0,
];

/// `P(lower <= x <= upper)` for `x ~ N(0, cov)` via Genz's transform.
///
/// Infinite limits are allowed. The randomization is seeded, so repeated calls
/// with identical arguments are bit-identical.
pub fn genz_rectangle(
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    cov: &DMatrix<f64>,
    settings: &QmcSettings,
) -> QmcEstimate {
    let d = lower.len();
    let chol = match crate::linalg::cholesky_with_jitter(cov) {
        Ok(c) => c.factor.l(),
        Err(_) => {
            return QmcEstimate {
                value: f64::NAN,
                error: f64::INFINITY,
            }
        }
    };
    let first = |c: &DMatrix<f64>| {
        let lo = cdf(lower[0] / c[(0, 0)]);
        let hi = cdf(upper[0] / c[(0, 0)]);
        (lo, hi)
    };
    if d == 1 {
        let (lo, hi) = first(&chol);
        return QmcEstimate {
            value: (hi - lo).max(0.0),
            error: 0.0,
        };
    }
    let generator: Vec<f64> = (0..d - 1).map(|i| PRIMES[i % PRIMES.len()].sqrt().fract()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut y = vec![0.0; d];
    let mut shift_means = Vec::with_capacity(settings.shifts);
    let (d0, e0) = first(&chol);
    for _ in 0..settings.shifts.max(1) {
        let shift: Vec<f64> = (0..d - 1).map(|_| rng.gen::<f64>()).collect();
        let mut sum = 0.0;
        for k in 1..=settings.points {
            let mut lo = d0;
            let mut hi = e0;
            let mut f = hi - lo;
            for i in 1..d {
                if f <= 0.0 {
                    break;
                }
                let raw = (k as f64 * generator[i - 1] + shift[i - 1]).fract();
                let w = (2.0 * raw - 1.0).abs();
                let p = (lo + w * (hi - lo)).clamp(1e-300, 1.0 - 1e-16);
                y[i - 1] = inv_cdf(p);
                let s: f64 = (0..i).map(|j| chol[(i, j)] * y[j]).sum();
                lo = cdf((lower[i] - s) / chol[(i, i)]);
                hi = cdf((upper[i] - s) / chol[(i, i)]);
                f *= (hi - lo).max(0.0);
            }
            sum += f;
        }
        shift_means.push(sum / settings.points as f64);
        if shift_means.len() >= 2 {
            let est = summarize(&shift_means);
            if est.error < settings.abs_tol {
                return est;
            }
        }
    }
    summarize(&shift_means)
}

fn summarize(means: &[f64]) -> QmcEstimate {
    let n = means.len() as f64;
    let value = means.iter().sum::<f64>() / n;
    let error = if means.len() > 1 {
        let var = means.iter().map(|m| (m - value).powi(2)).sum::<f64>() / (n * (n - 1.0));
        3.0 * var.sqrt()
    } else {
        f64::INFINITY
    };
    QmcEstimate { value, error }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force lower-orthant CDF by integrating `pdf(x) * Phi((k - r x)/s)`
    /// over `x` with a fine composite Simpson rule.
    fn bvn_cdf_quadrature(h: f64, k: f64, r: f64) -> f64 {
        let s = (1.0 - r * r).sqrt();
        let lo = -12.0_f64;
        let hi = h.min(12.0);
        if hi <= lo {
            return 0.0;
        }
        let n = 20_000;
        let step = (hi - lo) / n as f64;
        let f = |x: f64| pdf(x) * cdf((k - r * x) / s);
        let mut acc = f(lo) + f(hi);
        for i in 1..n {
            let x = lo + i as f64 * step;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        acc * step / 3.0
    }

    #[test]
    fn univariate_reference_values() {
        assert!((cdf(1.96) - 0.9750021048517795).abs() < 1e-14);
        assert_eq!(cdf(f64::INFINITY), 1.0);
        assert!((cdf(1.96) - cdf(-1.96) - 0.95).abs() < 1e-4);
        for p in [1e-12, 1e-5, 0.01, 0.3, 0.5, 0.77, 0.99, 1.0 - 1e-9] {
            assert!((cdf(inv_cdf(p)) - p).abs() < 1e-14 * p.max(1e-3) + 1e-16, "p = {p}");
        }
    }

    #[test]
    fn bivariate_matches_quadrature() {
        for &(h, k) in &[(0.0, 0.0), (1.0, -0.5), (-1.3, 2.1), (0.4, 0.4), (-2.0, -1.0)] {
            for &r in &[-0.99, -0.95, -0.6, -0.2, 0.0, 0.1, 0.5, 0.8, 0.93, 0.999] {
                let fast = bvn_cdf(h, k, r);
                let slow = bvn_cdf_quadrature(h, k, r);
                assert!((fast - slow).abs() < 1e-9, "h={h} k={k} r={r}: {fast} vs {slow}");
            }
        }
    }

    #[test]
    fn bivariate_known_values() {
        // P(X<=0, Y<=0) = 1/4 + asin(r)/(2 pi)
        for r in [-0.9, -0.3, 0.0, 0.4, 0.95] {
            let exact = 0.25 + f64::asin(r) / TWO_PI;
            assert!((bvn_cdf(0.0, 0.0, r) - exact).abs() < 1e-14);
        }
        assert!((bvn_cdf(1.0, f64::INFINITY, 0.3) - cdf(1.0)).abs() < 1e-15);
    }

    #[test]
    fn bivariate_gradient_matches_finite_differences() {
        let (h, k, r) = (0.3, -0.7, 0.45);
        let (gh, gk, gr) = bvn_cdf_grad(h, k, r);
        let e = 1e-6;
        let fd_h = (bvn_cdf(h + e, k, r) - bvn_cdf(h - e, k, r)) / (2.0 * e);
        let fd_k = (bvn_cdf(h, k + e, r) - bvn_cdf(h, k - e, r)) / (2.0 * e);
        let fd_r = (bvn_cdf(h, k, r + e) - bvn_cdf(h, k, r - e)) / (2.0 * e);
        assert!((gh - fd_h).abs() < 1e-8);
        assert!((gk - fd_k).abs() < 1e-8);
        assert!((gr - fd_r).abs() < 1e-8);
    }

    #[test]
    fn genz_agrees_with_bivariate_routine() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
        let lower = DVector::from_vec(vec![-1.0, -0.5]);
        let upper = DVector::from_vec(vec![1.5, f64::INFINITY]);
        let est = genz_rectangle(&lower, &upper, &cov, &QmcSettings::default());
        let s2 = 2.0_f64.sqrt();
        let r = 0.6 / s2;
        let exact = bvn_cdf(1.5, f64::INFINITY, r) - bvn_cdf(-1.0, f64::INFINITY, r)
            - bvn_cdf(1.5, -0.5 / s2, r)
            + bvn_cdf(-1.0, -0.5 / s2, r);
        assert!((est.value - exact).abs() < 1e-4, "{} vs {}", est.value, exact);
    }

    #[test]
    fn genz_trivariate_independent_is_product() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.25]));
        let lower = DVector::from_vec(vec![-1.0, -2.0, f64::NEG_INFINITY]);
        let upper = DVector::from_vec(vec![1.0, 1.0, 0.2]);
        let est = genz_rectangle(&lower, &upper, &cov, &QmcSettings::default());
        let exact = (cdf(1.0) - cdf(-1.0)) * (cdf(0.5) - cdf(-1.0)) * cdf(0.4);
        assert!((est.value - exact).abs() < 1e-4);
    }

    #[test]
    fn genz_is_deterministic_per_seed() {
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 1.0]);
        let lower = DVector::from_element(3, -1.0);
        let upper = DVector::from_element(3, 1.0);
        let s = QmcSettings::default();
        let a = genz_rectangle(&lower, &upper, &cov, &s);
        let b = genz_rectangle(&lower, &upper, &cov, &s);
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }
}
