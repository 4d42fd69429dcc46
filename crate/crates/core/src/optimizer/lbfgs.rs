//! Limited-memory BFGS with a strong-Wolfe line search (minimization).
//!
//! Non-finite objective values are treated as rejected trial points: the line
//! search shrinks toward the last accepted point instead of failing.

use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    pub c1: f64,
    pub c2: f64,
    pub grad_tol: f64,
    /// Relative change in the objective below which the run is considered converged.
    pub f_rel_tol: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iter: 100,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-8,
            f_rel_tol: 1e-12,
            max_line_search: 25,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect()
}

struct Trial {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

/// Minimizes `objective`, which returns `(value, gradient)`.
pub fn minimize<F>(mut objective: F, x0: &[f64], opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut evaluations = 1;
    let (mut f, mut g) = objective(x0);
    let mut x = x0.to_vec();
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);

    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return LbfgsResult {
            x,
            f,
            grad: g,
            iterations: 0,
            evaluations,
            converged: false,
        };
    }
    if norm(&g) <= opts.grad_tol {
        return LbfgsResult {
            x,
            f,
            grad: g,
            iterations: 0,
            evaluations,
            converged: true,
        };
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let mut d = two_loop(&g, &history);
        let mut dphi0 = dot(&g, &d);
        if !(dphi0 < 0.0) || !dphi0.is_finite() {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            dphi0 = dot(&g, &d);
        }
        let alpha0 = if history.is_empty() {
            (1.0 / norm(&d)).min(1.0)
        } else {
            1.0
        };
        iterations += 1;
        let search = line_search(&mut objective, &x, f, dphi0, &d, alpha0, opts, &mut evaluations);
        let Some(trial) = search else {
            // No acceptable decrease along this direction.
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };
        let x_new = axpy(&x, trial.alpha, &d);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let f_old = f;
        x = x_new;
        f = trial.f;
        g = trial.g;
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        if norm(&g) <= opts.grad_tol {
            converged = true;
            break;
        }
        if (f_old - f).abs() <= opts.f_rel_tol * f_old.abs().max(f.abs()).max(1.0) {
            converged = true;
            break;
        }
    }
    LbfgsResult {
        x,
        f,
        grad: g,
        iterations,
        evaluations,
        converged,
    }
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dot(s, y) / dot(y, y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    f0: f64,
    dphi0: f64,
    d: &[f64],
    alpha0: f64,
    opts: &LbfgsOptions,
    evaluations: &mut usize,
) -> Option<Trial>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut eval = |alpha: f64, evaluations: &mut usize| -> Trial {
        *evaluations += 1;
        let (f, g) = objective(&axpy(x, alpha, d));
        let finite = f.is_finite() && g.iter().all(|v| v.is_finite());
        let f = if finite { f } else { f64::INFINITY };
        let dphi = if finite { dot(&g, d) } else { f64::NAN };
        Trial { alpha, f, g, dphi }
    };
    let armijo = |t: &Trial| t.f <= f0 + opts.c1 * t.alpha * dphi0;
    let curvature = |t: &Trial| t.dphi.abs() <= -opts.c2 * dphi0;

    let mut prev = Trial {
        alpha: 0.0,
        f: f0,
        g: Vec::new(),
        dphi: dphi0,
    };
    let mut alpha = alpha0;
    let mut best_armijo: Option<Trial> = None;
    let mut budget = opts.max_line_search;
    let mut first = true;
    let (mut lo, mut hi);
    loop {
        if budget == 0 {
            return best_armijo;
        }
        budget -= 1;
        let t = eval(alpha, evaluations);
        if !t.f.is_finite() || !armijo(&t) || (!first && t.f >= prev.f) {
            lo = prev;
            hi = t;
            break;
        }
        if curvature(&t) {
            return Some(t);
        }
        if t.dphi >= 0.0 {
            hi = prev;
            lo = t;
            break;
        }
        first = false;
        alpha *= 2.0;
        best_armijo = Some(Trial {
            alpha: t.alpha,
            f: t.f,
            g: t.g.clone(),
            dphi: t.dphi,
        });
        prev = t;
    }

    // Zoom between `lo` (satisfies Armijo, lowest value so far) and `hi`.
    if lo.alpha > 0.0 {
        best_armijo = Some(Trial {
            alpha: lo.alpha,
            f: lo.f,
            g: lo.g.clone(),
            dphi: lo.dphi,
        });
    }
    while budget > 0 {
        budget -= 1;
        let width = hi.alpha - lo.alpha;
        let mut trial_alpha = if hi.f.is_finite() && hi.dphi.is_finite() {
            cubic_min(&lo, &hi)
        } else {
            lo.alpha + 0.5 * width
        };
        let (a, b) = if lo.alpha < hi.alpha {
            (lo.alpha, hi.alpha)
        } else {
            (hi.alpha, lo.alpha)
        };
        let margin = 0.1 * (b - a);
        if !trial_alpha.is_finite() || trial_alpha < a + margin || trial_alpha > b - margin {
            trial_alpha = 0.5 * (a + b);
        }
        let t = eval(trial_alpha, evaluations);
        if !t.f.is_finite() || !armijo(&t) || t.f >= lo.f {
            hi = t;
        } else {
            if curvature(&t) {
                return Some(t);
            }
            if t.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            best_armijo = Some(Trial {
                alpha: t.alpha,
                f: t.f,
                g: t.g.clone(),
                dphi: t.dphi,
            });
            lo = t;
        }
        if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1e-300) {
            break;
        }
    }
    best_armijo.filter(|t| t.f < f0)
}

/// Minimizer of the cubic interpolating values and slopes at both ends.
fn cubic_min(a: &Trial, b: &Trial) -> f64 {
    let d1 = a.dphi + b.dphi - 3.0 * (a.f - b.f) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.dphi * b.dphi;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    b.alpha - (b.alpha - a.alpha) * (b.dphi + d2 - d1) / (b.dphi - a.dphi + 2.0 * d2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_converges_to_known_optimum() {
        // f(x) = 1/2 (x - c)^T A (x - c) with an ill-conditioned diagonal A.
        let a = [1.0, 10.0, 100.0, 3.0];
        let c = [1.0, -2.0, 0.5, 3.0];
        let res = minimize(
            |x| {
                let f = x.iter().enumerate().map(|(i, xi)| 0.5 * a[i] * (xi - c[i]).powi(2)).sum();
                let g = x.iter().enumerate().map(|(i, xi)| a[i] * (xi - c[i])).collect();
                (f, g)
            },
            &[0.0; 4],
            &LbfgsOptions::default(),
        );
        assert!(res.iterations < 50);
        for i in 0..4 {
            assert!((res.x[i] - c[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn rosenbrock() {
        let res = minimize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
                (f, g)
            },
            &[-1.2, 1.0],
            &LbfgsOptions {
                max_iter: 200,
                ..Default::default()
            },
        );
        assert!((res.x[0] - 1.0).abs() < 1e-5 && (res.x[1] - 1.0).abs() < 1e-5, "{:?}", res);
    }

    #[test]
    fn iteration_budget_is_a_hard_cap() {
        let res = minimize(
            |x| ((x[0] - 3.0).powi(4), vec![4.0 * (x[0] - 3.0).powi(3)]),
            &[0.0],
            &LbfgsOptions {
                max_iter: 1,
                ..Default::default()
            },
        );
        assert!(res.iterations <= 1);
    }

    #[test]
    fn non_finite_region_is_avoided() {
        // log barrier: infinite for x <= 0, minimum at x = 1.
        let res = minimize(
            |x| {
                if x[0] <= 0.0 {
                    (f64::INFINITY, vec![0.0])
                } else {
                    (x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]])
                }
            },
            &[5.0],
            &LbfgsOptions::default(),
        );
        assert!((res.x[0] - 1.0).abs() < 1e-5);
    }
}
