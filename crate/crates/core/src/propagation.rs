//! Belief propagation through policy and GP dynamics by moment matching.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};

use crate::belief::GaussianBelief;
use crate::controllers::{squash_moments, squash_moments_backward, Policy};
use crate::error::{ensure_dim, Error, Result};
use crate::gp::DynamicsModel;
use crate::linalg::{project_psd, symmetrize};
use crate::se_moments::{SeAdjoint, SeLayer, SeOutput};

/// Covariance traces above this abort the rollout.
pub const DIVERGENCE_TRACE: f64 = 1e6;

/// Gaussian over the stacked `(state, control)` vector.
#[derive(Clone, Debug)]
pub struct JointStateControl {
    pub belief: GaussianBelief,
    /// `cov(x, u)`, `[n x m]`.
    pub cross_cov: DMatrix<f64>,
}

impl JointStateControl {
    pub fn state_dim(&self) -> usize {
        self.cross_cov.nrows()
    }
}

#[derive(Clone, Debug)]
pub struct PredictedTrajectory {
    /// `beliefs[t]` is the state belief after `t + 1` transitions.
    pub beliefs: Vec<GaussianBelief>,
    /// Filled by the objectives module; empty after a bare rollout.
    pub per_step_reward: Vec<f64>,
    /// Filled by the objectives module; empty after a bare rollout.
    pub per_step_safe_prob: Vec<f64>,
}

impl PredictedTrajectory {
    pub fn horizon(&self) -> usize {
        self.beliefs.len()
    }
}

fn stack(state: &GaussianBelief, control_mean: &DVector<f64>, control_cov: &DMatrix<f64>, cross: &DMatrix<f64>) -> GaussianBelief {
    let n = state.dim();
    let m = control_mean.len();
    let mut mean = DVector::zeros(n + m);
    mean.rows_mut(0, n).copy_from(&state.mean);
    mean.rows_mut(n, m).copy_from(control_mean);
    let mut cov = DMatrix::zeros(n + m, n + m);
    cov.view_mut((0, 0), (n, n)).copy_from(&state.cov);
    cov.view_mut((0, n), (n, m)).copy_from(cross);
    cov.view_mut((n, 0), (m, n)).copy_from(&cross.transpose());
    cov.view_mut((n, n), (m, m)).copy_from(control_cov);
    GaussianBelief { mean, cov }
}

pub fn join_state_control(state: &GaussianBelief, policy: &Policy) -> Result<JointStateControl> {
    ensure_dim("policy input", policy.state_dim(), state.dim())?;
    let am = policy.moments_of_action(state)?;
    Ok(JointStateControl {
        belief: stack(state, &am.control.mean, &am.control.cov, &am.cross_cov),
        cross_cov: am.cross_cov,
    })
}

pub(crate) fn model_layer(model: &DynamicsModel) -> SeLayer<'_> {
    SeLayer {
        centers: model.dataset().inputs(),
        outputs: model
            .outputs()
            .iter()
            .map(|o| SeOutput {
                inv_sq_lengthscales: o.hyper.lengthscales.map(|l| 1.0 / (l * l)),
                signal_variance: o.hyper.signal_variance,
                weights: Cow::Borrowed(&o.alpha),
                inv_gram: Some(&o.inv_gram),
                noise_variance: o.hyper.noise_variance,
            })
            .collect(),
    }
}

/// Next-state belief from the joint `(x, u)` belief; the model predicts deltas.
pub fn moment_match_step(model: &DynamicsModel, joint: &JointStateControl) -> Result<GaussianBelief> {
    ensure_dim("joint belief", model.input_dim(), joint.belief.dim())?;
    let n = model.output_dim();
    ensure_dim("state part of joint belief", n, joint.state_dim())?;
    let se = model_layer(model).forward(&joint.belief.mean, &joint.belief.cov)?;
    let mu = joint.belief.mean.rows(0, n) + &se.mean;
    let c = se.input_output_cov.rows(0, n);
    let cov = joint.belief.cov.view((0, 0), (n, n)) + &se.cov + c + c.transpose();
    Ok(GaussianBelief {
        mean: mu,
        cov: project_psd(&cov)?,
    })
}

fn check_divergence(step: usize, b: &GaussianBelief) -> Result<()> {
    let trace = b.cov.trace();
    if !(trace <= DIVERGENCE_TRACE) || b.mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step,
            trace,
            bound: DIVERGENCE_TRACE,
        });
    }
    Ok(())
}

pub fn rollout_beliefs(model: &DynamicsModel, policy: &Policy, init: &GaussianBelief, horizon: usize) -> Result<PredictedTrajectory> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    ensure_dim("initial belief", model.output_dim(), init.dim())?;
    let mut beliefs = Vec::with_capacity(horizon);
    let mut current = init.clone();
    for t in 0..horizon {
        let joint = join_state_control(&current, policy)?;
        current = moment_match_step(model, &joint)?;
        check_divergence(t, &current)?;
        beliefs.push(current.clone());
    }
    Ok(PredictedTrajectory {
        beliefs,
        per_step_reward: Vec::new(),
        per_step_safe_prob: Vec::new(),
    })
}

/// Adjoints of the state belief entering a step, plus the policy-parameter gradient.
pub(crate) struct StepGrad {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub theta: DVector<f64>,
}

/// Reverse pass through one `join_state_control` + `moment_match_step` composition.
/// `prev` is the belief the step started from; `next_mean_bar`, `next_cov_bar` are the
/// adjoints of the resulting belief.
pub(crate) fn step_backward(
    model: &DynamicsModel,
    layer: &SeLayer<'_>,
    policy: &Policy,
    prev: &GaussianBelief,
    next_mean_bar: &DVector<f64>,
    next_cov_bar: &DMatrix<f64>,
) -> Result<StepGrad> {
    let n = prev.dim();
    let m = policy.control_dim();
    let raw = policy.raw_moments(&prev.mean, &prev.cov)?;
    let sq = squash_moments(&raw, policy.bounds())?;
    let joint = stack(prev, &sq.mean, &sq.cov, &sq.cross);

    let sbar = symmetrize(next_cov_bar);
    let mut io_bar = DMatrix::zeros(n + m, model.output_dim());
    io_bar.view_mut((0, 0), (n, n)).copy_from(&(&sbar * 2.0));
    let g = layer.backward(
        &joint.mean,
        &joint.cov,
        &SeAdjoint {
            mean: next_mean_bar.clone(),
            cov: sbar.clone(),
            input_output_cov: io_bar,
        },
    )?;

    let mut mean_bar = next_mean_bar + g.mean.rows(0, n);
    let mut cov_bar = &sbar + g.cov.view((0, 0), (n, n));
    let u_mean_bar = g.mean.rows(n, m).into_owned();
    let u_cov_bar = g.cov.view((n, n), (m, m)).into_owned();
    let cross_bar = g.cov.view((0, n), (n, m)) + g.cov.view((n, 0), (m, n)).transpose();

    let (v_mean_bar, v_cov_bar, v_cross_bar) =
        squash_moments_backward(&raw, policy.bounds(), &u_mean_bar, &u_cov_bar, &cross_bar)?;
    let pg = policy.raw_moments_backward(&prev.mean, &prev.cov, &v_mean_bar, &v_cov_bar, &v_cross_bar)?;
    mean_bar += pg.state_mean;
    cov_bar += pg.state_cov;
    Ok(StepGrad {
        mean: mean_bar,
        cov: symmetrize(&cov_bar),
        theta: pg.theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::Bound;
    use crate::gp::{fit_with_options, FitOptions, HyperPenalty, HyperPrior, KernelHyperparams, RegressionDataset};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn hyper(l: &[f64], sf2: f64, sn2: f64) -> KernelHyperparams {
        KernelHyperparams {
            lengthscales: DVector::from_vec(l.to_vec()),
            signal_variance: sf2,
            noise_variance: sn2,
        }
    }

    /// Random small GP over `(x1, x2, u)` predicting 2D deltas.
    fn random_model(seed: u64, n_points: usize) -> DynamicsModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = DMatrix::from_fn(n_points, 3, |_, _| rng.gen_range(-1.5..1.5));
        let targets = DMatrix::from_fn(n_points, 2, |_, _| rng.gen_range(-0.5..0.5));
        let hypers = (0..2)
            .map(|_| {
                hyper(
                    &[rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)],
                    rng.gen_range(0.1..0.5),
                    rng.gen_range(0.005..0.02),
                )
            })
            .collect();
        DynamicsModel::with_hyperparams(RegressionDataset::new(inputs, targets).unwrap(), hypers).unwrap()
    }

    fn random_joint(seed: u64) -> JointStateControl {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-0.4..0.4));
        let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.01;
        let mean = DVector::from_fn(3, |_, _| rng.gen_range(-0.5..0.5));
        JointStateControl {
            cross_cov: cov.view((0, 2), (2, 1)).into_owned(),
            belief: GaussianBelief { mean, cov },
        }
    }

    #[test]
    fn linear_policy_with_point_belief_joins_trivially() {
        let p = Policy::linear(
            DMatrix::from_row_slice(1, 2, &[0.5, -1.0]),
            DVector::from_element(1, 0.25),
            vec![Bound::new(-1e6, 1e6).unwrap()],
        )
        .unwrap();
        let s = GaussianBelief::point(DVector::from_vec(vec![1.0, 2.0]));
        let j = join_state_control(&s, &p).unwrap();
        assert!((j.belief.mean[2] - (-1.25)).abs() < 1e-9);
        assert_eq!(j.belief.cov[(2, 2)], 0.0);
        assert_eq!(j.cross_cov, DMatrix::zeros(2, 1));
    }

    #[test]
    fn point_input_matches_point_prediction() {
        let model = random_model(1, 10);
        let z = DVector::from_vec(vec![0.2, -0.4, 0.7]);
        let joint = JointStateControl {
            belief: GaussianBelief::point(z.clone()),
            cross_cov: DMatrix::zeros(2, 1),
        };
        let next = moment_match_step(&model, &joint).unwrap();
        let pred = model.predict_point(&z).unwrap();
        for a in 0..2 {
            assert!((next.mean[a] - (z[a] + pred.mean[a])).abs() < 1e-12);
            assert!((next.cov[(a, a)] - pred.cov[(a, a)]).abs() < 1e-12);
        }
        assert!(next.cov[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn single_training_point_mean_is_scaled_expected_kernel() {
        let (x1, ell, sf2, mu, s2) = (0.3, 0.9_f64, 1.4, -0.2, 0.5);
        let ds = RegressionDataset::new(DMatrix::from_element(1, 2, x1), DMatrix::from_element(1, 1, 0.7)).unwrap();
        // second input column is a control with a huge lengthscale so it is irrelevant
        let model = DynamicsModel::with_hyperparams(ds, vec![hyper(&[ell, 1e8], sf2, 0.01)]).unwrap();
        let alpha = model.outputs()[0].alpha[0];
        let mut cov = DMatrix::zeros(2, 2);
        cov[(0, 0)] = s2;
        let joint = JointStateControl {
            belief: GaussianBelief {
                mean: DVector::from_vec(vec![mu, x1]),
                cov,
            },
            cross_cov: DMatrix::zeros(1, 1),
        };
        let next = moment_match_step(&model, &joint).unwrap();
        let l2 = ell * ell;
        let ek = sf2 * (l2 / (l2 + s2)).sqrt() * (-(mu - x1).powi(2) / (2.0 * (l2 + s2))).exp();
        assert!((next.mean[0] - mu - alpha * ek).abs() < 1e-12);
    }

    /// Monte-Carlo oracle: average GP posterior mean and variance over sampled inputs.
    pub(crate) fn mc_next_state(model: &DynamicsModel, joint: &JointStateControl, samples: usize, seed: u64) -> (DVector<f64>, DMatrix<f64>) {
        let d = joint.belief.dim();
        let n = joint.state_dim();
        let l = joint.belief.cov.clone().cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s1 = DVector::<f64>::zeros(n);
        let mut s2 = DMatrix::<f64>::zeros(n, n);
        let mut var_sum = DVector::<f64>::zeros(n);
        for _ in 0..samples {
            let z: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let x = &joint.belief.mean + &l * z;
            let p = model.predict_point(&x).unwrap();
            let next = x.rows(0, n) + &p.mean;
            s1 += &next;
            s2 += &next * next.transpose();
            for a in 0..n {
                var_sum[a] += p.cov[(a, a)];
            }
        }
        let k = samples as f64;
        let mean = &s1 / k;
        let mut cov = &s2 / k - &mean * mean.transpose();
        for a in 0..n {
            cov[(a, a)] += var_sum[a] / k;
        }
        (mean, cov)
    }

    #[test]
    fn moment_matching_agrees_with_monte_carlo() {
        for seed in 0..3 {
            let model = random_model(seed, 8);
            let joint = random_joint(seed + 10);
            let next = moment_match_step(&model, &joint).unwrap();
            let (mc_mean, mc_cov) = mc_next_state(&model, &joint, 200_000, seed);
            assert!((&next.mean - &mc_mean).amax() < 1e-2);
            let rel = (&next.cov - &mc_cov).norm() / mc_cov.norm();
            assert!(rel < 5e-2, "relative covariance error {rel}");
        }
    }

    #[test]
    fn shrinking_input_covariance_converges_to_point_prediction() {
        let model = random_model(4, 10);
        let z = DVector::from_vec(vec![0.1, 0.3, -0.2]);
        let pred = model.predict_point(&z).unwrap();
        let mut last = f64::INFINITY;
        for eps in [1e-2, 1e-4, 1e-6] {
            let joint = JointStateControl {
                belief: GaussianBelief {
                    mean: z.clone(),
                    cov: DMatrix::identity(3, 3) * eps,
                },
                cross_cov: DMatrix::zeros(2, 1),
            };
            let next = moment_match_step(&model, &joint).unwrap();
            let mut point_cov = pred.cov.clone();
            point_cov += DMatrix::identity(2, 2) * eps;
            let gap = (&next.mean - (z.rows(0, 2) + &pred.mean)).amax().max((&next.cov - &point_cov).amax());
            assert!(gap < last, "gap {gap} did not shrink below {last}");
            last = gap;
        }
    }

    #[test]
    fn rollout_tracks_linear_gaussian_filter() {
        // x' = a x + b u, u = k x + c (wide bounds: squashing is nearly linear)
        let (a, b, k, c) = (0.9, 0.3, -0.5, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n_pts = 120;
        let inputs = DMatrix::from_fn(n_pts, 2, |_, j| if j == 0 { rng.gen_range(-2.5..2.5) } else { rng.gen_range(-2.5..2.5) });
        let targets = DMatrix::from_fn(n_pts, 1, |i, _| (a - 1.0) * inputs[(i, 0)] + b * inputs[(i, 1)]);
        let ds = RegressionDataset::new(inputs, targets).unwrap();
        let opts = FitOptions {
            restarts: 1,
            penalty: Some(HyperPenalty::default()),
            ..FitOptions::default()
        };
        let model = fit_with_options(&DynamicsModel::new(ds).unwrap(), &HyperPrior::none(), &opts).unwrap();
        let policy = Policy::linear(
            DMatrix::from_element(1, 1, k),
            DVector::from_element(1, c),
            vec![Bound::new(-500.0, 500.0).unwrap()],
        )
        .unwrap();
        let init = GaussianBelief::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 0.1)).unwrap();
        let traj = rollout_beliefs(&model, &policy, &init, 10).map_err(|e| format!("{e}; {:?}", model.hyperparams())).unwrap();
        let (mut mu, mut var) = (1.0, 0.1);
        let closed = a + b * k;
        for belief in &traj.beliefs {
            mu = closed * mu + b * c;
            var = closed * closed * var;
            assert!((belief.mean[0] - mu).abs() < 1e-3, "{} vs {mu}", belief.mean[0]);
            assert!(belief.cov[(0, 0)].is_finite() && belief.cov[(0, 0)] >= 0.0);
        }
        let _ = var;
    }

    #[test]
    fn rollout_length_and_invariants() {
        let model = random_model(6, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2) * 0.05).unwrap();
        let policy = Policy::random_rbf(5, &init, &DVector::from_element(2, 0.2), vec![Bound::new(-1.0, 1.0).unwrap()], &mut rng).unwrap();
        for h in [1, 7] {
            let traj = rollout_beliefs(&model, &policy, &init, h).unwrap();
            assert_eq!(traj.horizon(), h);
            for b in &traj.beliefs {
                b.check_invariants().unwrap();
            }
        }
        let one = rollout_beliefs(&model, &policy, &init, 1).unwrap();
        let manual = moment_match_step(&model, &join_state_control(&init, &policy).unwrap()).unwrap();
        assert_eq!(one.beliefs[0], manual);
    }

    #[test]
    fn exploding_model_is_reported_as_divergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = DMatrix::from_fn(10, 2, |_, _| rng.gen_range(-1.0..1.0));
        let targets = DMatrix::from_fn(10, 1, |i, _| 1e4 * inputs[(i, 0)]);
        let model = DynamicsModel::with_hyperparams(
            RegressionDataset::new(inputs, targets).unwrap(),
            vec![hyper(&[0.5, 0.5], 1e8, 1e6)],
        )
        .unwrap();
        let policy = Policy::linear(DMatrix::zeros(1, 1), DVector::zeros(1), vec![Bound::new(-1.0, 1.0).unwrap()]).unwrap();
        let init = GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, 0.1)).unwrap();
        assert!(matches!(
            rollout_beliefs(&model, &policy, &init, 5),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn step_backward_matches_finite_differences() {
        let model = random_model(8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let prev = GaussianBelief::new(DVector::from_vec(vec![0.2, -0.3]), DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1])).unwrap();
        let policy = Policy::random_rbf(4, &prev, &DVector::from_element(2, 0.3), vec![Bound::new(-1.0, 1.5).unwrap()], &mut rng).unwrap();
        let wm = DVector::from_vec(vec![0.7, -1.2]);
        let wc = DMatrix::from_row_slice(2, 2, &[0.4, -0.3, 0.9, 1.1]);
        let loss = |p: &Policy, b: &GaussianBelief| {
            let next = moment_match_step(&model, &join_state_control(b, p).unwrap()).unwrap();
            wm.dot(&next.mean) + wc.dot(&next.cov)
        };
        let layer = model_layer(&model);
        let g = step_backward(&model, &layer, &policy, &prev, &wm, &wc).unwrap();
        let theta = policy.theta();
        for i in 0..theta.len() {
            let h = 1e-6 * (1.0 + theta[i].abs());
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (loss(&policy.with_theta(tp.as_slice()).unwrap(), &prev) - loss(&policy.with_theta(tm.as_slice()).unwrap(), &prev)) / (2.0 * h);
            assert!((g.theta[i] - fd).abs() / fd.abs().max(1e-3) < 1e-4, "theta[{i}] {} vs {fd}", g.theta[i]);
        }
        for k in 0..2 {
            let mut p = prev.clone();
            p.mean[k] += 1e-6;
            let mut q = prev.clone();
            q.mean[k] -= 1e-6;
            let fd = (loss(&policy, &p) - loss(&policy, &q)) / 2e-6;
            assert!((g.mean[k] - fd).abs() / fd.abs().max(1e-3) < 1e-4);
            for l in 0..=k {
                let mut p = prev.clone();
                let mut q = prev.clone();
                p.cov[(k, l)] += 1e-6;
                q.cov[(k, l)] -= 1e-6;
                if k != l {
                    p.cov[(l, k)] += 1e-6;
                    q.cov[(l, k)] -= 1e-6;
                }
                let fd = (loss(&policy, &p) - loss(&policy, &q)) / 2e-6;
                let an = if k == l { g.cov[(k, k)] } else { 2.0 * g.cov[(k, l)] };
                assert!((an - fd).abs() / fd.abs().max(1e-3) < 1e-4, "cov ({k},{l}) {an} vs {fd}");
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn moment_matched_outputs_are_symmetric_psd(
            seed in 0u64..10_000, mx in -1.5f64..1.5, my in -1.5f64..1.5, s1 in 1e-6f64..1.0, s2 in 1e-6f64..1.0, rho in -0.9f64..0.9,
        ) {
            let model = random_model(seed, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = rho * (s1 * s2).sqrt();
            let init = GaussianBelief::new(DVector::from_vec(vec![mx, my]), DMatrix::from_row_slice(2, 2, &[s1, c, c, s2])).unwrap();
            let policy = Policy::random_rbf(4, &init, &DVector::from_element(2, 0.3), vec![Bound::new(-1.0, 1.0).unwrap()], &mut rng).unwrap();
            let traj = rollout_beliefs(&model, &policy, &init, 4).unwrap();
            for b in &traj.beliefs {
                let asym = (&b.cov - b.cov.transpose()).amax();
                proptest::prop_assert!(asym <= 1e-10);
                let eig = b.cov.clone().symmetric_eigenvalues().min();
                proptest::prop_assert!(eig >= -1e-9);
            }
        }
    }
}
