//! Joint belief over the active mode and each mode's parameter vector.
//!
//! For each candidate mode the parameter belief is Gaussian and conjugate to
//! the model's Gaussian transition noise, so one observed transition updates
//! it in closed form. Mode probabilities update by Bayes' rule with each
//! mode's marginal transition likelihood, computed and combined in the log
//! domain so extreme likelihood ratios never overflow. [`CapConfig`] keeps
//! the filter adaptive: probabilities are floored so no mode is ever ruled
//! out irrevocably, and posterior parameter variances are floored so the
//! filter keeps listening.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{ModeModel, ModelSet};

/// Tolerances under which [`apply_caps`] treats a belief as already capped
/// and returns it unchanged (making the operation idempotent bit-for-bit).
const CAP_SUM_TOL: f64 = 1e-12;

/// Gaussian belief over one mode's parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn n(&self) -> usize {
        self.mean.len()
    }
}

/// Joint belief: mode probabilities plus per-mode parameter beliefs.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    pub mode_probs: Vec<f64>,
    pub params: Vec<GaussianBelief>,
}

impl BeliefState {
    /// Initial belief taken from the model set's priors.
    pub fn from_priors(models: &ModelSet) -> Self {
        BeliefState {
            mode_probs: models.prior_probs(),
            params: models
                .modes
                .iter()
                .map(|m| GaussianBelief { mean: m.prior_mean.clone(), cov: m.prior_cov.clone() })
                .collect(),
        }
    }

    pub fn n_modes(&self) -> usize {
        self.mode_probs.len()
    }

    /// Index of the most probable mode (first one on ties).
    pub fn most_probable_mode(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.mode_probs.iter().enumerate() {
            if *p > self.mode_probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Anti-degeneracy caps applied after every belief update.
#[derive(Debug, Clone, PartialEq)]
pub struct CapConfig {
    /// Floor kept under every mode probability; requires `p_min·n_m < 1`.
    pub p_min: f64,
    /// Per-mode elementwise floors on posterior parameter variances.
    pub var_floor: Vec<DVector<f64>>,
}

impl CapConfig {
    /// Validate against a model set's mode count and parameter dimensions.
    pub fn validate(&self, models: &ModelSet) -> Result<()> {
        let n_m = models.n_modes();
        if !(self.p_min.is_finite() && self.p_min >= 0.0) {
            return Err(Error::Config(format!("p_min must be a nonnegative real, got {}", self.p_min)));
        }
        if self.p_min * n_m as f64 >= 1.0 {
            return Err(Error::Config(format!(
                "p_min = {} too large: {n_m} modes need p_min < {}",
                self.p_min,
                1.0 / n_m as f64
            )));
        }
        if self.var_floor.len() != n_m {
            return Err(Error::Dimension(format!(
                "var_floor has {} entries, model set has {n_m} modes",
                self.var_floor.len()
            )));
        }
        for (i, floor) in self.var_floor.iter().enumerate() {
            let n_g = models.modes[i].n_gamma();
            if floor.len() != n_g {
                return Err(Error::Dimension(format!(
                    "var_floor[{i}] has {} entries, mode {} has {n_g} parameters",
                    floor.len(),
                    models.modes[i].name
                )));
            }
            if floor.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!("var_floor[{i}] entries must be nonnegative reals")));
            }
        }
        Ok(())
    }
}

/// Posterior parameter belief and log marginal likelihood of one observed
/// transition under one mode, computed from a shared innovation
/// factorization.
#[derive(Debug, Clone)]
pub struct TransitionEvidence {
    pub posterior: GaussianBelief,
    pub log_likelihood: f64,
}

/// Closed-form Bayesian update of one mode's parameter belief from an
/// observed transition `(x, u) → x_next`, together with the transition's
/// marginal log likelihood under that mode.
///
/// With `Φ = Φ(x,u)` and residual `r = x_next - g(x,u)`, the marginal
/// distribution of `r` is Gaussian with mean `Φ·μ` and covariance
/// `S = Σ_w + Φ·Σ·Φᵀ`, and the posterior is the standard conjugate
/// linear-Gaussian update. It is computed in gain form
/// (`K = Σ·Φᵀ·S⁻¹`, Joseph-stabilized covariance), which is algebraically
/// identical to the additive information-form update but never inverts the
/// prior covariance — a zero-variance (already identified) prior passes
/// through exactly.
pub fn transition_evidence(
    prior: &GaussianBelief,
    mode: &ModeModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_next: &DVector<f64>,
) -> Result<TransitionEvidence> {
    let n_g = mode.n_gamma();
    if prior.mean.len() != n_g || prior.cov.nrows() != n_g || prior.cov.ncols() != n_g {
        return Err(Error::Dimension(format!(
            "parameter belief for mode {} has dimension {}, basis expects {n_g}",
            mode.name,
            prior.mean.len()
        )));
    }
    let phi = mode.basis.eval(x, u);
    let residual = x_next - mode.drift.eval(x, u);
    let n_x = residual.len();

    let s = &mode.noise_cov + &phi * &prior.cov * phi.transpose();
    let chol = linalg::chol_pd(&s, "innovation covariance")?;

    let innovation = &residual - &phi * &prior.mean;
    let solved = chol.solve(&innovation);
    let quad = innovation.dot(&solved);
    let log_likelihood =
        -0.5 * (n_x as f64 * (2.0 * std::f64::consts::PI).ln() + linalg::chol_log_det(&chol) + quad);

    // K = Σ·Φᵀ·S⁻¹, computed as (S⁻¹·(Φ·Σ))ᵀ via the factorization of S.
    let gain = chol.solve(&(&phi * &prior.cov)).transpose();
    let mean = &prior.mean + &gain * &innovation;
    let i_kphi = DMatrix::identity(n_g, n_g) - &gain * &phi;
    let cov = &i_kphi * &prior.cov * i_kphi.transpose() + &gain * &mode.noise_cov * gain.transpose();

    Ok(TransitionEvidence {
        posterior: GaussianBelief { mean, cov: linalg::symmetrize(&cov) },
        log_likelihood,
    })
}

/// Posterior parameter belief for one mode given an observed transition.
pub fn param_update(
    prior: &GaussianBelief,
    mode: &ModeModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_next: &DVector<f64>,
) -> Result<GaussianBelief> {
    Ok(transition_evidence(prior, mode, x, u, x_next)?.posterior)
}

/// Log of the marginal likelihood of an observed transition under one mode,
/// with the parameter integrated out against its current belief.
pub fn log_marginal_likelihood(
    prior: &GaussianBelief,
    mode: &ModeModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_next: &DVector<f64>,
) -> Result<f64> {
    Ok(transition_evidence(prior, mode, x, u, x_next)?.log_likelihood)
}

/// Marginal likelihood density (may underflow to zero for extreme
/// transitions; mode updates should use the log form).
pub fn marginal_likelihood(
    prior: &GaussianBelief,
    mode: &ModeModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_next: &DVector<f64>,
) -> Result<f64> {
    Ok(log_marginal_likelihood(prior, mode, x, u, x_next)?.exp())
}

/// Bayes update of mode probabilities from per-mode log likelihoods.
///
/// Computed with max-subtraction so likelihood ratios near the extremes of
/// double range neither overflow nor collapse to 0/0.
pub fn mode_update_log(probs: &[f64], log_likelihoods: &[f64]) -> Result<Vec<f64>> {
    if probs.len() != log_likelihoods.len() {
        return Err(Error::Dimension(format!(
            "{} mode probabilities but {} likelihoods",
            probs.len(),
            log_likelihoods.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Config("mode update needs at least one mode".into()));
    }
    if log_likelihoods.iter().any(|l| l.is_nan()) {
        return Err(Error::Numeric("mode update received a NaN log likelihood".into()));
    }
    let weights: Vec<f64> = probs
        .iter()
        .zip(log_likelihoods)
        .map(|(&p, &ll)| if p > 0.0 { p.ln() + ll } else { f64::NEG_INFINITY })
        .collect();
    let max = weights.iter().copied().filter(|w| w.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric(
            "mode update received zero total posterior mass (all weights vanish)".into(),
        ));
    }
    let unnorm: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Numeric(format!("mode update normalization failed (total {total})")));
    }
    Ok(unnorm.iter().map(|u| u / total).collect())
}

/// Bayes update of mode probabilities from linear-domain likelihoods.
pub fn mode_update(probs: &[f64], likelihoods: &[f64]) -> Result<Vec<f64>> {
    for (i, l) in likelihoods.iter().enumerate() {
        if l.is_nan() || *l < 0.0 {
            return Err(Error::Numeric(format!("likelihood[{i}] = {l} is not a nonnegative real")));
        }
    }
    let logs: Vec<f64> = likelihoods.iter().map(|l| l.ln()).collect();
    mode_update_log(probs, &logs)
}

/// Apply probability and variance caps to a belief.
///
/// Mode probabilities below `p_min` are raised to exactly `p_min` and the
/// remaining mass is renormalized over the uncapped modes, iterating when the
/// renormalization pushes another mode under the floor. Posterior parameter
/// variances are raised elementwise to their floors. A belief that already
/// satisfies both caps is returned unchanged, so the operation is idempotent.
pub fn apply_caps(state: &BeliefState, caps: &CapConfig) -> Result<BeliefState> {
    let n = state.n_modes();
    if caps.var_floor.len() != n {
        return Err(Error::Dimension(format!(
            "var_floor has {} entries, belief has {n} modes",
            caps.var_floor.len()
        )));
    }
    if state.params.len() != n {
        return Err(Error::Dimension(format!(
            "belief has {n} mode probabilities but {} parameter beliefs",
            state.params.len()
        )));
    }
    for (i, (belief, floor)) in state.params.iter().zip(&caps.var_floor).enumerate() {
        if belief.n() != floor.len() {
            return Err(Error::Dimension(format!(
                "var_floor[{i}] has {} entries, parameter belief has {}",
                floor.len(),
                belief.n()
            )));
        }
    }
    let sum: f64 = state.mode_probs.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return Err(Error::Numeric(format!("mode probabilities sum to {sum:.4}")));
    }

    let probs_ok = (sum - 1.0).abs() <= CAP_SUM_TOL
        && state.mode_probs.iter().all(|&p| p >= caps.p_min);
    let vars_ok = state
        .params
        .iter()
        .zip(&caps.var_floor)
        .all(|(b, floor)| (0..b.n()).all(|j| b.cov[(j, j)] >= floor[j]));
    if probs_ok && vars_ok {
        return Ok(state.clone());
    }

    let mut probs = state.mode_probs.clone();
    if n == 1 {
        probs[0] = 1.0;
    } else {
        let mut fixed = vec![false; n];
        loop {
            let fixed_count = fixed.iter().filter(|f| **f).count();
            if fixed_count == n {
                return Err(Error::Numeric(
                    "probability capping fixed every mode; p_min too large for this belief".into(),
                ));
            }
            let target = 1.0 - caps.p_min * fixed_count as f64;
            let unfixed_sum: f64 =
                probs.iter().zip(&fixed).filter(|(_, f)| !**f).map(|(p, _)| *p).sum();
            if !(unfixed_sum.is_finite() && unfixed_sum > 0.0) {
                return Err(Error::Numeric(format!(
                    "probability capping has no mass left to renormalize (sum {unfixed_sum:.3e})"
                )));
            }
            let scale = target / unfixed_sum;
            let mut newly_fixed = false;
            for i in 0..n {
                if !fixed[i] {
                    probs[i] *= scale;
                    if probs[i] < caps.p_min {
                        fixed[i] = true;
                        newly_fixed = true;
                    }
                }
            }
            if !newly_fixed {
                break;
            }
        }
        for i in 0..n {
            if fixed[i] {
                probs[i] = caps.p_min;
            }
        }
    }

    let params = state
        .params
        .iter()
        .zip(&caps.var_floor)
        .map(|(belief, floor)| {
            let mut cov = belief.cov.clone();
            for j in 0..belief.n() {
                if cov[(j, j)] < floor[j] {
                    cov[(j, j)] = floor[j];
                }
            }
            GaussianBelief { mean: belief.mean.clone(), cov }
        })
        .collect();

    Ok(BeliefState { mode_probs: probs, params })
}

/// Full joint belief update from one observed transition: per-mode conjugate
/// parameter updates, a log-domain Bayes update of the mode probabilities
/// using each mode's marginal likelihood under its *prior* parameter belief,
/// then the anti-degeneracy caps.
pub fn full_update(
    state: &BeliefState,
    models: &ModelSet,
    caps: &CapConfig,
    x: &DVector<f64>,
    u: &DVector<f64>,
    x_next: &DVector<f64>,
) -> Result<BeliefState> {
    let n_m = models.n_modes();
    if state.n_modes() != n_m || state.params.len() != n_m {
        return Err(Error::Dimension(format!(
            "belief tracks {} modes, model set has {n_m}",
            state.n_modes()
        )));
    }
    let mut log_liks = Vec::with_capacity(n_m);
    let mut params = Vec::with_capacity(n_m);
    for (mode, prior) in models.modes.iter().zip(&state.params) {
        let ev = transition_evidence(prior, mode, x, u, x_next)?;
        log_liks.push(ev.log_likelihood);
        params.push(ev.posterior);
    }
    let mode_probs = mode_update_log(&state.mode_probs, &log_liks)?;
    apply_caps(&BeliefState { mode_probs, params }, caps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Basis, Drift};
    use crate::rng;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn scalar_mode(gain_mean: f64, gain_var: f64, noise_var: f64, prob: f64) -> ModeModel {
        ModeModel {
            name: format!("gain{gain_mean}"),
            drift: Drift::Zero { n_x: 1 },
            basis: Basis::input_gain(DMatrix::from_row_slice(1, 1, &[1.0])),
            noise_cov: DMatrix::from_row_slice(1, 1, &[noise_var]),
            prior_mean: DVector::from_vec(vec![gain_mean]),
            prior_cov: DMatrix::from_row_slice(1, 1, &[gain_var]),
            prior_prob: prob,
        }
    }

    fn scalar_belief(mean: f64, var: f64) -> GaussianBelief {
        GaussianBelief {
            mean: DVector::from_vec(vec![mean]),
            cov: DMatrix::from_row_slice(1, 1, &[var]),
        }
    }

    #[test]
    fn scalar_update_matches_information_form_arithmetic() {
        // Independent route: the additive information-form formulas computed
        // with plain scalar arithmetic.
        let mode = scalar_mode(0.4, 0.01, 0.09, 1.0);
        let prior = scalar_belief(0.4, 0.01);
        let x = DVector::zeros(1);
        let u = DVector::from_vec(vec![0.2]);
        let x_next = DVector::from_vec(vec![0.06]);

        let phi = 0.2;
        let info_post = 1.0 / 0.01 + phi * phi / 0.09;
        let expect_var = 1.0 / info_post;
        let expect_mean = expect_var * (0.4 / 0.01 + phi * 0.06 / 0.09);
        assert_relative_eq!(expect_var, 0.0099558, epsilon = 1e-6);
        assert_relative_eq!(expect_mean, 0.39956, epsilon = 1e-5);

        let post = param_update(&prior, &mode, &x, &u, &x_next).expect("update");
        assert_relative_eq!(post.cov[(0, 0)], expect_var, max_relative = 1e-12);
        assert_relative_eq!(post.mean[0], expect_mean, max_relative = 1e-12);
    }

    #[test]
    fn scalar_marginal_likelihood_matches_density_formula() {
        let mode = scalar_mode(0.4, 0.01, 0.09, 1.0);
        let prior = scalar_belief(0.4, 0.01);
        let x = DVector::zeros(1);
        let u = DVector::from_vec(vec![0.2]);
        let x_next = DVector::from_vec(vec![0.06]);

        // N(0.06; 0.2·0.4, 0.09 + 0.2²·0.01) evaluated by hand.
        let var = 0.09 + 0.04 * 0.01;
        let diff: f64 = 0.06 - 0.08;
        let expect = (-diff * diff / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
        assert_relative_eq!(expect, 1.32395, epsilon = 1e-4);

        let got = marginal_likelihood(&prior, &mode, &x, &u, &x_next).expect("likelihood");
        assert_relative_eq!(got, expect, max_relative = 1e-12);
    }

    #[test]
    fn zero_variance_prior_passes_through_exactly() {
        let mode = scalar_mode(0.4, 0.0, 0.09, 1.0);
        let prior = scalar_belief(0.25, 0.0);
        let x = DVector::from_vec(vec![1.0]);
        let u = DVector::from_vec(vec![0.15]);
        let x_next = DVector::from_vec(vec![0.3]);
        let post = param_update(&prior, &mode, &x, &u, &x_next).expect("update");
        assert_eq!(post.mean[0], 0.25);
        assert_eq!(post.cov[(0, 0)], 0.0);
    }

    #[test]
    fn mode_update_handles_small_likelihoods_in_log_domain() {
        let probs = [0.95, 0.05];
        let liks = [1e-9, 1e-3];
        let post = mode_update(&probs, &liks).expect("update");
        assert_relative_eq!(post[0], 1.9e-5, epsilon = 2e-6);
        assert_relative_eq!(post[1], 0.99998, epsilon = 1e-4);
        assert_relative_eq!(post[0] + post[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn mode_update_survives_extreme_likelihood_ratios() {
        // Ratios around e^±690 ≈ 10^±300: must stay finite and normalized.
        let post = mode_update_log(&[0.5, 0.5], &[-690.0, 690.0]).expect("update");
        assert!(post.iter().all(|p| p.is_finite()));
        assert_relative_eq!(post[1], 1.0, epsilon = 1e-12);
        assert!(post[0] >= 0.0);

        let post = mode_update_log(&[0.5, 0.25, 0.25], &[-1e4, -1e4 + 3.0, -1e4 + 3.0]).expect("update");
        assert_relative_eq!(post.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(post[1] > post[0]);
    }

    #[test]
    fn mode_update_rejects_all_zero_mass() {
        assert!(mode_update(&[0.5, 0.5], &[0.0, 0.0]).is_err());
        assert!(mode_update_log(&[0.0, 0.0], &[-1.0, -1.0]).is_err());
    }

    #[test]
    fn single_mode_probability_stays_one() {
        let post = mode_update(&[1.0], &[1e-200]).expect("update");
        assert_eq!(post, vec![1.0]);
    }

    fn cap_fixture(probs: Vec<f64>, p_min: f64) -> (BeliefState, CapConfig) {
        let n = probs.len();
        let state = BeliefState {
            mode_probs: probs,
            params: (0..n).map(|_| scalar_belief(0.0, 1.0)).collect(),
        };
        let caps = CapConfig { p_min, var_floor: vec![DVector::from_vec(vec![0.0]); n] };
        (state, caps)
    }

    #[test]
    fn caps_raise_low_probability_and_renormalize() {
        let (state, caps) = cap_fixture(vec![0.01, 0.99], 0.05);
        let capped = apply_caps(&state, &caps).expect("caps");
        assert_relative_eq!(capped.mode_probs[0], 0.05, max_relative = 1e-15);
        assert_relative_eq!(capped.mode_probs[1], 0.95, max_relative = 1e-15);
    }

    #[test]
    fn caps_iterate_when_renormalization_cascades() {
        let (state, caps) = cap_fixture(vec![0.01, 0.201, 0.789], 0.2);
        let capped = apply_caps(&state, &caps).expect("caps");
        assert_relative_eq!(capped.mode_probs[0], 0.2, max_relative = 1e-12);
        assert_relative_eq!(capped.mode_probs[1], 0.2, max_relative = 1e-12);
        assert_relative_eq!(capped.mode_probs[2], 0.6, max_relative = 1e-12);
        assert_relative_eq!(capped.mode_probs.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn caps_floor_posterior_variances() {
        let state = BeliefState { mode_probs: vec![1.0], params: vec![scalar_belief(0.3, 1e-8)] };
        let caps = CapConfig { p_min: 0.0, var_floor: vec![DVector::from_vec(vec![1e-4])] };
        let capped = apply_caps(&state, &caps).expect("caps");
        assert_eq!(capped.params[0].cov[(0, 0)], 1e-4);
        assert_eq!(capped.params[0].mean[0], 0.3);
    }

    #[test]
    fn caps_are_idempotent_bitwise() {
        let (state, caps) = cap_fixture(vec![0.01, 0.39, 0.6], 0.05);
        let once = apply_caps(&state, &caps).expect("caps");
        let twice = apply_caps(&once, &caps).expect("caps");
        assert_eq!(once.mode_probs, twice.mode_probs);
        assert_eq!(once.params, twice.params);
    }

    #[test]
    fn repeated_excitation_identifies_the_true_mode() {
        // Two scalar gain hypotheses; data generated by the second mode with
        // a parameter the first (well-identified, near-pinned) mode cannot
        // explain. After a stretch of persistent excitation the posterior
        // must favor the truth for every noise realization.
        let models = ModelSet::new(
            vec![scalar_mode(0.95, 1e-6, 0.09, 0.95), scalar_mode(0.4, 0.01, 0.09, 0.05)],
            1,
            1,
            DVector::from_vec(vec![-3.0]),
            DVector::from_vec(vec![3.0]),
        )
        .expect("models");
        let caps = CapConfig {
            p_min: 0.05,
            var_floor: vec![DVector::from_vec(vec![1e-4]), DVector::from_vec(vec![1e-4])],
        };
        let true_gamma = 0.25;
        for seed in 0..100u64 {
            let mut rng = rng::chacha(rng::mix_seed(&[seed, 0xEEC]));
            let mut belief = BeliefState::from_priors(&models);
            let mut x = DVector::zeros(1);
            for k in 0..20 {
                let u = DVector::from_vec(vec![if k % 2 == 0 { 3.0 } else { -3.0 }]);
                let w = rng::standard_normal_vector(&mut rng, 1) * 0.3;
                let x_next = DVector::from_vec(vec![true_gamma * u[0] + x[0] * 0.0 + w[0]]);
                belief = full_update(&belief, &models, &caps, &x, &u, &x_next).expect("update");
                x = x_next;
            }
            assert!(
                belief.mode_probs[1] > 0.5,
                "seed {seed}: fault mode at {} after excitation",
                belief.mode_probs[1]
            );
            assert!(
                (belief.params[1].mean[0] - true_gamma).abs() < 0.1,
                "seed {seed}: fault gain estimate {} far from {true_gamma}",
                belief.params[1].mean[0]
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn mode_update_outputs_a_distribution(
            raw in proptest::collection::vec(1e-3..1.0f64, 2..5),
            logs in proptest::collection::vec(-50.0..50.0f64, 5),
        ) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
            let post = mode_update_log(&probs, &logs[..probs.len()]).unwrap();
            prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(post.iter().all(|p| (0.0..=1.0).contains(p)));
        }

        #[test]
        fn mode_update_is_scale_invariant(
            raw in proptest::collection::vec(1e-3..1.0f64, 3),
            logs in proptest::collection::vec(-20.0..20.0f64, 3),
            shift in -100.0..100.0f64,
        ) {
            let total: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
            let a = mode_update_log(&probs, &logs).unwrap();
            let shifted: Vec<f64> = logs.iter().map(|l| l + shift).collect();
            let b = mode_update_log(&probs, &shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn capped_probabilities_stay_in_their_box(
            raw in proptest::collection::vec(1e-6..1.0f64, 2..6),
            p_min in 1e-3..0.15f64,
        ) {
            let total: f64 = raw.iter().sum();
            let n = raw.len();
            let (state, caps) = cap_fixture(raw.iter().map(|p| p / total).collect(), p_min);
            let capped = apply_caps(&state, &caps).unwrap();
            let hi = 1.0 - (n as f64 - 1.0) * p_min;
            prop_assert!((capped.mode_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for p in &capped.mode_probs {
                prop_assert!(*p >= p_min - 1e-15 && *p <= hi + 1e-12);
            }
        }

        #[test]
        fn parameter_update_never_loses_information(
            prior_var in 0.01..2.0f64,
            prior_mean in -2.0..2.0f64,
            phi in -3.0..3.0f64,
            noise_var in 0.01..1.0f64,
            obs in -3.0..3.0f64,
        ) {
            // Information (inverse variance) must not decrease before floors.
            let mode = scalar_mode(prior_mean, prior_var, noise_var, 1.0);
            let prior = scalar_belief(prior_mean, prior_var);
            let x = DVector::zeros(1);
            let u = DVector::from_vec(vec![phi]);
            let x_next = DVector::from_vec(vec![obs]);
            let post = param_update(&prior, &mode, &x, &u, &x_next).unwrap();
            prop_assert!(post.cov[(0, 0)] > 0.0);
            prop_assert!(1.0 / post.cov[(0, 0)] >= 1.0 / prior_var - 1e-9);
        }
    }
}
