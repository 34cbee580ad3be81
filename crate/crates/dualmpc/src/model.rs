//! Multi-mode plant models.
//!
//! Each candidate mode evolves as `x_{k+1} = g(x_k,u_k) + Φ(x_k,u_k)·γ + w_k`
//! with known drift `g`, known basis `Φ`, unknown parameter vector `γ`, and
//! Gaussian process noise `w`. A [`ModelSet`] bundles the candidate modes
//! with their prior probabilities and the shared input box; [`CostSpec`]
//! holds the quadratic tracking objective evaluated against a per-step
//! reference trajectory.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance for covariance symmetry checks.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Tolerance on the sum of mode prior probabilities.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Basis feature matrix `Φ(x, u)`: maps state and input to the `n_x × n_γ`
/// matrix multiplying the unknown parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    /// `Φ(x,u) = C0 + Σ_j x_j·Cx[j] + Σ_i u_i·Cu[i]`, every term `n_x × n_γ`.
    ///
    /// Covers the common linear families: a constant regressor (`C0` only),
    /// an unknown input gain (`Cu = [B]`, so `Φ = B·u` for scalar input), and
    /// state-dependent regressors through `Cx`.
    Affine {
        c0: DMatrix<f64>,
        cx: Vec<DMatrix<f64>>,
        cu: Vec<DMatrix<f64>>,
    },
    /// Single-column saturating basis `Φ(x,u) = tanh(W·x)·u_0`.
    ///
    /// Deliberately registers no analytic state Jacobian; consumers fall back
    /// to central finite differences, which keeps that code path honest.
    TanhGain { w: DMatrix<f64> },
}

impl Basis {
    /// Unknown-input-gain basis `Φ(x,u) = (B·u)` as a single column.
    pub fn input_gain(b: DMatrix<f64>) -> Self {
        let n_x = b.nrows();
        let n_u = b.ncols();
        let cu = (0..n_u).map(|i| DMatrix::from_column_slice(n_x, 1, b.column(i).as_slice())).collect();
        Basis::Affine { c0: DMatrix::zeros(n_x, 1), cx: Vec::new(), cu }
    }

    /// All-zero basis with the given shape (no parameter sensitivity).
    pub fn zero(n_x: usize, n_gamma: usize) -> Self {
        Basis::Affine { c0: DMatrix::zeros(n_x, n_gamma), cx: Vec::new(), cu: Vec::new() }
    }

    /// State dimension of the basis output.
    pub fn n_x(&self) -> usize {
        match self {
            Basis::Affine { c0, .. } => c0.nrows(),
            Basis::TanhGain { w } => w.nrows(),
        }
    }

    /// Number of unknown parameters multiplied by the basis.
    pub fn n_gamma(&self) -> usize {
        match self {
            Basis::Affine { c0, .. } => c0.ncols(),
            Basis::TanhGain { .. } => 1,
        }
    }

    /// Evaluate `Φ(x, u)`.
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Basis::Affine { c0, cx, cu } => {
                let mut phi = c0.clone();
                for (j, term) in cx.iter().enumerate() {
                    phi += term * x[j];
                }
                for (i, term) in cu.iter().enumerate() {
                    phi += term * u[i];
                }
                phi
            }
            Basis::TanhGain { w } => {
                let col = (w * x).map(f64::tanh) * u[0];
                DMatrix::from_column_slice(w.nrows(), 1, col.as_slice())
            }
        }
    }

    /// Add `Φ(x, u)·γ` onto `out` without materialising `Φ`.
    ///
    /// Rollouts call this once per predicted step, so it works entirely in
    /// caller-provided storage.
    pub fn accumulate_phi_gamma(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        gamma: &DVector<f64>,
        out: &mut DVector<f64>,
    ) {
        match self {
            Basis::Affine { c0, cx, cu } => {
                out.gemv(1.0, c0, gamma, 1.0);
                for (j, term) in cx.iter().enumerate() {
                    if x[j] != 0.0 {
                        out.gemv(x[j], term, gamma, 1.0);
                    }
                }
                for (i, term) in cu.iter().enumerate() {
                    if u[i] != 0.0 {
                        out.gemv(u[i], term, gamma, 1.0);
                    }
                }
            }
            Basis::TanhGain { w } => {
                let scale = u[0] * gamma[0];
                for i in 0..w.nrows() {
                    let mut s = 0.0;
                    for j in 0..w.ncols() {
                        s += w[(i, j)] * x[j];
                    }
                    out[i] += s.tanh() * scale;
                }
            }
        }
    }

    /// Analytic state Jacobian of `Φ(x,u)·γ`, when the basis registers one.
    ///
    /// `None` means callers must differentiate numerically.
    pub fn jac_x(&self, _x: &DVector<f64>, _u: &DVector<f64>, gamma: &DVector<f64>) -> Option<DMatrix<f64>> {
        match self {
            Basis::Affine { c0, cx, .. } => {
                let n_x = c0.nrows();
                let mut jac = DMatrix::zeros(n_x, n_x);
                for (j, term) in cx.iter().enumerate() {
                    jac.set_column(j, &(term * gamma));
                }
                Some(jac)
            }
            Basis::TanhGain { .. } => None,
        }
    }

    fn validate(&self, n_x: usize, n_u: usize, name: &str) -> Result<()> {
        match self {
            Basis::Affine { c0, cx, cu } => {
                let n_g = c0.ncols();
                if c0.nrows() != n_x {
                    return Err(Error::Dimension(format!(
                        "mode {name}: basis constant term is {}x{}, expected {n_x} rows",
                        c0.nrows(),
                        c0.ncols()
                    )));
                }
                if !cx.is_empty() && cx.len() != n_x {
                    return Err(Error::Dimension(format!(
                        "mode {name}: basis has {} state terms, state dimension is {n_x}",
                        cx.len()
                    )));
                }
                if !cu.is_empty() && cu.len() != n_u {
                    return Err(Error::Dimension(format!(
                        "mode {name}: basis has {} input terms, input dimension is {n_u}",
                        cu.len()
                    )));
                }
                for (what, terms) in [("state", cx), ("input", cu)] {
                    for (i, t) in terms.iter().enumerate() {
                        if t.nrows() != n_x || t.ncols() != n_g {
                            return Err(Error::Dimension(format!(
                                "mode {name}: basis {what} term {i} is {}x{}, expected {n_x}x{n_g}",
                                t.nrows(),
                                t.ncols()
                            )));
                        }
                    }
                }
                Ok(())
            }
            Basis::TanhGain { w } => {
                if w.nrows() != n_x || w.ncols() != n_x {
                    return Err(Error::Dimension(format!(
                        "mode {name}: tanh basis weight is {}x{}, expected {n_x}x{n_x}",
                        w.nrows(),
                        w.ncols()
                    )));
                }
                if n_u == 0 {
                    return Err(Error::Config(format!(
                        "mode {name}: tanh basis needs at least one input"
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Known drift term `g(x, u)` of a mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Drift {
    /// `g ≡ 0`.
    Zero { n_x: usize },
    /// `g(x,u) = A·x`.
    Linear { a: DMatrix<f64> },
}

impl Drift {
    pub fn n_x(&self) -> usize {
        match self {
            Drift::Zero { n_x } => *n_x,
            Drift::Linear { a } => a.nrows(),
        }
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_x());
        self.eval_into(x, u, &mut out);
        out
    }

    /// Evaluate `g(x, u)` into caller-provided storage.
    pub fn eval_into(&self, x: &DVector<f64>, _u: &DVector<f64>, out: &mut DVector<f64>) {
        match self {
            Drift::Zero { .. } => out.fill(0.0),
            Drift::Linear { a } => out.gemv(1.0, a, x, 0.0),
        }
    }

    /// State Jacobian `∇_x g` (always available for the registered drifts).
    pub fn jac_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DMatrix<f64> {
        match self {
            Drift::Zero { n_x } => DMatrix::zeros(*n_x, *n_x),
            Drift::Linear { a } => a.clone(),
        }
    }

    fn validate(&self, n_x: usize, name: &str) -> Result<()> {
        match self {
            Drift::Zero { n_x: n } if *n == n_x => Ok(()),
            Drift::Zero { n_x: n } => Err(Error::Dimension(format!(
                "mode {name}: drift dimension {n} does not match state dimension {n_x}"
            ))),
            Drift::Linear { a } => {
                if a.nrows() != n_x || a.ncols() != n_x {
                    Err(Error::Dimension(format!(
                        "mode {name}: drift matrix is {}x{}, expected {n_x}x{n_x}",
                        a.nrows(),
                        a.ncols()
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// One candidate operating mode with its parameter prior and noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeModel {
    pub name: String,
    pub drift: Drift,
    pub basis: Basis,
    /// Process noise covariance `Σ_w` (symmetric positive definite).
    pub noise_cov: DMatrix<f64>,
    /// Prior mean of the unknown parameter vector `γ`.
    pub prior_mean: DVector<f64>,
    /// Prior covariance of `γ` (symmetric positive semidefinite).
    pub prior_cov: DMatrix<f64>,
    /// Prior probability that this mode is the active one.
    pub prior_prob: f64,
}

impl ModeModel {
    pub fn n_gamma(&self) -> usize {
        self.basis.n_gamma()
    }

    /// Noise-free next-state map `g(x,u) + Φ(x,u)·γ`.
    pub fn predict_mean(&self, x: &DVector<f64>, u: &DVector<f64>, gamma: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.basis.n_x());
        self.predict_mean_into(x, u, gamma, &mut out);
        out
    }

    /// [`Self::predict_mean`] into caller-provided storage; `out` must not
    /// alias `x`.
    pub fn predict_mean_into(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        gamma: &DVector<f64>,
        out: &mut DVector<f64>,
    ) {
        self.drift.eval_into(x, u, out);
        self.basis.accumulate_phi_gamma(x, u, gamma, out);
    }

    /// State Jacobian of the noise-free map at `(x, u, γ)`.
    ///
    /// Uses the registered analytic forms when available and falls back to
    /// central finite differences on `predict_mean` otherwise.
    pub fn jacobian_x(&self, x: &DVector<f64>, u: &DVector<f64>, gamma: &DVector<f64>) -> DMatrix<f64> {
        if let Some(basis_jac) = self.basis.jac_x(x, u, gamma) {
            return self.drift.jac_x(x, u) + basis_jac;
        }
        let n_x = x.len();
        let mut jac = DMatrix::zeros(n_x, n_x);
        for j in 0..n_x {
            let h = 1e-6 * (1.0 + x[j].abs());
            let mut hi = x.clone();
            hi[j] += h;
            let mut lo = x.clone();
            lo[j] -= h;
            let diff = (self.predict_mean(&hi, u, gamma) - self.predict_mean(&lo, u, gamma)) / (2.0 * h);
            jac.set_column(j, &diff);
        }
        jac
    }

    fn validate(&self, n_x: usize, n_u: usize) -> Result<()> {
        let name = &self.name;
        self.drift.validate(n_x, name)?;
        self.basis.validate(n_x, n_u, name)?;
        let n_g = self.basis.n_gamma();
        if self.prior_mean.len() != n_g {
            return Err(Error::Dimension(format!(
                "mode {name}: parameter prior mean has {} entries, basis expects {n_g}",
                self.prior_mean.len()
            )));
        }
        if self.prior_cov.nrows() != n_g || self.prior_cov.ncols() != n_g {
            return Err(Error::Dimension(format!(
                "mode {name}: parameter prior covariance is {}x{}, expected {n_g}x{n_g}",
                self.prior_cov.nrows(),
                self.prior_cov.ncols()
            )));
        }
        linalg::check_symmetric(&self.prior_cov, SYMMETRY_TOL, &format!("mode {name}: parameter prior covariance"))?;
        linalg::check_finite(&self.prior_cov, &format!("mode {name}: parameter prior covariance"))?;
        let min_eig = self.prior_cov.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-10 {
            return Err(Error::Numeric(format!(
                "mode {name}: parameter prior covariance not positive semidefinite (min eigenvalue {min_eig:.3e})"
            )));
        }
        if self.noise_cov.nrows() != n_x || self.noise_cov.ncols() != n_x {
            return Err(Error::Dimension(format!(
                "mode {name}: noise covariance is {}x{}, expected {n_x}x{n_x}",
                self.noise_cov.nrows(),
                self.noise_cov.ncols()
            )));
        }
        linalg::check_symmetric(&self.noise_cov, SYMMETRY_TOL, &format!("mode {name}: noise covariance"))?;
        // Positive definiteness is required by the closed-form belief
        // updates; reject at construction so estimation never divides by a
        // singular innovation.
        linalg::chol_pd(&self.noise_cov, "noise covariance")?;
        if !(self.prior_prob.is_finite() && (0.0..=1.0).contains(&self.prior_prob)) {
            return Err(Error::Config(format!(
                "mode {name}: prior probability {} outside [0, 1]",
                self.prior_prob
            )));
        }
        Ok(())
    }
}

/// The full set of candidate modes plus shared dimensions and input box.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub modes: Vec<ModeModel>,
    pub n_x: usize,
    pub n_u: usize,
    /// Elementwise input bounds: every applied input satisfies
    /// `input_lower ≤ u ≤ input_upper`.
    pub input_lower: DVector<f64>,
    pub input_upper: DVector<f64>,
}

impl ModelSet {
    /// Validate and assemble a model set.
    pub fn new(
        modes: Vec<ModeModel>,
        n_x: usize,
        n_u: usize,
        input_lower: DVector<f64>,
        input_upper: DVector<f64>,
    ) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::Config("model set needs at least one mode".into()));
        }
        for mode in &modes {
            mode.validate(n_x, n_u)?;
        }
        let sum: f64 = modes.iter().map(|m| m.prior_prob).sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::Config(format!("mode probabilities sum to {sum:.4}")));
        }
        if input_lower.len() != n_u || input_upper.len() != n_u {
            return Err(Error::Dimension(format!(
                "input bounds have {} / {} entries, input dimension is {n_u}",
                input_lower.len(),
                input_upper.len()
            )));
        }
        for i in 0..n_u {
            if !(input_lower[i].is_finite() && input_upper[i].is_finite()) {
                return Err(Error::Config(format!("input bounds[{i}] must be finite")));
            }
            if input_lower[i] >= input_upper[i] {
                return Err(Error::Config(format!(
                    "input bounds lower[{i}] = {} is not below upper[{i}] = {}",
                    input_lower[i], input_upper[i]
                )));
            }
        }
        Ok(ModelSet { modes, n_x, n_u, input_lower, input_upper })
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    /// Prior mode probabilities as a vector.
    pub fn prior_probs(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.prior_prob).collect()
    }
}

/// Simulate one true plant transition under a given mode and parameter.
///
/// `x_next = g(x,u) + Φ(x,u)·γ + w`; the caller supplies the realized noise
/// `w`, which keeps the function deterministic and the noise stream shared
/// across compared controllers.
pub fn step_truth(
    models: &ModelSet,
    mode_index: usize,
    gamma: &DVector<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n_m = models.n_modes();
    let mode = models
        .modes
        .get(mode_index)
        .ok_or_else(|| Error::Config(format!("mode index {mode_index} out of range ({n_m} modes)")))?;
    if gamma.len() != mode.n_gamma() {
        return Err(Error::Dimension(format!(
            "true parameter has {} entries, mode {} expects {}",
            gamma.len(),
            mode.name,
            mode.n_gamma()
        )));
    }
    if x.len() != models.n_x || u.len() != models.n_u || w.len() != models.n_x {
        return Err(Error::Dimension(format!(
            "step_truth got x:{} u:{} w:{}, model set has n_x:{} n_u:{}",
            x.len(),
            u.len(),
            w.len(),
            models.n_x,
            models.n_u
        )));
    }
    Ok(mode.predict_mean(x, u, gamma) + w)
}

/// Quadratic tracking cost with a per-step reference trajectory.
///
/// Stage cost `l_k(x,u) = (x - r_k)ᵀQ(x - r_k) + uᵀRu`; terminal cost
/// `(x - r_k)ᵀQ_N(x - r_k)`. References beyond the stored trajectory clamp
/// to the last entry, so predictions may look past the task horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    /// Reference state for each absolute time step `0..=N̄`.
    pub reference: Vec<DVector<f64>>,
}

impl CostSpec {
    pub fn new(
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        q_terminal: DMatrix<f64>,
        reference: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let spec = CostSpec { q, r, q_terminal, reference };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        for (what, m) in [("state weight", &self.q), ("terminal weight", &self.q_terminal), ("input weight", &self.r)] {
            linalg::check_symmetric(m, SYMMETRY_TOL, what)?;
            linalg::check_finite(m, what)?;
            let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
            if min_eig < -1e-10 {
                return Err(Error::Numeric(format!(
                    "{what} not positive semidefinite (min eigenvalue {min_eig:.3e})"
                )));
            }
        }
        if self.reference.is_empty() {
            return Err(Error::Config("reference trajectory is empty".into()));
        }
        let n_x = self.q.nrows();
        for (k, r) in self.reference.iter().enumerate() {
            if r.len() != n_x {
                return Err(Error::Dimension(format!(
                    "reference[{k}] has {} entries, state dimension is {n_x}",
                    r.len()
                )));
            }
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        self.q.nrows()
    }

    /// Reference at absolute step `k`, clamped to the last stored entry.
    pub fn reference_at(&self, k: usize) -> &DVector<f64> {
        &self.reference[k.min(self.reference.len() - 1)]
    }

    /// Stage cost at absolute step `k`.
    pub fn stage_cost(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        error_quad(&self.q, x, self.reference_at(k)) + linalg::quad_form(&self.r, u)
    }

    /// Terminal cost at absolute step `k`.
    pub fn terminal_cost(&self, k: usize, x: &DVector<f64>) -> f64 {
        error_quad(&self.q_terminal, x, self.reference_at(k))
    }

    /// Tracking-error part of the stage cost only (no input penalty).
    pub fn tracking_cost(&self, k: usize, x: &DVector<f64>) -> f64 {
        error_quad(&self.q, x, self.reference_at(k))
    }
}

/// `(x − r)ᵀ M (x − r)` without forming the error vector.
fn error_quad(m: &DMatrix<f64>, x: &DVector<f64>, r: &DVector<f64>) -> f64 {
    let n = x.len();
    let mut total = 0.0;
    for j in 0..n {
        let ej = x[j] - r[j];
        if ej != 0.0 {
            let mut col = 0.0;
            for i in 0..n {
                col += m[(i, j)] * (x[i] - r[i]);
            }
            total += col * ej;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_gain_mode(name: &str, mean: f64, var: f64, prob: f64) -> ModeModel {
        ModeModel {
            name: name.into(),
            drift: Drift::Zero { n_x: 1 },
            basis: Basis::input_gain(DMatrix::from_row_slice(1, 1, &[1.0])),
            noise_cov: DMatrix::from_row_slice(1, 1, &[0.09]),
            prior_mean: DVector::from_vec(vec![mean]),
            prior_cov: DMatrix::from_row_slice(1, 1, &[var]),
            prior_prob: prob,
        }
    }

    fn scalar_set() -> ModelSet {
        ModelSet::new(
            vec![scalar_gain_mode("nominal", 0.95, 0.0009, 0.9), scalar_gain_mode("fault", 0.4, 0.01, 0.1)],
            1,
            1,
            DVector::from_vec(vec![-0.2]),
            DVector::from_vec(vec![0.2]),
        )
        .expect("valid scalar set")
    }

    #[test]
    fn step_truth_is_zero_from_rest() {
        let models = scalar_set();
        let zero = DVector::zeros(1);
        let x_next =
            step_truth(&models, 1, &DVector::from_vec(vec![0.25]), &zero, &zero, &zero).expect("step");
        assert_eq!(x_next, zero);
    }

    #[test]
    fn step_truth_is_affine_in_parameter_and_noise() {
        let models = scalar_set();
        let x = DVector::from_vec(vec![0.3]);
        let u = DVector::from_vec(vec![0.1]);
        let w1 = DVector::from_vec(vec![0.05]);
        let g1 = DVector::from_vec(vec![0.9]);
        let g2 = DVector::from_vec(vec![0.2]);
        let zero = DVector::zeros(1);

        // Additive in w.
        let base = step_truth(&models, 0, &g1, &x, &u, &zero).unwrap();
        let with_w = step_truth(&models, 0, &g1, &x, &u, &w1).unwrap();
        assert_eq!(with_w, &base + &w1);

        // Affine combinations in γ map to affine combinations of outputs.
        let a = 0.3;
        let mix = &g1 * a + &g2 * (1.0 - a);
        let f_mix = step_truth(&models, 0, &mix, &x, &u, &zero).unwrap();
        let f1 = step_truth(&models, 0, &g1, &x, &u, &zero).unwrap();
        let f2 = step_truth(&models, 0, &g2, &x, &u, &zero).unwrap();
        assert_relative_eq!(f_mix[0], a * f1[0] + (1.0 - a) * f2[0], max_relative = 1e-14);
    }

    #[test]
    fn step_truth_rejects_bad_mode_index() {
        let models = scalar_set();
        let zero = DVector::zeros(1);
        let err = step_truth(&models, 2, &zero, &zero, &zero, &zero).unwrap_err();
        assert!(err.to_string().contains("mode index 2 out of range"));
    }

    #[test]
    fn model_set_rejects_probabilities_not_summing_to_one() {
        let err = ModelSet::new(
            vec![scalar_gain_mode("a", 0.9, 0.01, 0.7), scalar_gain_mode("b", 0.4, 0.01, 0.2)],
            1,
            1,
            DVector::from_vec(vec![-1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("mode probabilities sum to 0.9"));
    }

    #[test]
    fn model_set_rejects_singular_noise_covariance() {
        let mut mode = scalar_gain_mode("a", 0.9, 0.01, 1.0);
        mode.noise_cov = DMatrix::from_row_slice(1, 1, &[0.0]);
        let err = ModelSet::new(
            vec![mode],
            1,
            1,
            DVector::from_vec(vec![-1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("noise covariance not positive definite"));
    }

    #[test]
    fn model_set_rejects_crossed_input_bounds() {
        let err = ModelSet::new(
            vec![scalar_gain_mode("a", 0.9, 0.01, 1.0)],
            1,
            1,
            DVector::from_vec(vec![0.5]),
            DVector::from_vec(vec![-0.5]),
        )
        .unwrap_err();
        assert!(err.to_string().contains("lower[0]"));
    }

    #[test]
    fn affine_basis_jacobian_matches_finite_differences() {
        // Φ(x,u) with genuine state dependence: n_x = 2, n_γ = 1.
        let cx = vec![
            DMatrix::from_row_slice(2, 1, &[0.4, -0.3]),
            DMatrix::from_row_slice(2, 1, &[0.1, 0.9]),
        ];
        let basis = Basis::Affine { c0: DMatrix::from_row_slice(2, 1, &[0.2, 0.0]), cx, cu: vec![] };
        let mode = ModeModel {
            name: "affine".into(),
            drift: Drift::Linear { a: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]) },
            basis,
            noise_cov: DMatrix::identity(2, 2),
            prior_mean: DVector::from_vec(vec![0.5]),
            prior_cov: DMatrix::from_row_slice(1, 1, &[0.1]),
            prior_prob: 1.0,
        };
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let u = DVector::zeros(1);
        let gamma = DVector::from_vec(vec![1.3]);
        let analytic = mode.jacobian_x(&x, &u, &gamma);
        for j in 0..2 {
            let h = 1e-6;
            let mut hi = x.clone();
            hi[j] += h;
            let mut lo = x.clone();
            lo[j] -= h;
            let col = (mode.predict_mean(&hi, &u, &gamma) - mode.predict_mean(&lo, &u, &gamma)) / (2.0 * h);
            for i in 0..2 {
                assert_relative_eq!(analytic[(i, j)], col[i], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn tanh_basis_falls_back_to_finite_differences() {
        let w = DMatrix::from_row_slice(2, 2, &[0.5, -0.2, 0.3, 0.8]);
        let mode = ModeModel {
            name: "tanh".into(),
            drift: Drift::Zero { n_x: 2 },
            basis: Basis::TanhGain { w: w.clone() },
            noise_cov: DMatrix::identity(2, 2),
            prior_mean: DVector::from_vec(vec![1.0]),
            prior_cov: DMatrix::from_row_slice(1, 1, &[0.1]),
            prior_prob: 1.0,
        };
        let x = DVector::from_vec(vec![0.4, -0.1]);
        let u = DVector::from_vec(vec![0.7]);
        let gamma = DVector::from_vec(vec![1.2]);
        assert!(mode.basis.jac_x(&x, &u, &gamma).is_none());
        let jac = mode.jacobian_x(&x, &u, &gamma);
        // Hand-derived: d/dx_j [tanh(Wx)_i·u0·γ] = (1 - tanh²((Wx)_i))·W_ij·u0·γ.
        let wx = &w * &x;
        for i in 0..2 {
            let sech2 = 1.0 - wx[i].tanh().powi(2);
            for j in 0..2 {
                let expect = sech2 * w[(i, j)] * u[0] * gamma[0];
                assert_relative_eq!(jac[(i, j)], expect, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn cost_clamps_reference_beyond_trajectory_end() {
        let cost = CostSpec::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![2.0])],
        )
        .expect("cost");
        let x = DVector::from_vec(vec![3.0]);
        let u = DVector::zeros(1);
        assert_relative_eq!(cost.stage_cost(0, &x, &u), 9.0);
        assert_relative_eq!(cost.stage_cost(1, &x, &u), 1.0);
        assert_relative_eq!(cost.stage_cost(50, &x, &u), 1.0);
        assert_relative_eq!(cost.terminal_cost(50, &x), 1.0);
    }

    #[test]
    fn cost_rejects_indefinite_weights() {
        let err = CostSpec::new(
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            vec![DVector::zeros(1)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("not positive semidefinite"));
    }
}
