//! Dense linear-algebra helpers: symmetry checks, robust PSD square roots,
//! positive-definite factorizations, and the matrix exponential used for
//! zero-order-hold discretization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Jitter magnitudes (relative to the diagonal scale) tried in order before
/// [`psd_sqrt`] falls back to an eigenvalue clamp.
const JITTER_LEVELS: [f64; 3] = [1e-12, 1e-10, 1e-8];

/// Maximum Taylor terms summed by [`expm`] after scaling; the series at
/// one-norm <= 0.5 converges in far fewer.
const EXPM_MAX_TERMS: usize = 64;

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Largest absolute asymmetry `max_ij |m_ij - m_ji|`.
pub fn symmetry_error(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Error unless `m` is square and symmetric within `tol`; `what` names the
/// matrix in the message.
pub fn check_symmetric(m: &DMatrix<f64>, tol: f64, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let err = symmetry_error(m);
    if err > tol {
        return Err(Error::Numeric(format!(
            "{what} not symmetric (asymmetry {err:.3e} exceeds {tol:.1e})"
        )));
    }
    Ok(())
}

/// Error if any entry of `m` is NaN or infinite.
pub fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what} contains a non-finite entry")));
    }
    Ok(())
}

/// Cholesky factorization of a strictly positive-definite matrix.
///
/// The input is symmetrized first; failure to factor maps to a numeric error
/// reading "`what` not positive definite".
pub fn chol_pd(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    check_finite(m, what)?;
    Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::Numeric(format!("{what} not positive definite")))
}

/// `log det` of the matrix underlying a Cholesky factor.
pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// A factor `S` with `S·Sᵀ = m` for symmetric positive-semidefinite `m`.
///
/// The exact zero matrix returns an exact zero factor (so degenerate
/// zero-covariance sampling reproduces the mean bit-for-bit). Otherwise a
/// Cholesky factorization is attempted as-is, then with escalating diagonal
/// jitter, and finally the symmetric square root from an eigendecomposition
/// with negative eigenvalues clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    check_finite(m, "psd matrix")?;
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    check_symmetric(m, 1e-8 * scale.max(1.0), "psd matrix")?;
    if m.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(n, n));
    }
    let sym = symmetrize(m);
    if let Some(chol) = Cholesky::new(sym.clone()) {
        return Ok(chol.unpack());
    }
    let diag_scale = sym.diagonal().amax().max(1.0);
    for level in JITTER_LEVELS {
        let jittered = &sym + DMatrix::identity(n, n) * (level * diag_scale);
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(chol.unpack());
        }
    }
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "psd square root failed: eigendecomposition produced non-finite values".into(),
        ));
    }
    let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose())
}

/// Matrix one-norm (maximum absolute column sum).
fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by scaling-and-squaring with a Taylor series summed to
/// machine precision.
pub fn expm(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    check_finite(m, "matrix exponential input")?;
    let n = m.nrows();
    let norm = one_norm(m);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scaled = m / 2f64.powi(squarings as i32);

    let mut acc = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=EXPM_MAX_TERMS {
        term = (&term * &scaled) / k as f64;
        acc += &term;
        if term.amax() <= f64::EPSILON * acc.amax() {
            break;
        }
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    Ok(acc)
}

/// Exact zero-order-hold discretization of `ẋ = A·x + B·u` at sample time
/// `ts`, via the exponential of the augmented matrix `[[A, B], [0, 0]]·ts`.
pub fn zoh_discretize(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ts: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!(
            "continuous state matrix must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != n {
        return Err(Error::Dimension(format!(
            "continuous input matrix has {} rows, state dimension is {n}",
            b.nrows()
        )));
    }
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::Config(format!("sample time must be positive, got {ts}")));
    }
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * ts));
    let e = expm(&aug)?;
    let a_d = e.view((0, 0), (n, n)).into_owned();
    let b_d = e.view((0, n), (n, m)).into_owned();
    Ok((a_d, b_d))
}

/// `xᵀ M x` for square `M`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    // Written as an explicit column sweep so hot loops pay no temporaries.
    let n = x.len();
    let mut total = 0.0;
    for j in 0..n {
        let xj = x[j];
        if xj != 0.0 {
            let mut col = 0.0;
            for i in 0..n {
                col += m[(i, j)] * x[i];
            }
            total += col * xj;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn expm_of_zero_is_identity() {
        let e = expm(&DMatrix::zeros(3, 3)).expect("expm");
        assert_eq!(e, DMatrix::identity(3, 3));
    }

    #[test]
    fn expm_matches_scalar_exponentials_on_diagonals() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.3, 0.4, 2.0]));
        let e = expm(&m).expect("expm");
        for (i, a) in [-1.3f64, 0.4, 2.0].iter().enumerate() {
            assert_relative_eq!(e[(i, i)], a.exp(), max_relative = 1e-14);
        }
        assert!(e[(0, 1)].abs() < 1e-16);
    }

    #[test]
    fn expm_matches_rotation_closed_form() {
        let theta = 0.83f64;
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -theta, theta, 0.0]);
        let e = expm(&m).expect("expm");
        assert_relative_eq!(e[(0, 0)], theta.cos(), max_relative = 1e-13);
        assert_relative_eq!(e[(0, 1)], -theta.sin(), max_relative = 1e-13);
        assert_relative_eq!(e[(1, 0)], theta.sin(), max_relative = 1e-13);
        assert_relative_eq!(e[(1, 1)], theta.cos(), max_relative = 1e-13);
    }

    #[test]
    fn expm_matches_nilpotent_closed_form() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = expm(&m).expect("expm");
        assert_eq!(e, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]));
    }

    #[test]
    fn zoh_matches_scalar_closed_form() {
        // d/dt x = a x + b u with a = -2, b = 3, ts = 0.1:
        // A_d = exp(a ts), B_d = (exp(a ts) - 1) b / a.
        let a = DMatrix::from_row_slice(1, 1, &[-2.0]);
        let b = DMatrix::from_row_slice(1, 1, &[3.0]);
        let (ad, bd) = zoh_discretize(&a, &b, 0.1).expect("zoh");
        let ead = (-0.2f64).exp();
        assert_relative_eq!(ad[(0, 0)], ead, max_relative = 1e-14);
        assert_relative_eq!(bd[(0, 0)], (ead - 1.0) * 3.0 / -2.0, max_relative = 1e-13);
    }

    #[test]
    fn zoh_rejects_bad_sample_time() {
        let a = DMatrix::identity(1, 1);
        let b = DMatrix::identity(1, 1);
        assert!(zoh_discretize(&a, &b, 0.0).is_err());
        assert!(zoh_discretize(&a, &b, f64::NAN).is_err());
    }

    #[test]
    fn psd_sqrt_reconstructs_spd_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.2, 1.2, 2.0]);
        let s = psd_sqrt(&m).expect("sqrt");
        let back = &s * s.transpose();
        assert_relative_eq!(back[(0, 0)], 4.0, max_relative = 1e-12);
        assert_relative_eq!(back[(0, 1)], 1.2, max_relative = 1e-12);
        assert_relative_eq!(back[(1, 1)], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn psd_sqrt_of_zero_is_exactly_zero() {
        let s = psd_sqrt(&DMatrix::zeros(3, 3)).expect("sqrt");
        assert!(s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn psd_sqrt_handles_rank_deficient_matrix() {
        // vvᵀ has rank one; Cholesky fails, the fallback path must not.
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let m = &v * v.transpose();
        let s = psd_sqrt(&m).expect("sqrt");
        let back = &s * s.transpose();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(back[(i, j)], m[(i, j)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn psd_sqrt_rejects_asymmetric_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(psd_sqrt(&m).is_err());
    }

    #[test]
    fn chol_pd_names_the_matrix_in_errors() {
        let m = DMatrix::from_row_slice(1, 1, &[0.0]);
        let err = chol_pd(&m, "noise covariance").unwrap_err();
        assert!(err.to_string().contains("noise covariance not positive definite"));
    }
}
