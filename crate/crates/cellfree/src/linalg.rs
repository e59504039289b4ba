//! Complex linear-algebra helpers shared by the channel, beamforming and
//! rate modules. Everything here operates on dynamically sized
//! `nalgebra` matrices over `Complex64`.

use nalgebra::{DMatrix, Dyn};
use num_complex::Complex64;
use rand::{Rng, RngExt};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;

/// Condition-number threshold above which Gram solves are regularized.
pub const GRAM_COND_LIMIT: f64 = 1e12;

/// Ridge added to ill-conditioned Gram matrices, as a fraction of the mean
/// diagonal entry.
pub const GRAM_RIDGE_SCALE: f64 = 1e-12;

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Draws a rows x cols matrix with i.i.d. circularly symmetric complex
/// Gaussian entries of total variance `var` (real and imaginary parts are
/// each N(0, var/2)). Entries are filled row by row so the consumed RNG
/// stream does not depend on storage order.
pub fn complex_gaussian_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    var: f64,
    rng: &mut R,
) -> CMat {
    let s = (var * 0.5).sqrt();
    let mut m = CMat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            m[(i, j)] = Complex64::new(re * s, im * s);
        }
    }
    m
}

/// Cholesky factorization of a Hermitian positive definite matrix. When the
/// nominal factorization fails, an escalating diagonal jitter (relative to
/// the mean diagonal magnitude) is applied before giving up.
pub fn hpd_cholesky(m: &CMat) -> Result<nalgebra::Cholesky<Complex64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let dim = m.nrows().max(1);
    let base = m
        .diagonal()
        .iter()
        .map(|d| d.re.abs())
        .sum::<f64>()
        .max(f64::MIN_POSITIVE)
        / dim as f64;
    let mut jitter = base * 1e-14;
    for _ in 0..14 {
        let mut j = m.clone();
        for i in 0..m.nrows() {
            j[(i, i)] += Complex64::new(jitter, 0.0);
        }
        if let Some(c) = j.cholesky() {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(
        "matrix is not positive definite within jitter budget".into(),
    ))
}

/// Natural-log determinant of a Hermitian positive definite matrix.
pub fn hpd_logdet(m: &CMat) -> Result<f64> {
    let chol = hpd_cholesky(m)?;
    let l = chol.l();
    Ok(2.0 * (0..m.nrows()).map(|i| l[(i, i)].re.ln()).sum::<f64>())
}

/// Base-2 log determinant of a Hermitian positive definite matrix.
pub fn hpd_logdet2(m: &CMat) -> Result<f64> {
    Ok(hpd_logdet(m)? / std::f64::consts::LN_2)
}

/// Solves gram * X = rhs for Hermitian positive semidefinite `gram`. If the
/// eigenvalue-based condition estimate exceeds [`GRAM_COND_LIMIT`] (or the
/// matrix is outright singular), a ridge of GRAM_RIDGE_SCALE * trace / dim
/// is added first and the returned flag is set.
pub fn gram_solve(gram: &CMat, rhs: &CMat) -> Result<(CMat, bool)> {
    let dim = gram.nrows().max(1);
    let trace: f64 = gram.diagonal().iter().map(|d| d.re).sum();
    let eigs = gram.clone().symmetric_eigen().eigenvalues;
    let lmax = eigs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lmin = eigs.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let ill = !(lmin > 0.0 && lmax.is_finite() && lmax / lmin <= GRAM_COND_LIMIT);
    let solution = if ill {
        let ridge = GRAM_RIDGE_SCALE * trace.max(f64::MIN_POSITIVE) / dim as f64;
        let mut g = gram.clone();
        for i in 0..g.nrows() {
            g[(i, i)] += Complex64::new(ridge, 0.0);
        }
        hpd_cholesky(&g)?.solve(rhs)
    } else {
        hpd_cholesky(gram)?.solve(rhs)
    };
    Ok((solution, ill))
}

/// Hermitian part 0.5 (m + m^H); cheap symmetry repair after accumulating
/// products that are Hermitian in exact arithmetic.
pub fn hermitian_part(m: &CMat) -> CMat {
    (m + m.adjoint()).map(|v| v * 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_hpd(n: usize, seed: u64) -> CMat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = complex_gaussian_matrix(n + 2, n, 1.0, &mut rng);
        a.adjoint() * &a + identity(n).map(|v| v * 0.1)
    }

    #[test]
    fn logdet_matches_identity_scaling() {
        let m = identity(4).map(|v| v * 3.0);
        let ld = hpd_logdet(&m).unwrap();
        assert!((ld - 4.0 * 3.0f64.ln()).abs() < 1e-12, "logdet = {ld}");
    }

    #[test]
    fn logdet_matches_lu_determinant() {
        for seed in 0..20 {
            let m = random_hpd(3, seed);
            let ld = hpd_logdet(&m).unwrap();
            let det = m.determinant();
            assert!(
                (ld - det.re.ln()).abs() < 1e-9 * (1.0 + ld.abs()),
                "seed {seed}: {ld} vs {}",
                det.re.ln()
            );
        }
    }

    #[test]
    fn gram_solve_recovers_known_solution() {
        let gram = random_hpd(4, 7);
        let x = {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            complex_gaussian_matrix(4, 2, 1.0, &mut rng)
        };
        let rhs = &gram * &x;
        let (got, regularized) = gram_solve(&gram, &rhs).unwrap();
        assert!(!regularized);
        assert!((got - x).norm() < 1e-9);
    }

    #[test]
    fn gram_solve_flags_singular_input() {
        let mut gram = random_hpd(3, 9);
        // Rank-deficient: last row/column zeroed out.
        for i in 0..3 {
            gram[(2, i)] = Complex64::new(0.0, 0.0);
            gram[(i, 2)] = Complex64::new(0.0, 0.0);
        }
        let rhs = identity(3);
        let (sol, regularized) = gram_solve(&gram, &rhs).unwrap();
        assert!(regularized);
        assert!(sol.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
    }

    #[test]
    fn gaussian_matrix_second_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let m = complex_gaussian_matrix(2, 2, 4.0, &mut rng);
            acc += m.norm_squared();
        }
        let mean = acc / n as f64;
        // E||M||_F^2 = 4 entries * variance 4 = 16.
        assert!((mean - 16.0).abs() < 0.3, "mean = {mean}");
    }

    #[test]
    fn hermitian_part_is_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = complex_gaussian_matrix(3, 3, 1.0, &mut rng);
        let h = hermitian_part(&m);
        assert!((h.clone() - h.adjoint()).norm() < 1e-15);
    }
}
