//! Scalar Gaussian kernel and the Cholesky machinery built on it.
//!
//! The vector field uses the identity-decomposable operator-valued kernel
//! `K(z, z') = k(z, z') I_D`. The `MD x MD` block matrix over a set of
//! inducing points is therefore `k(Z, Z) ⊗ I_D`, and every solve against it
//! reduces to `D` independent solves against the scalar `M x M` matrix. Only
//! the scalar matrix is ever formed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Relative jitter for the first regularized factorization attempt.
pub const JITTER_START: f64 = 1e-10;
/// Number of factorization attempts, the first one without jitter.
pub const JITTER_ATTEMPTS: usize = 6;
/// Pivots below this fraction of the diagonal scale count as a failure.
const PIVOT_FLOOR: f64 = 1e-14;

/// Hyperparameters `θ = (σ_f, ℓ)` of the scalar Gaussian kernel.
///
/// The signal standard deviation is held in log domain because that is the
/// coordinate the optimizer moves in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    log_sigma_f: f64,
    lengthscales: Vec<f64>,
}

impl KernelParams {
    pub fn new(sigma_f: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(sigma_f > 0.0 && sigma_f.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "signal standard deviation must be positive, got {sigma_f}"
            )));
        }
        Self::from_log(sigma_f.ln(), lengthscales)
    }

    pub fn from_log(log_sigma_f: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !log_sigma_f.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "log signal standard deviation must be finite, got {log_sigma_f}"
            )));
        }
        if lengthscales.is_empty() {
            return Err(Error::InvalidArgument("no lengthscales given".into()));
        }
        if let Some(bad) = lengthscales.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "lengthscales must be positive, got {bad}"
            )));
        }
        Ok(Self {
            log_sigma_f,
            lengthscales,
        })
    }

    /// Same lengthscale in every one of `dim` dimensions.
    pub fn isotropic(sigma_f: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        Self::new(sigma_f, vec![lengthscale; dim])
    }

    pub fn sigma_f(&self) -> f64 {
        self.log_sigma_f.exp()
    }

    pub fn log_sigma_f(&self) -> f64 {
        self.log_sigma_f
    }

    /// `σ_f²`, the kernel value at zero distance.
    pub fn variance(&self) -> f64 {
        (2.0 * self.log_sigma_f).exp()
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn with_log_sigma_f(&self, log_sigma_f: f64) -> Result<Self> {
        Self::from_log(log_sigma_f, self.lengthscales.clone())
    }

    /// `1 / ℓ_j²` per dimension.
    pub(crate) fn inv_sq_lengthscales(&self) -> Vec<f64> {
        self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect()
    }
}

/// Kernel value from precomputed inverse squared lengthscales.
#[inline]
pub(crate) fn kernel_unchecked(z: &[f64], zp: &[f64], variance: f64, inv_len2: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for ((a, b), w) in z.iter().zip(zp).zip(inv_len2) {
        let d = a - b;
        r2 += d * d * w;
    }
    variance * (-0.5 * r2).exp()
}

/// `k(z, z') = σ_f² exp(-½ Σ_j (z_j - z'_j)² / ℓ_j²)`.
pub fn eval_kernel(z: &[f64], z_prime: &[f64], params: &KernelParams) -> Result<f64> {
    check_dim(params.dim(), z.len())?;
    check_dim(params.dim(), z_prime.len())?;
    Ok(kernel_unchecked(
        z,
        z_prime,
        params.variance(),
        &params.inv_sq_lengthscales(),
    ))
}

/// Gradient of `k(z, z')` with respect to its first argument.
pub fn eval_kernel_grad(z: &[f64], z_prime: &[f64], params: &KernelParams) -> Result<Vec<f64>> {
    let k = eval_kernel(z, z_prime, params)?;
    Ok(z.iter()
        .zip(z_prime)
        .zip(params.lengthscales())
        .map(|((a, b), l)| -k * (a - b) / (l * l))
        .collect())
}

fn row(points: &DMatrix<f64>, i: usize) -> Vec<f64> {
    points.row(i).iter().copied().collect()
}

/// Scalar kernel matrix between two point sets stored one point per row.
pub fn kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    check_dim(params.dim(), a.ncols())?;
    check_dim(params.dim(), b.ncols())?;
    let variance = params.variance();
    let inv_len2 = params.inv_sq_lengthscales();
    let a_rows: Vec<Vec<f64>> = (0..a.nrows()).map(|i| row(a, i)).collect();
    let b_rows: Vec<Vec<f64>> = (0..b.nrows()).map(|j| row(b, j)).collect();
    Ok(DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        kernel_unchecked(&a_rows[i], &b_rows[j], variance, &inv_len2)
    }))
}

/// Lower Cholesky factor of a scalar kernel matrix plus the diagonal jitter
/// that was needed to obtain it.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelFactor {
    l: DMatrix<f64>,
    jitter: f64,
}

impl KernelFactor {
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn size(&self) -> usize {
        self.l.nrows()
    }

    /// `log |K + jitter I|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `(L Lᵀ) x = b` in place.
    pub fn solve_in_place(&self, b: &mut DVector<f64>) {
        self.l.solve_lower_triangular_unchecked_mut(b);
        self.l.tr_solve_lower_triangular_unchecked_mut(b);
    }

    /// Solves `(L Lᵀ) X = B` column by column.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.l.solve_lower_triangular_unchecked_mut(&mut x);
        self.l.tr_solve_lower_triangular_unchecked_mut(&mut x);
        x
    }

    /// Reassembles `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Cholesky factorization with escalating diagonal jitter.
///
/// Tries the bare matrix first, then adds `1e-10 s`, `1e-9 s`, ... to the
/// diagonal where `s` is the mean diagonal entry (`σ_f²` for kernel
/// matrices), for at most [`JITTER_ATTEMPTS`] attempts in total.
pub fn robust_cholesky(k: &DMatrix<f64>) -> Result<KernelFactor> {
    robust_cholesky_named(k, "kernel matrix")
}

pub(crate) fn robust_cholesky_named(k: &DMatrix<f64>, what: &str) -> Result<KernelFactor> {
    if !k.is_square() {
        return Err(Error::InvalidArgument(format!(
            "{what} is {}x{}, expected square",
            k.nrows(),
            k.ncols()
        )));
    }
    let n = k.nrows();
    let scale = if n == 0 { 1.0 } else { k.trace() / n as f64 };
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::NotPositiveDefinite {
            what: what.to_string(),
            max_jitter: 0.0,
        });
    }
    let mut jitter = 0.0;
    for attempt in 0..JITTER_ATTEMPTS {
        if attempt > 0 {
            jitter = if attempt == 1 {
                JITTER_START * scale
            } else {
                jitter * 10.0
            };
        }
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            let l = chol.unpack();
            let floor = (PIVOT_FLOOR * scale).sqrt();
            if l.diagonal().iter().all(|d| d.is_finite() && *d > floor) {
                return Ok(KernelFactor { l, jitter });
            }
        }
    }
    Err(Error::NotPositiveDefinite {
        what: what.to_string(),
        max_jitter: jitter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(sigma_f: f64, ls: &[f64]) -> KernelParams {
        KernelParams::new(sigma_f, ls.to_vec()).unwrap()
    }

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        let p = params(1.2, &[0.3, 7.0]);
        let v = eval_kernel(&[0.4, -1.0], &[0.4, -1.0], &p).unwrap();
        assert!((v - 1.44).abs() < 1e-15);
    }

    #[test]
    fn kernel_unit_offset() {
        let p = params(1.0, &[1.0, 1.0]);
        let v = eval_kernel(&[1.0, 0.0], &[0.0, 0.0], &p).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        assert!((v - 0.606531).abs() < 1e-6);
        let g = eval_kernel_grad(&[1.0, 0.0], &[0.0, 0.0], &p).unwrap();
        assert!((g[0] + 0.606531).abs() < 1e-6);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn kernel_decays_far_away() {
        let p = params(2.0, &[1.0]);
        assert!(eval_kernel(&[0.0], &[50.0], &p).unwrap() < 1e-300);
    }

    #[test]
    fn gradient_vanishes_at_maximum() {
        let p = params(0.7, &[0.5, 2.0, 1.0]);
        let g = eval_kernel_grad(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &p).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = params(1.0, &[1.0, 1.0]);
        assert!(matches!(
            eval_kernel(&[1.0], &[1.0, 2.0], &p),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        let a = DMatrix::zeros(3, 3);
        assert!(kernel_matrix(&a, &a, &p).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(KernelParams::new(0.0, vec![1.0]).is_err());
        assert!(KernelParams::new(1.0, vec![-1.0]).is_err());
        assert!(KernelParams::new(1.0, vec![]).is_err());
    }

    #[test]
    fn log_round_trip() {
        for s in [1e-3, 0.37, 1.0, 12.5] {
            let p = KernelParams::new(s, vec![1.0]).unwrap();
            let back = KernelParams::new(p.sigma_f(), vec![1.0]).unwrap();
            assert!((back.log_sigma_f() - p.log_sigma_f()).abs() <= 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn single_point_matrix() {
        let p = params(1.5, &[1.0, 1.0]);
        let a = DMatrix::from_row_slice(1, 2, &[0.3, 0.1]);
        let k = kernel_matrix(&a, &a, &p).unwrap();
        assert_eq!(k.shape(), (1, 1));
        assert!((k[(0, 0)] - 2.25).abs() < 1e-15);
    }

    #[test]
    fn collinear_points_match_hand_evaluation() {
        // spacing h = ℓ = 0.5: off-diagonals are σ² e^{-1/2} and σ² e^{-2}
        let p = params(1.3, &[0.5]);
        let a = DMatrix::from_column_slice(3, 1, &[0.0, 0.5, 1.0]);
        let k = kernel_matrix(&a, &a, &p).unwrap();
        let s2 = 1.69;
        let e1 = s2 * (-0.5f64).exp();
        let e2 = s2 * (-2.0f64).exp();
        let expected = DMatrix::from_row_slice(3, 3, &[s2, e1, e2, e1, s2, e1, e2, e1, s2]);
        assert!((k - expected).abs().max() < 1e-14);
    }

    #[test]
    fn distinct_points_give_symmetric_bounded_matrix() {
        let p = params(0.8, &[0.7, 1.1]);
        let a = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.5, -0.3, 2.0, 0.9, -1.2]);
        let k = kernel_matrix(&a, &a, &p).unwrap();
        assert_eq!(k, k.transpose());
        assert!(k.iter().all(|v| *v > 0.0 && *v <= 0.64 + 1e-15));
    }

    #[test]
    fn identity_factors_without_jitter() {
        let f = robust_cholesky(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(f.jitter(), 0.0);
        assert_eq!(f.l(), &DMatrix::identity(4, 4));
    }

    #[test]
    fn separated_grid_reconstructs() {
        let p = params(1.0, &[1.0]);
        let a = DMatrix::from_column_slice(5, 1, &[-4.0, -2.0, 0.0, 2.0, 4.0]);
        let k = kernel_matrix(&a, &a, &p).unwrap();
        let f = robust_cholesky(&k).unwrap();
        assert_eq!(f.jitter(), 0.0);
        let err = (f.reconstruct() - &k).abs().max() / k.abs().max();
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn duplicated_points_need_jitter() {
        let p = params(1.0, &[1.0, 1.0]);
        let a = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let k = kernel_matrix(&a, &a, &p).unwrap();
        match robust_cholesky(&k) {
            Ok(f) => {
                assert!(f.jitter() > 0.0);
                let mut kj = k.clone();
                for i in 0..3 {
                    kj[(i, i)] += f.jitter();
                }
                assert!((f.reconstruct() - kj).abs().max() < 1e-10);
            }
            Err(e) => assert!(matches!(e, Error::NotPositiveDefinite { .. })),
        }
    }

    #[test]
    fn indefinite_matrix_fails_cleanly() {
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = robust_cholesky_named(&k, "test matrix").unwrap_err();
        assert!(err.to_string().contains("test matrix"));
    }

    #[test]
    fn solve_and_log_det() {
        let k = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let f = robust_cholesky(&k).unwrap();
        assert!((f.log_det() - 8f64.ln()).abs() < 1e-14);
        let mut b = DVector::from_vec(vec![1.0, 2.0]);
        f.solve_in_place(&mut b);
        assert!((&k * &b - DVector::from_vec(vec![1.0, 2.0])).norm() < 1e-14);
    }
}
