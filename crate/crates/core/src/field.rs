//! Gaussian-process vector field supported on a fixed grid of inducing points.
//!
//! The field is the kernel interpolant
//! `f(x) = K(x, Z) K(Z, Z)^{-1} vec(U)`, which under the decomposable kernel
//! is `f_d(x) = k(x, Z) α[:, d]` with `α = k(Z, Z)^{-1} U`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{kernel_matrix, kernel_unchecked, robust_cholesky_named, KernelFactor, KernelParams};
use crate::odeint::VectorField;

/// Axis-aligned equidistant grid of inducing locations.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    counts: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() || lower.len() != counts.len() {
            return Err(Error::InvalidArgument(
                "grid bounds and counts must be non-empty and of equal length".into(),
            ));
        }
        for j in 0..lower.len() {
            if !(lower[j].is_finite() && upper[j].is_finite() && lower[j] < upper[j]) {
                return Err(Error::InvalidArgument(format!(
                    "grid bounds in dimension {j} must be finite with lower < upper"
                )));
            }
            if counts[j] < 2 {
                return Err(Error::InvalidArgument(format!(
                    "grid needs at least 2 points per dimension, dimension {j} has {}",
                    counts[j]
                )));
            }
        }
        Ok(Self { lower, upper, counts })
    }

    /// Bounding box of `points` (one per row) widened by `margin` of its width
    /// on each side, with `count` points per dimension.
    pub fn covering(points: &DMatrix<f64>, count: usize, margin: f64) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::InvalidArgument("cannot cover an empty point set".into()));
        }
        let mut lower = Vec::with_capacity(points.ncols());
        let mut upper = Vec::with_capacity(points.ncols());
        for col in points.column_iter() {
            let lo = col.min();
            let hi = col.max();
            let mut width = hi - lo;
            if width <= 0.0 {
                // flat dimension: give it unit width around the value
                width = 1.0;
            }
            let pad = if hi > lo { margin * width } else { 0.5 };
            lower.push(lo - pad);
            upper.push(hi + pad);
        }
        Self::new(lower, upper, vec![count; points.ncols()])
    }

    pub fn dim(&self) -> usize {
        self.counts.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Total number of grid points `M`.
    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cartesian product grid, one point per row, last dimension varying fastest.
pub fn make_grid(layout: &GridSpec) -> DMatrix<f64> {
    let d = layout.dim();
    let m = layout.len();
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let n = layout.counts[j];
            let step = (layout.upper[j] - layout.lower[j]) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { layout.upper[j] } else { layout.lower[j] + step * i as f64 })
                .collect()
        })
        .collect();
    let mut grid = DMatrix::zeros(m, d);
    for row in 0..m {
        let mut rest = row;
        for j in (0..d).rev() {
            let n = layout.counts[j];
            grid[(row, j)] = axes[j][rest % n];
            rest /= n;
        }
    }
    grid
}

/// `Ũ = L^{-1} U`, column by column.
pub fn whiten(vectors: &DMatrix<f64>, factor: &KernelFactor) -> Result<DMatrix<f64>> {
    check_dim(factor.size(), vectors.nrows())?;
    let mut w = vectors.clone();
    factor.l().solve_lower_triangular_unchecked_mut(&mut w);
    Ok(w)
}

/// `U = L Ũ`, column by column.
pub fn unwhiten(whitened: &DMatrix<f64>, factor: &KernelFactor) -> Result<DMatrix<f64>> {
    check_dim(factor.size(), whitened.nrows())?;
    Ok(factor.l() * whitened)
}

/// Inducing locations `Z`, inducing vectors `U` and everything derived from
/// them that field evaluation needs.
///
/// Immutable once built; a parameter change means building a new set.
#[derive(Debug, Clone)]
pub struct InducingSet {
    locations: DMatrix<f64>,
    vectors: DMatrix<f64>,
    whitened: DMatrix<f64>,
    kernel: KernelParams,
    factor: KernelFactor,
    // row-major M x D copies for the evaluation loops
    z_rows: Vec<f64>,
    alpha_rows: Vec<f64>,
    variance: f64,
    inv_len2: Vec<f64>,
}

impl InducingSet {
    /// Builds the field from whitened inducing vectors, `U = L Ũ`.
    pub fn from_whitened(locations: DMatrix<f64>, whitened: DMatrix<f64>, kernel: KernelParams) -> Result<Self> {
        let factor = Self::factorize(&locations, &kernel)?;
        check_dim(locations.nrows(), whitened.nrows())?;
        check_dim(locations.ncols(), whitened.ncols())?;
        let vectors = unwhiten(&whitened, &factor)?;
        Ok(Self::assemble(locations, vectors, whitened, kernel, factor))
    }

    /// Builds the field from inducing vectors `U` directly.
    pub fn from_vectors(locations: DMatrix<f64>, vectors: DMatrix<f64>, kernel: KernelParams) -> Result<Self> {
        let factor = Self::factorize(&locations, &kernel)?;
        check_dim(locations.nrows(), vectors.nrows())?;
        check_dim(locations.ncols(), vectors.ncols())?;
        let whitened = whiten(&vectors, &factor)?;
        Ok(Self::assemble(locations, vectors, whitened, kernel, factor))
    }

    fn factorize(locations: &DMatrix<f64>, kernel: &KernelParams) -> Result<KernelFactor> {
        check_dim(kernel.dim(), locations.ncols())?;
        if locations.nrows() == 0 {
            return Err(Error::InvalidArgument("no inducing locations".into()));
        }
        let k = kernel_matrix(locations, locations, kernel)?;
        robust_cholesky_named(&k, "inducing kernel matrix k(Z,Z)")
    }

    fn assemble(
        locations: DMatrix<f64>,
        vectors: DMatrix<f64>,
        whitened: DMatrix<f64>,
        kernel: KernelParams,
        factor: KernelFactor,
    ) -> Self {
        let alpha = factor.solve(&vectors);
        let z_rows = locations.transpose().as_slice().to_vec();
        let alpha_rows = alpha.transpose().as_slice().to_vec();
        let variance = kernel.variance();
        let inv_len2 = kernel.inv_sq_lengthscales();
        Self {
            locations,
            vectors,
            whitened,
            kernel,
            factor,
            z_rows,
            alpha_rows,
            variance,
            inv_len2,
        }
    }

    /// State dimension `D`.
    pub fn dim(&self) -> usize {
        self.locations.ncols()
    }

    /// Number of inducing points `M`.
    pub fn len(&self) -> usize {
        self.locations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn locations(&self) -> &DMatrix<f64> {
        &self.locations
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn whitened(&self) -> &DMatrix<f64> {
        &self.whitened
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn factor(&self) -> &KernelFactor {
        &self.factor
    }

    /// `α = k(Z,Z)^{-1} U`.
    pub fn alpha(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim(), &self.alpha_rows)
    }

    fn location(&self, m: usize) -> &[f64] {
        let d = self.dim();
        &self.z_rows[m * d..(m + 1) * d]
    }

    pub fn eval_field(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut out = vec![0.0; self.dim()];
        self.eval_unchecked(x, &mut out);
        Ok(out)
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..self.len() {
            let k = kernel_unchecked(x, self.location(m), self.variance, &self.inv_len2);
            let a = &self.alpha_rows[m * d..(m + 1) * d];
            for (o, ad) in out.iter_mut().zip(a) {
                *o += k * ad;
            }
        }
    }

    /// `∂f/∂x` as a `D x D` matrix.
    pub fn field_state_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), x.len())?;
        let d = self.dim();
        let mut f = vec![0.0; d];
        let mut jac = vec![0.0; d * d];
        self.eval_with_jacobian(x, &mut f, &mut jac, None);
        Ok(DMatrix::from_row_slice(d, d, &jac))
    }

    /// Interpolation weights `w(x) = k(Z,Z)^{-1} k(Z, x)`.
    ///
    /// These are the only nonzero entries of `∂f/∂u`: under the decomposable
    /// kernel `∂f_d / ∂u_{m,d'} = δ_{dd'} w_m(x)`.
    pub fn field_param_jacobian(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        let mut w = DVector::zeros(self.len());
        self.weights_into(x, &mut w);
        Ok(w)
    }

    pub(crate) fn weights_into(&self, x: &[f64], w: &mut DVector<f64>) {
        for m in 0..self.len() {
            w[m] = kernel_unchecked(x, self.location(m), self.variance, &self.inv_len2);
        }
        self.factor.solve_in_place(w);
    }

    /// Field value, row-major state Jacobian and, when `kvec` is given, the
    /// raw kernel vector `k(Z, x)` in one pass over the inducing points.
    pub(crate) fn eval_with_jacobian(
        &self,
        x: &[f64],
        f: &mut [f64],
        jac: &mut [f64],
        mut kvec: Option<&mut DVector<f64>>,
    ) {
        let d = self.dim();
        f.iter_mut().for_each(|v| *v = 0.0);
        jac.iter_mut().for_each(|v| *v = 0.0);
        let mut scaled_diff = [0.0f64; 16];
        let mut scaled_heap;
        let sd: &mut [f64] = if d <= 16 {
            &mut scaled_diff[..d]
        } else {
            scaled_heap = vec![0.0; d];
            &mut scaled_heap
        };
        for m in 0..self.len() {
            let z = self.location(m);
            let mut r2 = 0.0;
            for j in 0..d {
                let diff = x[j] - z[j];
                r2 += diff * diff * self.inv_len2[j];
                sd[j] = -diff * self.inv_len2[j];
            }
            let k = self.variance * (-0.5 * r2).exp();
            if let Some(kv) = kvec.as_deref_mut() {
                kv[m] = k;
            }
            let a = &self.alpha_rows[m * d..(m + 1) * d];
            for i in 0..d {
                let ka = k * a[i];
                f[i] += ka;
                let row = &mut jac[i * d..(i + 1) * d];
                for j in 0..d {
                    row[j] += ka * sd[j];
                }
            }
        }
    }
}

impl VectorField for InducingSet {
    fn dim(&self) -> usize {
        InducingSet::dim(self)
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        self.eval_unchecked(x, out);
    }
}
