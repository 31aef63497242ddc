//! Single-layer closed-form solvers: hard-threshold sparse coding, the
//! orthogonal Procrustes transform update, the layer objective and the
//! DCT / identity initializers.

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{invalid, Result};
use crate::scalar::Real;
use crate::svd::jacobi_svd;

/// Coefficient maps `Z`: one row per filter, one column per patch position.
pub type CoefficientMaps<F> = Array2<F>;

/// Largest `||Q^T Q - I||_F` accepted for a transform in `f64`.
pub const UNITARY_TOLERANCE: f64 = 1e-10;

/// Square matrix with orthonormal rows and columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Unitary<F> {
    matrix: Array2<F>,
}

impl<F: Real> Unitary<F> {
    /// Wraps `matrix` after checking it is square and unitary to working precision.
    pub fn new(matrix: Array2<F>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return invalid(format!(
                "transform must be square and non-empty, got {:?}",
                matrix.dim()
            ));
        }
        let q = Self { matrix };
        let dev = q.unitarity_error();
        let tol = UNITARY_TOLERANCE.max(100.0 * q.side() as f64 * F::epsilon().as_f64());
        if !(dev <= tol) {
            return invalid(format!("matrix is not unitary: ||Q^T Q - I||_F = {dev:e}"));
        }
        Ok(q)
    }

    /// Wraps `matrix` without the unitarity check. Only the shape is validated.
    pub fn from_matrix_unchecked(matrix: Array2<F>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() || matrix.nrows() == 0 {
            return invalid(format!(
                "transform must be square and non-empty, got {:?}",
                matrix.dim()
            ));
        }
        Ok(Self { matrix })
    }

    pub fn identity(side: usize) -> Result<Self> {
        if side == 0 {
            return invalid("identity transform needs a positive side");
        }
        Ok(Self {
            matrix: Array2::eye(side),
        })
    }

    /// Orthonormal 2D DCT-II acting on row-major vectorized `rows x cols` patches.
    pub fn dct2(rows: usize, cols: usize) -> Result<Self> {
        dct2_init(rows, cols)
    }

    pub fn side(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> ArrayView2<'_, F> {
        self.matrix.view()
    }

    pub fn into_inner(self) -> Array2<F> {
        self.matrix
    }

    /// `||Q^T Q - I||_F`, accumulated in `f64`.
    pub fn unitarity_error(&self) -> f64 {
        let g = self.matrix.t().dot(&self.matrix);
        g.indexed_iter()
            .map(|((i, j), &v)| {
                let d = v.as_f64() - if i == j { 1.0 } else { 0.0 };
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `Q * P`.
    pub fn apply(&self, p: &ArrayView2<'_, F>) -> Result<Array2<F>> {
        if p.nrows() != self.side() {
            return invalid(format!(
                "transform side {} does not match {} patch rows",
                self.side(),
                p.nrows()
            ));
        }
        Ok(self.matrix.dot(p))
    }

    /// `Q^T * Z`.
    pub fn apply_transpose(&self, z: &ArrayView2<'_, F>) -> Result<Array2<F>> {
        if z.nrows() != self.side() {
            return invalid(format!(
                "transform side {} does not match {} coefficient rows",
                self.side(),
                z.nrows()
            ));
        }
        Ok(self.matrix.t().dot(z))
    }
}

fn check_eta<F: Real>(eta: F) -> Result<()> {
    if !(eta >= F::zero()) || !eta.is_finite() {
        return invalid(format!("threshold must be finite and non-negative, got {eta}"));
    }
    Ok(())
}

#[inline]
pub(crate) fn keep<F: Real>(x: F, eta: F) -> bool {
    x.abs() >= eta
}

/// Zeros every entry with magnitude strictly below `eta`.
pub fn hard_threshold<F: Real>(m: &ArrayView2<'_, F>, eta: F) -> Result<Array2<F>> {
    check_eta(eta)?;
    Ok(m.mapv(|x| if keep(x, eta) { x } else { F::zero() }))
}

pub(crate) fn hard_threshold_inplace<F: Real>(m: &mut Array2<F>, eta: F) {
    m.mapv_inplace(|x| if keep(x, eta) { x } else { F::zero() });
}

/// Optimal codes for a fixed transform: `H_eta(Q * P)`.
pub fn sparse_code_layer<F: Real>(
    omega: &Unitary<F>,
    patches: &ArrayView2<'_, F>,
    eta: F,
) -> Result<CoefficientMaps<F>> {
    check_eta(eta)?;
    let mut z = omega.apply(patches)?;
    hard_threshold_inplace(&mut z, eta);
    Ok(z)
}

/// Closest unitary matrix in the Procrustes sense to the cross product
/// `A = P Z^T`: returns `V U^T` for `A = U S V^T`.
pub fn procrustes_from_cross<F: Real>(cross: &Array2<F>) -> Result<Unitary<F>> {
    if cross.nrows() != cross.ncols() || cross.nrows() == 0 {
        return invalid(format!("cross product must be square, got {:?}", cross.dim()));
    }
    if cross.iter().any(|x| !x.is_finite()) {
        return invalid("cross product contains non-finite entries");
    }
    let svd = jacobi_svd(cross);
    Unitary::from_matrix_unchecked(svd.v.dot(&svd.u.t()))
}

/// Unitary minimizer of `||Q P - Z||_F`.
pub fn procrustes_update<F: Real>(patches: &ArrayView2<'_, F>, codes: &ArrayView2<'_, F>) -> Result<Unitary<F>> {
    if patches.nrows() != codes.nrows() || patches.ncols() != codes.ncols() {
        return invalid(format!(
            "patch matrix {:?} and codes {:?} differ in shape",
            patches.dim(),
            codes.dim()
        ));
    }
    procrustes_from_cross(&patches.dot(&codes.t()))
}

/// `||Q P - Z||_F^2 + eta^2 * nnz(Z)`, computed directly.
pub fn layer_cost<F: Real>(
    omega: &Unitary<F>,
    patches: &ArrayView2<'_, F>,
    codes: &ArrayView2<'_, F>,
    eta: F,
) -> Result<F> {
    let qp = omega.apply(patches)?;
    if qp.dim() != codes.dim() {
        return invalid(format!("codes {:?} do not match Q P {:?}", codes.dim(), qp.dim()));
    }
    let mut fit = F::zero();
    let mut nnz = 0usize;
    Zip::from(&qp).and(codes).for_each(|&a, &z| {
        let d = a - z;
        fit = fit + d * d;
        if z != F::zero() {
            nnz += 1;
        }
    });
    Ok(fit + eta * eta * F::of_usize(nnz))
}

/// Orthonormal 1D DCT-II matrix of size `n`.
pub fn dct1_matrix<F: Real>(n: usize) -> Array2<F> {
    let nf = n as f64;
    Array2::from_shape_fn((n, n), |(k, i)| {
        let scale = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        let angle = std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * nf);
        F::lit(scale * angle.cos())
    })
}

/// Separable 2D DCT-II, `C_rows (x) C_cols`, matching the row-major patch
/// vectorization of [`crate::patch`].
pub fn dct2_init<F: Real>(rows: usize, cols: usize) -> Result<Unitary<F>> {
    if rows == 0 || cols == 0 {
        return invalid(format!("DCT size must be positive, got {rows}x{cols}"));
    }
    let cr = dct1_matrix::<F>(rows);
    let cc = dct1_matrix::<F>(cols);
    let n = rows * cols;
    let m = Array2::from_shape_fn((n, n), |(out, inp)| {
        let (k1, k2) = (out / cols, out % cols);
        let (i, j) = (inp / cols, inp % cols);
        cr[[k1, i]] * cc[[k2, j]]
    });
    Unitary::from_matrix_unchecked(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn threshold_keeps_boundary() {
        let m = array![[1.5, -3.0], [2.0, 0.0]];
        let out = hard_threshold(&m.view(), 2.0).unwrap();
        assert_eq!(out, array![[0.0, -3.0], [2.0, 0.0]]);
    }

    #[test]
    fn threshold_zero_is_identity_and_large_zeroes_all() {
        let m = array![[1.5, -3.0, 1e-300], [2.0, 0.0, -7.0]];
        assert_eq!(hard_threshold(&m.view(), 0.0).unwrap(), m);
        assert!(hard_threshold(&m.view(), 7.5).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn threshold_rejects_negative() {
        let m = array![[1.0]];
        assert!(hard_threshold(&m.view(), -0.1).is_err());
        assert!(hard_threshold(&m.view(), f64::NAN).is_err());
    }

    #[test]
    fn sparse_code_identity() {
        let q = Unitary::<f64>::identity(2).unwrap();
        let p = array![[1.0], [-0.5]];
        let z = sparse_code_layer(&q, &p.view(), 0.9).unwrap();
        assert_eq!(z, array![[1.0], [0.0]]);
        let z0 = sparse_code_layer(&q, &p.view(), 0.0).unwrap();
        assert_eq!(layer_cost(&q, &p.view(), &z0.view(), 0.0).unwrap(), 0.0);
        let wrong = array![[1.0], [2.0], [3.0]];
        assert!(sparse_code_layer(&q, &wrong.view(), 0.1).is_err());
    }

    #[test]
    fn procrustes_simple_cases() {
        let i2 = Array2::<f64>::eye(2);
        assert!((procrustes_from_cross(&i2).unwrap().into_inner() - &i2)
            .iter()
            .all(|x| x.abs() < 1e-14));
        let d = array![[2.0, 0.0], [0.0, 3.0]];
        assert!((procrustes_from_cross(&d).unwrap().into_inner() - &i2)
            .iter()
            .all(|x| x.abs() < 1e-14));
        let swap: Array2<f64> = array![[0.0, 1.0], [1.0, 0.0]];
        let q = procrustes_from_cross(&swap).unwrap().into_inner();
        assert!((q - &swap).iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn procrustes_swap_beats_angle_grid() {
        // P = I and Z = swap give A = P Z^T = swap.
        let p = Array2::<f64>::eye(2);
        let z = array![[0.0, 1.0], [1.0, 0.0]];
        let q = procrustes_update(&p.view(), &z.view()).unwrap();
        let best = layer_cost(&q, &p.view(), &z.view(), 0.0).unwrap();
        for step in 0..3600 {
            let t = step as f64 * std::f64::consts::TAU / 3600.0;
            let (c, s) = (t.cos(), t.sin());
            for cand in [array![[c, -s], [s, c]], array![[c, s], [s, -c]]] {
                let u = Unitary::from_matrix_unchecked(cand).unwrap();
                let cost = layer_cost(&u, &p.view(), &z.view(), 0.0).unwrap();
                assert!(best <= cost + 1e-12);
            }
        }
        assert!(best < 1e-24);
    }

    #[test]
    fn layer_cost_identities() {
        let q = dct2_init::<f64>(2, 2).unwrap();
        let p = array![[1.0, 2.0], [-3.0, 0.5], [0.0, 4.0], [1.0, 1.0]];
        let qp = q.apply(&p.view()).unwrap();
        let nnz = qp.iter().filter(|&&x| x != 0.0).count() as f64;
        let c = layer_cost(&q, &p.view(), &qp.view(), 1.5).unwrap();
        assert!((c - 2.25 * nnz).abs() < 1e-12);
        let zero = Array2::<f64>::zeros((4, 2));
        let c0 = layer_cost(&q, &p.view(), &zero.view(), 1.5).unwrap();
        let pn: f64 = p.iter().map(|x| x * x).sum();
        assert!((c0 - pn).abs() < 1e-12);
    }

    #[test]
    fn dct_small_cases() {
        assert_eq!(dct2_init::<f64>(1, 1).unwrap().into_inner(), array![[1.0]]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let d = dct2_init::<f64>(2, 1).unwrap().into_inner();
        let expected = array![[h, h], [h, -h]];
        assert!((d - expected).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn dct_is_orthonormal() {
        for (a, b) in [(1, 5), (3, 3), (8, 8), (9, 9), (4, 7)] {
            let d = dct2_init::<f64>(a, b).unwrap();
            assert!(d.unitarity_error() < 1e-12, "{a}x{b}");
            // First atom is constant.
            let row0 = d.matrix().row(0).to_owned();
            assert!(row0.iter().all(|&x| (x - row0[0]).abs() < 1e-15));
        }
    }

    #[test]
    fn unitary_constructor_validates() {
        assert!(Unitary::new(array![[1.0, 0.0], [0.0, 1.0]]).is_ok());
        assert!(Unitary::new(array![[1.0, 0.1], [0.0, 1.0]]).is_err());
        assert!(Unitary::<f64>::new(Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let p: Array2<f32> = Array2::from_shape_fn((4, 9), |(i, j)| ((i * 7 + j * 3) % 5) as f32 - 2.0);
        let q = dct2_init::<f32>(2, 2).unwrap();
        let z = sparse_code_layer(&q, &p.view(), 0.5).unwrap();
        let q2 = procrustes_update(&p.view(), &z.view()).unwrap();
        assert!(q2.unitarity_error() < 1e-5);
        let before = layer_cost(&q, &p.view(), &z.view(), 0.5).unwrap();
        let after = layer_cost(&q2, &p.view(), &z.view(), 0.5).unwrap();
        assert!(after <= before * (1.0 + 1e-5));
    }
}
