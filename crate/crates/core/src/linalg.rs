//! Small dense helpers on top of nalgebra: symmetric eigen-decomposition
//! with a fixed ordering and the PSD square root.

use nalgebra::{DMatrix, SymmetricEigen};

/// Eigenvalue clipping threshold for square roots.
pub const CLIP_TOL: f64 = 1e-12;

/// Symmetric eigen-decomposition with eigenvalues sorted descending and
/// each eigenvector's sign fixed (largest-magnitude entry positive).
pub fn sym_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let n = sym.nrows();
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        vals.push(eig.eigenvalues[src]);
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vecs.set_column(dst, &col);
    }
    (vals, vecs)
}

/// Result of a PSD square root.
#[derive(Debug, Clone)]
pub struct SqrtResult {
    pub root: DMatrix<f64>,
    /// Smallest eigenvalue before clipping.
    pub min_eigenvalue: f64,
    /// True when some eigenvalue fell below `-CLIP_TOL` and was set to zero.
    pub clipped: bool,
}

/// Symmetric square root `V diag(√λ) Vᵀ` with negative eigenvalues clipped
/// at zero.
pub fn sym_sqrt(a: &DMatrix<f64>) -> SqrtResult {
    let (vals, vecs) = sym_eigen(a);
    let min_eigenvalue = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let clipped = min_eigenvalue < -CLIP_TOL;
    let roots: Vec<f64> = vals.iter().map(|&v| v.max(0.0).sqrt()).collect();
    let root = reconstruct(&vecs, &roots);
    SqrtResult {
        root,
        min_eigenvalue,
        clipped,
    }
}

/// Projection onto the PSD cone: negative eigenvalues set to zero.
pub fn clip_psd(a: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let (vals, vecs) = sym_eigen(a);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let kept: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
    (reconstruct(&vecs, &kept), min)
}

fn reconstruct(vecs: &DMatrix<f64>, vals: &[f64]) -> DMatrix<f64> {
    let n = vals.len();
    let mut out = DMatrix::zeros(n, n);
    for (k, &v) in vals.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let col = vecs.column(k);
        out += col * col.transpose() * v;
    }
    out
}

/// Spectral condition number of a symmetric PSD matrix; infinite when singular.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(a);
    let max = vals.first().copied().unwrap_or(0.0);
    let min = vals.last().copied().unwrap_or(0.0);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigen(a).0.last().copied().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sqrt_of_diagonal() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 9.0, 0.0]));
        let r = sym_sqrt(&a);
        assert!(!r.clipped);
        assert_abs_diff_eq!(r.root[(0, 0)], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.root[(1, 1)], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(r.root[(2, 2)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn sqrt_squares_back() {
        let b = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.2, 0.0, 2.0, 0.5, 0.1, 0.0, 0.7]);
        let a = &b * b.transpose();
        let r = sym_sqrt(&a);
        let back = &r.root * &r.root;
        assert!((back - a).amax() < 1e-12);
    }

    #[test]
    fn negative_eigenvalue_is_flagged() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-6]);
        let r = sym_sqrt(&a);
        assert!(r.clipped);
        assert!(r.min_eigenvalue < 0.0);
        assert_abs_diff_eq!(r.root[(1, 1)], 0.0);
    }
}
