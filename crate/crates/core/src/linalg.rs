//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative symmetry check: `max |K - Kᵀ| <= tol * max(1, max |K|)`.
pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut vals = m.clone().symmetric_eigenvalues();
    vals.as_mut_slice().sort_by(|a, b| a.total_cmp(b));
    vals
}

/// Symmetric and positive semi-definite up to `-1e-10 * largest eigenvalue`.
pub fn check_covariance(m: &DMatrix<f64>, label: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!(
            "covariance for {label} is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "covariance for {label} has non-finite entries"
        )));
    }
    if !is_symmetric(m, 1e-12) {
        return Err(Error::Validation(format!(
            "covariance for {label} is not symmetric"
        )));
    }
    let vals = symmetric_eigenvalues(m);
    let largest = vals[vals.len() - 1].max(0.0);
    if vals[0] < -1e-10 * largest.max(f64::MIN_POSITIVE) {
        return Err(Error::Validation(format!(
            "covariance for {label} is not positive semi-definite (smallest eigenvalue {:e})",
            vals[0]
        )));
    }
    Ok(())
}

/// Unweighted mean of a set of equally sized square matrices.
pub fn pooled_covariance<'a, I>(covs: I) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a DMatrix<f64>>,
{
    let mut it = covs.into_iter();
    let first = it.next().expect("pooled_covariance needs at least one matrix");
    let mut acc = first.clone();
    let mut count = 1.0;
    for c in it {
        acc += c;
        count += 1.0;
    }
    acc / count
}

/// The `k` leading eigenvectors (columns, largest eigenvalue first) and their eigenvalues.
pub fn top_eigenvectors(m: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, Vec<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut vecs = DMatrix::zeros(m.nrows(), k);
    let mut vals = Vec::with_capacity(k);
    for (dst, &src) in order.iter().take(k).enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
        vals.push(eig.eigenvalues[src]);
    }
    (vecs, vals)
}

/// `‖WᵀW − I‖_F`.
pub fn orthonormality_violation(w: &DMatrix<f64>) -> f64 {
    let mut gram = w.transpose() * w;
    for i in 0..gram.nrows() {
        gram[(i, i)] -= 1.0;
    }
    gram.norm()
}

fn orthonormal_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().qr().q()
}

/// Principal angles (radians, ascending) between the column spaces of `a` and `b`.
///
/// Computed from the sines (singular values of the residual of `b`'s basis
/// after projection onto `a`'s span) so small angles stay accurate.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = orthonormal_basis(a);
    let qb = orthonormal_basis(b);
    let residual = &qb - &qa * (qa.transpose() * &qb);
    let mut sines: Vec<f64> = residual
        .singular_values()
        .iter()
        .map(|s| s.clamp(0.0, 1.0).asin())
        .collect();
    sines.sort_by(|x, y| x.total_cmp(y));
    sines
}

/// Flip each column so its largest-magnitude entry is positive.
/// Ties resolve to the lowest row index.
pub fn fix_column_signs(w: &mut DMatrix<f64>) {
    for j in 0..w.ncols() {
        let mut best = 0;
        for i in 1..w.nrows() {
            if w[(i, j)].abs() > w[(best, j)].abs() {
                best = i;
            }
        }
        if w[(best, j)] < 0.0 {
            w.column_mut(j).neg_mut();
        }
    }
}

/// Number of strictly positive entries in each row.
pub fn nonzeros_per_row(w: &DMatrix<f64>) -> Vec<usize> {
    w.row_iter()
        .map(|r| r.iter().filter(|v| **v != 0.0).count())
        .collect()
}
