//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Thin SVD with singular values sorted in descending order.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn sorted_svd(m: &DMatrix<f64>) -> Result<SortedSvd> {
    let svd = m.clone().svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not return U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not return V^T".into()))?;
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    // stable: ties keep their original column order
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u_sorted = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v_sorted = DMatrix::from_fn(v_t.ncols(), order.len(), |r, c| v_t[(order[c], r)]);
    let s_sorted = DVector::from_iterator(order.len(), order.iter().map(|&i| s[i]));
    Ok(SortedSvd {
        u: u_sorted,
        singular_values: s_sorted,
        v: v_sorted,
    })
}

/// Flip signs of paired columns so the first entry of each `v` column with
/// magnitude above `1e-12` is positive.
pub fn fix_signs(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    for c in 0..v.ncols() {
        let first = v.column(c).iter().copied().find(|x| x.abs() > 1e-12);
        if matches!(first, Some(x) if x < 0.0) {
            v.column_mut(c).neg_mut();
            if c < u.ncols() {
                u.column_mut(c).neg_mut();
            }
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Rebuild a symmetric matrix from an eigendecomposition after mapping each eigenvalue.
pub fn spectral_map(
    values: &DVector<f64>,
    vectors: &DMatrix<f64>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let mapped = DVector::from_iterator(values.len(), values.iter().map(|&x| f(x)));
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| {
        vectors[(r, c)] * mapped[c]
    });
    symmetrize(&(scaled * vectors.transpose()))
}

/// Solve `a x = b` by LU, failing on a singular system.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Numerical("singular linear system".into()))
}

pub fn solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Numerical("singular linear system".into()))
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Orthonormal basis of the column space of a Gaussian `rows x cols` matrix
/// (`cols <= rows`), with the QR sign ambiguity removed.
pub fn random_orthonormal_columns(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = gaussian_matrix(rows, cols, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..cols {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Append `extra` random orthonormal columns orthogonal to the (orthonormal)
/// columns of `basis`.
pub fn complete_orthonormal(basis: &DMatrix<f64>, extra: usize, rng: &mut Rng) -> Result<DMatrix<f64>> {
    let n = basis.nrows();
    let total = basis.ncols() + extra;
    if total > n {
        return Err(Error::InvalidArgument(format!(
            "cannot complete {} columns to {} in dimension {}",
            basis.ncols(),
            total,
            n
        )));
    }
    let mut cols: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    let mut attempts = 0;
    while cols.len() < total {
        attempts += 1;
        if attempts > 100 * total {
            return Err(Error::Numerical("orthonormal completion did not converge".into()));
        }
        let mut v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        // two Gram-Schmidt passes
        for _ in 0..2 {
            for c in &cols {
                let p = c.dot(&v);
                v.axpy(-p, c, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Number of eigenvalues of a PSD matrix above `rel_tol * max_eigenvalue`.
pub fn psd_rank(values: &DVector<f64>, rel_tol: f64) -> usize {
    let max = values.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    values.iter().filter(|&&x| x > rel_tol * max).count()
}

/// Population covariance (divides by N) of the rows of `data`.
pub fn covariance(rows: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidArgument("covariance of an empty sample".into()))?;
    let d = first.len();
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += r;
    }
    mean /= n;
    let centered = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j] - mean[j]);
    Ok(symmetrize(&(centered.transpose() * &centered / n)))
}
