//! Dense linear-algebra helpers shared by the pipeline stages.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// Matrices at or below this order use a full symmetric eigendecomposition.
pub const FULL_EIGEN_MAX_DIM: usize = 512;
pub const POWER_TOLERANCE: f64 = 1e-8;
pub const POWER_MAX_ITERATIONS: usize = 1000;

/// Columns gathered per GEMM call when forming Gram matrices.
const GRAM_CHUNK: usize = 4096;

/// `out += alpha * Z Zᵀ` for a column-major `rows × cols` block `z`.
fn gemm_zzt(out: &mut DMatrix<f64>, z: &[f64], rows: usize, cols: usize, alpha: f64) {
    assert_eq!(out.nrows(), rows);
    assert_eq!(out.ncols(), rows);
    assert_eq!(z.len(), rows * cols);
    if cols == 0 || rows == 0 {
        return;
    }
    let ld = rows as isize;
    // SAFETY: `z` holds rows*cols elements laid out column-major with leading
    // dimension `rows`; `out` is a rows×rows column-major buffer. The strides
    // passed below address exactly those elements.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            cols,
            rows,
            alpha,
            z.as_ptr(),
            1,
            ld,
            z.as_ptr(),
            ld,
            1,
            1.0,
            out.as_mut_ptr(),
            1,
            ld,
        );
    }
}

/// `Σ_t (scale_t)² y_{c_t} y_{c_t}ᵀ` over the listed columns of `y`.
///
/// With `scales == None` every factor is 1.
pub fn scaled_gram(y: &DMatrix<f64>, columns: &[usize], scales: Option<&[f64]>) -> DMatrix<f64> {
    let m = y.nrows();
    if let Some(sc) = scales {
        assert_eq!(sc.len(), columns.len());
    }
    let mut out = DMatrix::zeros(m, m);
    let mut buf = Vec::with_capacity(m * GRAM_CHUNK.min(columns.len().max(1)));
    for (chunk_no, chunk) in columns.chunks(GRAM_CHUNK).enumerate() {
        buf.clear();
        for (t, &c) in chunk.iter().enumerate() {
            let factor = scales.map_or(1.0, |sc| sc[chunk_no * GRAM_CHUNK + t]);
            buf.extend(y.column(c).iter().map(|v| v * factor));
        }
        gemm_zzt(&mut out, &buf, m, chunk.len(), 1.0);
    }
    symmetrize(&mut out);
    out
}

/// `Y Yᵀ` over all columns.
pub fn full_gram(y: &DMatrix<f64>) -> DMatrix<f64> {
    let m = y.nrows();
    let mut out = DMatrix::zeros(m, m);
    // Column-major storage is already the layout gemm_zzt expects.
    for chunk in y.as_slice().chunks(m.max(1) * GRAM_CHUNK) {
        gemm_zzt(&mut out, chunk, m, chunk.len() / m.max(1), 1.0);
    }
    symmetrize(&mut out);
    out
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Flip the vector so its largest-magnitude entry is positive (first such entry on ties).
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        fix_sign(col.as_mut_slice());
    }
}

/// Full symmetric eigendecomposition with eigenvalues in descending order.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = a.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(a.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Eigenvalues of a symmetric matrix in descending order.
pub fn sym_eigenvalues_desc(a: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = a.clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(|x, y| y.total_cmp(x));
    v
}

/// Largest-magnitude eigenvalue of a symmetric matrix.
pub fn sym_spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .symmetric_eigenvalues()
        .iter()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .singular_values()
        .iter()
        .fold(0.0f64, |acc, v| acc.max(*v))
}

/// Orthonormal basis for the column span of a full-column-rank matrix.
pub fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = a.ncols();
    let q = a.clone().qr().q();
    q.columns(0, cols).into_owned()
}

/// The `count` algebraically largest eigenpairs of a symmetric matrix, eigenvectors
/// sign-fixed. Full decomposition up to [`FULL_EIGEN_MAX_DIM`], block power iteration above.
pub fn top_eigenpairs(a: &DMatrix<f64>, count: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if count == 0 || count > n {
        return Err(Error::Config(format!(
            "requested {count} eigenpairs of a {n}x{n} matrix"
        )));
    }
    let (values, mut vectors) = if n <= FULL_EIGEN_MAX_DIM {
        let (vals, vecs) = sym_eigen_desc(a);
        (vals[..count].to_vec(), vecs.columns(0, count).into_owned())
    } else {
        block_power(a, count, POWER_TOLERANCE, POWER_MAX_ITERATIONS)?
    };
    fix_column_signs(&mut vectors);
    Ok((values, vectors))
}

/// Shifted block power iteration with Rayleigh–Ritz extraction.
///
/// The shift by the ∞-norm makes the iterated operator positive semidefinite, so
/// the dominant invariant subspace is the algebraically top one. Convergence is
/// declared when every requested Ritz pair has residual ‖Av − λv‖ ≤ tol·max(1, ‖A‖∞).
pub fn block_power(
    a: &DMatrix<f64>,
    count: usize,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    let width = (count + 8).min(n);
    let shift = (0..n)
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let scale = shift.max(1.0);

    let mut rng = rng::stream_rng(n as u64, &[stream::PERTURBATION, count as u64]);
    let start = DMatrix::from_fn(n, width, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut q = orthonormalize(&start);
    let mut residual = f64::INFINITY;

    for _ in 0..max_iter {
        let aq = a * &q;
        let h = q.transpose() * &aq;
        let (ritz_vals, ritz_vecs) = sym_eigen_desc(&(0.5 * (&h + h.transpose())));
        let x = &q * &ritz_vecs;
        let ax = &aq * &ritz_vecs;
        residual = (0..count)
            .map(|c| (ax.column(c) - x.column(c) * ritz_vals[c]).norm())
            .fold(0.0f64, f64::max);
        if residual <= tol * scale {
            return Ok((ritz_vals[..count].to_vec(), x.columns(0, count).into_owned()));
        }
        let shifted = ax + x * shift;
        q = orthonormalize(&shifted);
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
        tolerance: tol * scale,
    })
}

pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn unit(v: &DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_sym(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng::stream_rng(seed, &[]);
        let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &g + g.transpose()
    }

    #[test]
    fn gram_routes_agree() {
        let mut rng = rng::stream_rng(3, &[]);
        let y = DMatrix::from_fn(7, 9000, |_, _| rng.sample::<f64, _>(StandardNormal));
        let all: Vec<usize> = (0..y.ncols()).collect();
        let direct = &y * y.transpose();
        assert!((full_gram(&y) - &direct).amax() < 1e-8 * direct.amax());
        assert!((scaled_gram(&y, &all, None) - &direct).amax() < 1e-8 * direct.amax());

        let cols = [4usize, 17, 8100];
        let sc = [2.0, -0.5, 1.5];
        let mut expect = DMatrix::zeros(7, 7);
        for (c, f) in cols.iter().zip(sc) {
            expect += y.column(*c) * y.column(*c).transpose() * (f * f);
        }
        assert!((scaled_gram(&y, &cols, Some(&sc)) - expect).amax() < 1e-12);
    }

    #[test]
    fn sign_fix_makes_largest_entry_positive() {
        let mut v = [0.1, -0.9, 0.5];
        fix_sign(&mut v);
        assert_eq!(v, [-0.1, 0.9, -0.5]);
        let mut w = [0.0, 0.0];
        fix_sign(&mut w);
        assert_eq!(w, [0.0, 0.0]);
    }

    #[test]
    fn eigen_sorted_descending() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, -2.0]));
        let (vals, vecs) = sym_eigen_desc(&a);
        assert_eq!(vals, vec![5.0, 1.0, -2.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_power_matches_full_decomposition() {
        let a = random_sym(60, 11);
        let (full_vals, full_vecs) = sym_eigen_desc(&a);
        let (vals, vecs) = block_power(&a, 4, 1e-10, 5000).unwrap();
        for c in 0..4 {
            assert!((vals[c] - full_vals[c]).abs() < 1e-8, "{} vs {}", vals[c], full_vals[c]);
            let overlap = vecs.column(c).dot(&full_vecs.column(c)).abs();
            assert!((overlap - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn block_power_reports_nonconvergence() {
        let a = random_sym(40, 5);
        match block_power(&a, 3, 1e-14, 2) {
            Err(Error::NoConvergence { iterations, .. }) => assert_eq!(iterations, 2),
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn top_eigenpairs_rejects_bad_counts() {
        let a = DMatrix::<f64>::identity(3, 3);
        assert!(top_eigenpairs(&a, 0).is_err());
        assert!(top_eigenpairs(&a, 4).is_err());
    }
}
