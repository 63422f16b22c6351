//! Correlation-weighted covariances and spanning-subspace recovery.
//!
//! For a sample `y_j` the weighted covariance
//! `Σ̂_j = (1/N) Σ_{i≠j} ⟨y_j, y_i⟩² y_i y_iᵀ` carries a rank-`s` spike along
//! the span of the dictionary columns supporting `y_j`. Removing the
//! Frobenius component along the plain covariance `Σ̂ = (1/N) Y Yᵀ` isolates
//! the spike, and the top `s` eigenvectors of what remains estimate the
//! spanning subspace.

use std::ops::Range;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{Dictionary, SampleSet};

/// Frobenius norms below this are treated as a degenerate covariance.
pub const FROBENIUS_FLOOR: f64 = 1e-12;
const ORTHONORMAL_TOLERANCE: f64 = 1e-8;

/// A symmetric `M × M` matrix; symmetrized on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(mut entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::Dimension {
                context: "symmetric matrix",
                expected: entries.nrows(),
                found: entries.ncols(),
            });
        }
        linalg::symmetrize(&mut entries);
        Ok(SymMatrix(entries))
    }

    pub(crate) fn from_symmetric(mut entries: DMatrix<f64>) -> Self {
        linalg::symmetrize(&mut entries);
        SymMatrix(entries)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn frobenius_inner(&self, other: &SymMatrix) -> f64 {
        linalg::frobenius_inner(&self.0, &other.0)
    }

    /// Largest absolute eigenvalue.
    pub fn spectral_norm(&self) -> f64 {
        linalg::sym_spectral_norm(&self.0)
    }

    pub fn eigenvalues_desc(&self) -> Vec<f64> {
        linalg::sym_eigenvalues_desc(&self.0)
    }
}

/// A subspace of `R^M` held as an orthonormal `M × d` basis.
#[derive(Clone, Debug, PartialEq)]
pub struct Subspace {
    basis: DMatrix<f64>,
}

impl Subspace {
    /// Accepts a basis whose Gram matrix is the identity within 1e-8 entrywise.
    pub fn from_orthonormal(basis: DMatrix<f64>) -> Result<Self> {
        let d = basis.ncols();
        if d == 0 || d > basis.nrows() {
            return Err(Error::config(format!(
                "subspace dimension {d} outside 1..={}",
                basis.nrows()
            )));
        }
        let gram = basis.transpose() * &basis;
        let err = (gram - DMatrix::<f64>::identity(d, d)).amax();
        if !(err <= ORTHONORMAL_TOLERANCE) {
            return Err(Error::config(format!(
                "basis is not orthonormal (max Gram deviation {err:e})"
            )));
        }
        Ok(Subspace { basis })
    }

    /// Orthonormalize a full-column-rank spanning set.
    pub fn from_spanning(vectors: &DMatrix<f64>) -> Result<Self> {
        Self::from_orthonormal(linalg::orthonormalize(vectors))
    }

    /// The span of the given dictionary columns.
    pub fn spanned_by(dictionary: &Dictionary, columns: &[usize]) -> Result<Self> {
        Self::from_spanning(&dictionary.matrix().select_columns(columns))
    }

    pub(crate) fn from_basis_unchecked(basis: DMatrix<f64>) -> Self {
        Subspace { basis }
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    /// ‖P_S v‖₂ for the orthogonal projector onto this subspace.
    pub fn projection_norm(&self, v: &DVector<f64>) -> f64 {
        (self.basis.transpose() * v).norm()
    }
}

/// `Σ̂ = (1/N) Y Yᵀ`.
pub fn sample_covariance(samples: &SampleSet) -> SymMatrix {
    let n = samples.n().max(1) as f64;
    SymMatrix::from_symmetric(linalg::full_gram(samples.matrix()) / n)
}

/// `Σ̂_j = (1/N) Σ_{i≠j} ⟨y_j, y_i⟩² y_i y_iᵀ`.
pub fn weighted_covariance(samples: &SampleSet, j: usize) -> Result<SymMatrix> {
    let n = samples.n();
    if n < 2 {
        return Err(Error::config("weighted covariance needs at least two samples"));
    }
    if j >= n {
        return Err(Error::config(format!("sample index {j} out of range for n = {n}")));
    }
    let y = samples.matrix();
    let mut corr: Vec<f64> = (y.transpose() * y.column(j)).iter().copied().collect();
    corr[j] = 0.0;
    let all: Vec<usize> = (0..n).collect();
    let gram = linalg::scaled_gram(y, &all, Some(&corr));
    Ok(SymMatrix::from_symmetric(gram / n as f64))
}

/// Closed-form `E[⟨y₀, y⟩² y yᵀ]` for a fresh sample `y` from the ±1 uniform-support model.
///
/// With `r = (s−1)/(K−1)`, `c_k = ⟨y₀, d_k⟩` and `v₀ = DDᵀy₀ = Dc`:
///
/// ```text
/// (s/K) [ 2r v₀v₀ᵀ + (1 − 3r) Σ_k c_k² d_k d_kᵀ + r ‖c‖² DDᵀ ]
/// ```
///
/// Sign symmetry leaves only the pairings `{a=b, c=e}`, `{a=c, b=e}` and
/// `{a=e, b=c}` of the fourth moment of the coefficients. `support0` is the
/// support of `y₀`; it is only validated, since the expectation depends on `y₀`
/// alone. Intended as a test oracle for [`weighted_covariance`].
pub fn expected_weighted_covariance(
    dictionary: &Dictionary,
    y0: &DVector<f64>,
    support0: &[usize],
    s: usize,
) -> Result<SymMatrix> {
    let (m, k) = (dictionary.m(), dictionary.k());
    if y0.len() != m {
        return Err(Error::Dimension {
            context: "reference sample length",
            expected: m,
            found: y0.len(),
        });
    }
    if support0.len() != s {
        return Err(Error::Dimension {
            context: "reference support size",
            expected: s,
            found: support0.len(),
        });
    }
    if s == 0 || s > k || support0.iter().any(|&i| i >= k) {
        return Err(Error::config(format!("invalid support for k = {k}, s = {s}")));
    }
    let d = dictionary.matrix();
    let (sf, kf) = (s as f64, k as f64);
    let r = if s == 1 { 0.0 } else { (sf - 1.0) / (kf - 1.0) };

    let c = d.transpose() * y0;
    let v0 = d * &c;
    let frame = d * d.transpose();

    let mut out = &v0 * v0.transpose() * (2.0 * r);
    for (i, ci) in c.iter().enumerate() {
        let col = d.column(i);
        out.ger((1.0 - 3.0 * r) * ci * ci, &col, &col, 1.0);
    }
    out += frame * (r * c.norm_squared());
    Ok(SymMatrix::from_symmetric(out * (sf / kf)))
}

/// `A − (⟨A,B⟩_F / ‖B‖²_F) B`, the Frobenius-orthogonal part of `A` relative to `B`.
pub fn frobenius_project_out(a: &SymMatrix, b: &SymMatrix) -> Result<SymMatrix> {
    let (coef, _) = projection_coefficient(a, b)?;
    Ok(SymMatrix::from_symmetric(a.matrix() - b.matrix() * coef))
}

fn projection_coefficient(a: &SymMatrix, b: &SymMatrix) -> Result<(f64, f64)> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            context: "Frobenius projection",
            expected: b.dim(),
            found: a.dim(),
        });
    }
    let norm = b.frobenius_norm();
    if !(norm >= FROBENIUS_FLOOR) {
        return Err(Error::DegenerateCovariance {
            norm,
            floor: FROBENIUS_FLOOR,
        });
    }
    Ok((a.frobenius_inner(b) / (norm * norm), norm))
}

/// Top-`s` eigenspace of the covariance-projected weighted covariance.
pub fn subspace_from_weighted(weighted: &SymMatrix, covariance: &SymMatrix, s: usize) -> Result<Subspace> {
    let projected = frobenius_project_out(weighted, covariance)?;
    let (_, vectors) = linalg::top_eigenpairs(projected.matrix(), s)?;
    Ok(Subspace::from_basis_unchecked(vectors))
}

/// Estimate the spanning subspace of sample `j`.
pub fn recover_subspace(samples: &SampleSet, covariance: &SymMatrix, j: usize, s: usize) -> Result<Subspace> {
    if s == 0 || s > samples.m() {
        return Err(Error::config(format!(
            "subspace dimension {s} outside 1..={}",
            samples.m()
        )));
    }
    let weighted = weighted_covariance(samples, j)?;
    subspace_from_weighted(&weighted, covariance, s)
}

/// `𝒟(S₁, S₂) = ‖(I − B₂B₂ᵀ) B₁‖₂`, the sine of the largest principal angle.
pub fn subspace_distance(a: &Subspace, b: &Subspace) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            context: "subspace distance",
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if a.ambient_dim() != b.ambient_dim() {
        return Err(Error::Dimension {
            context: "subspace ambient dimension",
            expected: a.ambient_dim(),
            found: b.ambient_dim(),
        });
    }
    let residual = a.basis() - b.basis() * (b.basis().transpose() * a.basis());
    Ok(linalg::spectral_norm(&residual).clamp(0.0, 1.0))
}

/// Packed fourth moment `T = (1/N) Σ_i vec(y_i y_iᵀ) vec(y_i y_iᵀ)ᵀ` over index pairs `a ≤ b`.
///
/// With `T` in hand every weighted covariance is one matrix–vector product:
/// `Σ̂_j = T(y_j, y_j) − (1/N) ‖y_j‖⁴ y_j y_jᵀ`. Building `T` costs about
/// `N P² / 2` for `P = M(M+1)/2`, so it pays off once many subspaces are needed.
pub struct FourthMoment {
    m: usize,
    n: usize,
    pairs: Vec<(usize, usize)>,
    table: DMatrix<f64>,
}

const TENSOR_TILE: usize = 1024;
const TENSOR_CHUNK: usize = 1024;
const TENSOR_BATCH: usize = 256;

impl FourthMoment {
    pub fn packed_len(m: usize) -> usize {
        m * (m + 1) / 2
    }

    pub fn memory_bytes(m: usize) -> usize {
        let p = Self::packed_len(m);
        p * p * std::mem::size_of::<f64>()
    }

    pub fn build(samples: &SampleSet) -> FourthMoment {
        let (m, n) = (samples.m(), samples.n());
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|b| (b..m).map(move |a| (a, b))).collect();
        let p = pairs.len();
        let mut table = DMatrix::<f64>::zeros(p, p);
        let y = samples.matrix();
        let mut q = vec![0.0f64; p * TENSOR_CHUNK];
        let alpha = 1.0 / n as f64;
        let mut start = 0;
        while start < n {
            let width = TENSOR_CHUNK.min(n - start);
            for t in 0..width {
                let col = y.column(start + t);
                let dst = &mut q[t * p..(t + 1) * p];
                for (slot, &(a, b)) in dst.iter_mut().zip(&pairs) {
                    *slot = col[a] * col[b];
                }
            }
            accumulate_lower_tiles(&mut table, &q[..p * width], p, width, alpha);
            start += width;
        }
        for j in 0..p {
            for i in 0..j {
                table[(i, j)] = table[(j, i)];
            }
        }
        FourthMoment { m, n, pairs, table }
    }

    /// Weighted covariances for the listed samples of the set this moment was built from.
    pub fn weighted_batch(&self, samples: &SampleSet, js: &[usize]) -> Vec<SymMatrix> {
        let p = self.pairs.len();
        let y = samples.matrix();
        let mut u = DMatrix::<f64>::zeros(p, js.len());
        for (t, &j) in js.iter().enumerate() {
            let col = y.column(j);
            for (r, &(a, b)) in self.pairs.iter().enumerate() {
                let w = if a == b { 1.0 } else { 2.0 };
                u[(r, t)] = w * col[a] * col[b];
            }
        }
        let contracted = &self.table * u;
        js.iter()
            .enumerate()
            .map(|(t, &j)| {
                let mut out = DMatrix::<f64>::zeros(self.m, self.m);
                for (r, &(a, b)) in self.pairs.iter().enumerate() {
                    let v = contracted[(r, t)];
                    out[(a, b)] = v;
                    out[(b, a)] = v;
                }
                let col = y.column(j);
                let sq = col.norm_squared();
                out.ger(-sq * sq / self.n as f64, &col, &col, 1.0);
                SymMatrix::from_symmetric(out)
            })
            .collect()
    }
}

/// Lower block tiles of `out += alpha Q Qᵀ` for column-major `Q` (`rows × cols`).
fn accumulate_lower_tiles(out: &mut DMatrix<f64>, q: &[f64], rows: usize, cols: usize, alpha: f64) {
    let ld = rows as isize;
    let tiles: Vec<(usize, usize)> = (0..rows)
        .step_by(TENSOR_TILE)
        .map(|s| (s, TENSOR_TILE.min(rows - s)))
        .collect();
    for &(ri, hi) in &tiles {
        for &(rj, hj) in tiles.iter().take_while(|t| t.0 <= ri) {
            // SAFETY: `q` holds rows*cols elements column-major (leading dim `rows`)
            // and `out` is rows×rows column-major. The offsets select the tile
            // rows ri..ri+hi of Q, rows rj..rj+hj of Q (read transposed), and the
            // matching block of `out`, all within bounds.
            unsafe {
                matrixmultiply::dgemm(
                    hi,
                    cols,
                    hj,
                    alpha,
                    q.as_ptr().add(ri),
                    1,
                    ld,
                    q.as_ptr().add(rj),
                    ld,
                    1,
                    1.0,
                    out.as_mut_ptr().add(ri + rj * rows),
                    1,
                    ld,
                );
            }
        }
    }
}

/// How weighted covariances are formed for a batch of samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceRoute {
    /// One weighted Gram product per sample: `O(N M²)` each.
    Direct,
    /// Shared packed fourth moment: `O(N M⁴ / 8)` once, then `O(M⁴ / 4)` each.
    FourthMoment,
}

/// Default cap on the fourth-moment table.
pub const DEFAULT_TENSOR_BUDGET: usize = 1 << 30;

/// Pick the cheaper route for recovering `count` subspaces.
pub fn choose_route(m: usize, n: usize, count: usize, memory_budget: usize) -> CovarianceRoute {
    if FourthMoment::memory_bytes(m) > memory_budget {
        return CovarianceRoute::Direct;
    }
    let p = FourthMoment::packed_len(m) as f64;
    let (mf, nf, cf) = (m as f64, n as f64, count as f64);
    let direct = cf * mf * mf * nf;
    let tensor = 0.6 * nf * p * p + cf * p * p;
    if tensor < direct {
        CovarianceRoute::FourthMoment
    } else {
        CovarianceRoute::Direct
    }
}

/// Batch subspace recovery sharing one sample covariance across indices.
pub struct SubspaceRecovery<'a> {
    samples: &'a SampleSet,
    covariance: SymMatrix,
    s: usize,
    moment: Option<FourthMoment>,
}

impl<'a> SubspaceRecovery<'a> {
    pub fn new(samples: &'a SampleSet, s: usize) -> Result<Self> {
        Self::with_covariance(samples, sample_covariance(samples), s)
    }

    pub fn with_covariance(samples: &'a SampleSet, covariance: SymMatrix, s: usize) -> Result<Self> {
        if s == 0 || s > samples.m() {
            return Err(Error::config(format!(
                "subspace dimension {s} outside 1..={}",
                samples.m()
            )));
        }
        if samples.n() < 2 {
            return Err(Error::config("subspace recovery needs at least two samples"));
        }
        if covariance.dim() != samples.m() {
            return Err(Error::Dimension {
                context: "sample covariance",
                expected: samples.m(),
                found: covariance.dim(),
            });
        }
        let norm = covariance.frobenius_norm();
        if !(norm >= FROBENIUS_FLOOR) {
            return Err(Error::DegenerateCovariance {
                norm,
                floor: FROBENIUS_FLOOR,
            });
        }
        Ok(SubspaceRecovery {
            samples,
            covariance,
            s,
            moment: None,
        })
    }

    pub fn covariance(&self) -> &SymMatrix {
        &self.covariance
    }

    pub fn into_covariance(self) -> SymMatrix {
        self.covariance
    }

    pub fn route(&self) -> CovarianceRoute {
        if self.moment.is_some() {
            CovarianceRoute::FourthMoment
        } else {
            CovarianceRoute::Direct
        }
    }

    /// Force a route. Building the fourth moment happens here.
    pub fn set_route(&mut self, route: CovarianceRoute) {
        match route {
            CovarianceRoute::Direct => self.moment = None,
            CovarianceRoute::FourthMoment if self.moment.is_none() => {
                debug!(
                    "building fourth moment: m = {}, n = {}, {} MiB",
                    self.samples.m(),
                    self.samples.n(),
                    FourthMoment::memory_bytes(self.samples.m()) >> 20
                );
                self.moment = Some(FourthMoment::build(self.samples));
            }
            CovarianceRoute::FourthMoment => {}
        }
    }

    /// Choose the route by cost for an upcoming batch of `count` recoveries.
    pub fn plan(&mut self, count: usize, memory_budget: usize) {
        let route = choose_route(self.samples.m(), self.samples.n(), count, memory_budget);
        self.set_route(route);
    }

    fn weighted_many(&self, js: &[usize]) -> Result<Vec<SymMatrix>> {
        match &self.moment {
            Some(moment) => Ok(moment.weighted_batch(self.samples, js)),
            None => js.iter().map(|&j| weighted_covariance(self.samples, j)).collect(),
        }
    }

    pub fn weighted(&self, j: usize) -> Result<SymMatrix> {
        if j >= self.samples.n() {
            return Err(Error::config(format!(
                "sample index {j} out of range for n = {}",
                self.samples.n()
            )));
        }
        Ok(self.weighted_many(&[j])?.remove(0))
    }

    pub fn recover(&self, j: usize) -> Result<Subspace> {
        subspace_from_weighted(&self.weighted(j)?, &self.covariance, self.s)
    }

    /// Recover subspaces for `range`, handing each batch to `sink` in index order.
    ///
    /// Batches are processed on up to `jobs` threads; the sink always sees
    /// them sequentially by starting index.
    pub fn recover_batches<F>(&self, range: Range<usize>, jobs: usize, mut sink: F) -> Result<()>
    where
        F: FnMut(usize, Vec<Subspace>) -> Result<()>,
    {
        if range.end > self.samples.n() {
            return Err(Error::config(format!(
                "requested subspaces up to {} but n = {}",
                range.end,
                self.samples.n()
            )));
        }
        let batch = match self.moment {
            Some(_) => TENSOR_BATCH,
            None => jobs.max(1),
        };
        let starts: Vec<usize> = range.clone().step_by(batch).collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
        // Process groups of batches in parallel, drain each group in order.
        for group in starts.chunks(jobs.max(1)) {
            let results: Vec<Result<(usize, Vec<Subspace>)>> = pool.install(|| {
                group
                    .par_iter()
                    .map(|&start| {
                        let end = (start + batch).min(range.end);
                        let js: Vec<usize> = (start..end).collect();
                        let weighted = self.weighted_many(&js)?;
                        let subspaces = weighted
                            .iter()
                            .map(|w| subspace_from_weighted(w, &self.covariance, self.s))
                            .collect::<Result<Vec<_>>>()?;
                        Ok((start, subspaces))
                    })
                    .collect()
            });
            for r in results {
                let (start, subspaces) = r?;
                sink(start, subspaces)?;
            }
        }
        Ok(())
    }

    pub fn recover_range(&self, range: Range<usize>, jobs: usize) -> Result<Vec<Subspace>> {
        let mut out = Vec::with_capacity(range.len());
        self.recover_batches(range, jobs, |_, batch| {
            out.extend(batch);
            Ok(())
        })?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Problem, ProblemConfig};

    fn e(m: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(m);
        v[i] = 1.0;
        v
    }

    fn line(v: DVector<f64>) -> Subspace {
        Subspace::from_spanning(&DMatrix::from_columns(&[v])).unwrap()
    }

    #[test]
    fn covariance_of_single_sample_is_outer_product() {
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let set = SampleSet::new(DMatrix::from_columns(&[y.clone()]));
        let c = sample_covariance(&set);
        assert!((c.matrix() - &y * y.transpose()).amax() < 1e-15);
    }

    #[test]
    fn covariance_of_basis_pair_is_half_identity() {
        let set = SampleSet::new(DMatrix::identity(2, 2));
        let c = sample_covariance(&set);
        assert!((c.matrix() - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn weighted_covariance_excludes_self_term() {
        let y1 = DVector::from_vec(vec![1.0, 2.0, 0.0]);
        let y2 = DVector::from_vec(vec![0.5, -1.0, 3.0]);
        let set = SampleSet::new(DMatrix::from_columns(&[y1.clone(), y2.clone()]));
        let w = weighted_covariance(&set, 0).unwrap();
        let ip = y1.dot(&y2);
        let expect = &y2 * y2.transpose() * (ip * ip / 2.0);
        assert!((w.matrix() - expect).amax() < 1e-14);
    }

    #[test]
    fn weighted_covariance_vanishes_for_orthogonal_reference() {
        let set = SampleSet::new(DMatrix::from_columns(&[e(3, 0), e(3, 1), e(3, 2) * 2.0]));
        assert_eq!(weighted_covariance(&set, 0).unwrap().matrix().amax(), 0.0);
    }

    #[test]
    fn weighted_covariance_errors() {
        let one = SampleSet::new(DMatrix::from_columns(&[e(3, 0)]));
        assert!(weighted_covariance(&one, 0).is_err());
        let two = SampleSet::new(DMatrix::identity(3, 2));
        assert!(weighted_covariance(&two, 2).is_err());
    }

    #[test]
    fn expected_covariance_two_element_identity() {
        let d = Dictionary::new(DMatrix::identity(2, 2)).unwrap();
        let got = expected_weighted_covariance(&d, &e(2, 0), &[0], 1).unwrap();
        let expect = e(2, 0) * e(2, 0).transpose() * 0.5;
        assert!((got.matrix() - expect).amax() < 1e-15);
        assert!(expected_weighted_covariance(&d, &e(2, 0), &[0, 1], 1).is_err());
        assert!(expected_weighted_covariance(&d, &DVector::zeros(3), &[0], 1).is_err());
    }

    fn exhaustive_expectation(d: &Dictionary, y0: &DVector<f64>, s: usize) -> DMatrix<f64> {
        let k = d.k();
        let mut acc = DMatrix::zeros(d.m(), d.m());
        let mut count = 0usize;
        for mask in 0u32..(1 << k) {
            if mask.count_ones() as usize != s {
                continue;
            }
            let support: Vec<usize> = (0..k).filter(|&i| mask >> i & 1 == 1).collect();
            for signs in 0u32..(1 << s) {
                let mut y = DVector::zeros(d.m());
                for (t, &i) in support.iter().enumerate() {
                    let x = if signs >> t & 1 == 1 { -1.0 } else { 1.0 };
                    y += d.column(i) * x;
                }
                let w = y0.dot(&y);
                acc += &y * y.transpose() * (w * w);
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn expected_covariance_matches_enumeration() {
        use crate::problem::gen_dictionary;
        for (m, k) in [(3usize, 5usize), (4, 6)] {
            let d = gen_dictionary(&ProblemConfig::new(m, k, 1, 1, 13).unwrap()).unwrap();
            for s in 1..=k {
                let support: Vec<usize> = (0..s).collect();
                let y0 = support.iter().fold(DVector::zeros(m), |acc, &i| acc + d.column(i));
                let got = expected_weighted_covariance(&d, &y0, &support, s).unwrap();
                let want = exhaustive_expectation(&d, &y0, s);
                assert!((got.matrix() - &want).amax() < 1e-10, "m={m} k={k} s={s}");
            }
        }
    }

    #[test]
    fn projection_cases() {
        let b = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let a = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(frobenius_project_out(&a, &b).unwrap(), a);
        assert_eq!(frobenius_project_out(&b, &b).unwrap().matrix().amax(), 0.0);

        let diag = SymMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0])).unwrap();
        let id = SymMatrix::new(DMatrix::identity(2, 2)).unwrap();
        let got = frobenius_project_out(&diag, &id).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!((got.matrix() - expect).amax() < 1e-15);

        let zero = SymMatrix::new(DMatrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            frobenius_project_out(&a, &zero),
            Err(Error::DegenerateCovariance { .. })
        ));
    }

    #[test]
    fn distance_analytic_cases() {
        let s1 = line(e(3, 0));
        assert!(subspace_distance(&s1, &s1).unwrap().abs() < 1e-15);
        assert!((subspace_distance(&s1, &line(e(3, 1))).unwrap() - 1.0).abs() < 1e-15);
        let diag = line((e(3, 0) + e(3, 1)) / 2f64.sqrt());
        let got = subspace_distance(&s1, &diag).unwrap();
        assert!((got - 0.5f64.sqrt()).abs() < 1e-12);
        let plane = Subspace::from_spanning(&DMatrix::identity(3, 2)).unwrap();
        assert!(subspace_distance(&s1, &plane).is_err());
    }

    #[test]
    fn subspace_rejects_non_orthonormal() {
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(Subspace::from_orthonormal(skew.clone()).is_err());
        assert!(Subspace::from_spanning(&skew).is_ok());
        assert!(Subspace::from_orthonormal(DMatrix::zeros(3, 0)).is_err());
    }

    #[test]
    fn full_dimension_recovery_is_whole_space() {
        let p = Problem::generate(&ProblemConfig::new(4, 8, 2, 200, 3).unwrap()).unwrap();
        let cov = sample_covariance(&p.samples);
        let sub = recover_subspace(&p.samples, &cov, 0, 4).unwrap();
        let truth = Subspace::from_orthonormal(DMatrix::identity(4, 4)).unwrap();
        assert!(subspace_distance(&sub, &truth).unwrap() < 1e-12);
    }

    #[test]
    fn orthonormal_dictionary_recovers_support_span() {
        use crate::problem::{synthesize, CoefficientMatrix, SubsetSampler};
        use crate::rng::stream_rng;
        use rand::Rng;
        // K = M = 8 with D = I, outside the overcomplete generator's range.
        let mut rng = stream_rng(11, &[]);
        let mut sampler = SubsetSampler::new(8);
        let n = 40_000;
        let supports: Vec<Vec<usize>> = (0..n).map(|_| sampler.draw(2, &[], &mut rng)).collect();
        let values: Vec<Vec<i8>> = (0..n)
            .map(|_| (0..2).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect())
            .collect();
        let x = CoefficientMatrix::new(8, supports, values).unwrap();
        let d = Dictionary::new(DMatrix::identity(8, 8)).unwrap();
        let y = synthesize(&d, &x).unwrap();
        let cov = sample_covariance(&y);
        for j in 0..5 {
            let got = recover_subspace(&y, &cov, j, 2).unwrap();
            let truth = Subspace::spanned_by(&d, x.support(j)).unwrap();
            let dist = subspace_distance(&got, &truth).unwrap();
            assert!(dist < 0.2, "sample {j}: distance {dist}");
        }
    }

    #[test]
    fn fourth_moment_route_matches_direct() {
        let p = Problem::generate(&ProblemConfig::new(7, 14, 2, 3000, 5).unwrap()).unwrap();
        let moment = FourthMoment::build(&p.samples);
        let js = [0usize, 17, 2999];
        let batch = moment.weighted_batch(&p.samples, &js);
        for (w, &j) in batch.iter().zip(&js) {
            let direct = weighted_covariance(&p.samples, j).unwrap();
            let err = (w.matrix() - direct.matrix()).amax();
            assert!(err < 1e-12 * direct.matrix().amax().max(1.0), "j = {j}: {err:e}");
        }
    }

    #[test]
    fn batch_recovery_is_route_and_job_invariant() {
        let p = Problem::generate(&ProblemConfig::new(10, 20, 2, 2000, 8).unwrap()).unwrap();
        let mut rec = SubspaceRecovery::new(&p.samples, 2).unwrap();
        let direct = rec.recover_range(0..9, 1).unwrap();
        let parallel = rec.recover_range(0..9, 3).unwrap();
        assert_eq!(direct, parallel);
        rec.set_route(CovarianceRoute::FourthMoment);
        let tensor = rec.recover_range(0..9, 2).unwrap();
        for (a, b) in direct.iter().zip(&tensor) {
            assert!(subspace_distance(a, b).unwrap() < 1e-8);
        }
        assert!(rec.recover_range(0..2001, 1).is_err());
    }

    #[test]
    fn route_choice_follows_cost() {
        assert_eq!(choose_route(100, 100_000, 10, DEFAULT_TENSOR_BUDGET), CovarianceRoute::Direct);
        assert_eq!(
            choose_route(100, 100_000, 50_000, DEFAULT_TENSOR_BUDGET),
            CovarianceRoute::FourthMoment
        );
        assert_eq!(choose_route(400, 100_000, 100_000, DEFAULT_TENSOR_BUDGET), CovarianceRoute::Direct);
    }
}
