//! Oracle refinement and oracle averaging.
//!
//! Supports are estimated by thresholding the projection of each estimated
//! column onto each recovered subspace. Each column is then rebuilt as the lead
//! eigenvector of the covariance of the samples that use it, with the global
//! covariance projected out. Averaging recovers coefficient signs against the
//! refined column and averages the sign-corrected samples.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{CoefficientMatrix, SampleSet};
use crate::spectral::{frobenius_project_out, Subspace, SymMatrix};

pub const DEFAULT_SUPPORT_TAU: f64 = 0.5;
/// Columns estimated from fewer samples than this are flagged low-confidence.
pub const LOW_CONFIDENCE_FLOOR: usize = 10;

/// A dictionary estimate whose columns may be missing.
///
/// Absent columns are stored as zeros and excluded by every consumer.
#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryEstimate {
    columns: DMatrix<f64>,
    present: Vec<bool>,
}

impl DictionaryEstimate {
    pub fn new(columns: DMatrix<f64>, present: Vec<bool>) -> Result<Self> {
        if present.len() != columns.ncols() {
            return Err(Error::Dimension {
                context: "dictionary estimate presence mask",
                expected: columns.ncols(),
                found: present.len(),
            });
        }
        let mut columns = columns;
        for (k, &p) in present.iter().enumerate() {
            if !p {
                columns.column_mut(k).fill(0.0);
            }
        }
        Ok(DictionaryEstimate { columns, present })
    }

    /// Every column present.
    pub fn full(columns: DMatrix<f64>) -> Self {
        let present = vec![true; columns.ncols()];
        DictionaryEstimate { columns, present }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn m(&self) -> usize {
        self.columns.nrows()
    }

    pub fn k(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_present(&self, k: usize) -> bool {
        self.present[k]
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn present_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&k| self.present[k]).collect()
    }

    pub fn column(&self, k: usize) -> Option<DVector<f64>> {
        self.present[k].then(|| self.columns.column(k).into_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportEstimate {
    k: usize,
    per_sample: Vec<Vec<usize>>,
    per_element: Vec<Vec<usize>>,
}

impl SupportEstimate {
    /// Build from per-sample index sets over `k` elements.
    pub fn from_samples(k: usize, mut per_sample: Vec<Vec<usize>>) -> Result<Self> {
        let mut per_element = vec![Vec::new(); k];
        for (i, sup) in per_sample.iter_mut().enumerate() {
            sup.sort_unstable();
            sup.dedup();
            for &e in sup.iter() {
                if e >= k {
                    return Err(Error::config(format!(
                        "sample {i} lists element {e}, outside 0..{k}"
                    )));
                }
                per_element[e].push(i);
            }
        }
        Ok(SupportEstimate {
            k,
            per_sample,
            per_element,
        })
    }

    /// The true supports, as an estimate.
    pub fn exact(coefficients: &CoefficientMatrix) -> Self {
        SupportEstimate::from_samples(coefficients.k(), coefficients.supports().to_vec())
            .expect("coefficient supports are validated on construction")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.per_sample.len()
    }

    /// `Ω̃_i`, sorted.
    pub fn sample(&self, i: usize) -> &[usize] {
        &self.per_sample[i]
    }

    pub fn per_sample(&self) -> &[Vec<usize>] {
        &self.per_sample
    }

    /// `Ã_k`, sorted.
    pub fn element(&self, k: usize) -> &[usize] {
        &self.per_element[k]
    }

    /// `N_k` for every element.
    pub fn counts(&self) -> Vec<usize> {
        self.per_element.iter().map(Vec::len).collect()
    }
}

/// Incrementally thresholds projections as subspaces arrive in sample order.
pub struct SupportBuilder {
    probes: DMatrix<f64>,
    probe_index: Vec<usize>,
    k: usize,
    tau: f64,
    per_sample: Vec<Vec<usize>>,
}

impl SupportBuilder {
    pub fn new(estimate: &DictionaryEstimate, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::config(format!("support threshold {tau} must lie in (0, 1)")));
        }
        let probe_index = estimate.present_indices();
        let cols: Vec<DVector<f64>> = probe_index
            .iter()
            .map(|&k| linalg::unit(&estimate.columns.column(k).into_owned()))
            .collect();
        let probes = if cols.is_empty() {
            DMatrix::zeros(estimate.m(), 0)
        } else {
            DMatrix::from_columns(&cols)
        };
        Ok(SupportBuilder {
            probes,
            probe_index,
            k: estimate.k(),
            tau,
            per_sample: Vec::new(),
        })
    }

    /// Threshold the next subspace in sample order.
    pub fn push(&mut self, subspace: &Subspace) -> Result<()> {
        if subspace.ambient_dim() != self.probes.nrows() {
            return Err(Error::Dimension {
                context: "support estimation",
                expected: self.probes.nrows(),
                found: subspace.ambient_dim(),
            });
        }
        let coords = subspace.basis().transpose() * &self.probes;
        let tau2 = self.tau * self.tau;
        let support = coords
            .column_iter()
            .zip(&self.probe_index)
            .filter(|(c, _)| c.norm_squared() > tau2)
            .map(|(_, &k)| k)
            .collect();
        self.per_sample.push(support);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.per_sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }

    pub fn finish(self) -> SupportEstimate {
        SupportEstimate::from_samples(self.k, self.per_sample).expect("indices come from the estimate")
    }
}

/// `k ∈ Ω̃_i ⇔ ‖P_{Ŝ_i} d̂_k‖ > τ`, with each present estimate column normalized first.
pub fn estimate_supports(
    estimate: &DictionaryEstimate,
    subspaces: &[Subspace],
    tau: f64,
) -> Result<SupportEstimate> {
    let mut builder = SupportBuilder::new(estimate, tau)?;
    for s in subspaces {
        builder.push(s)?;
    }
    Ok(builder.finish())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedDictionary {
    pub estimate: DictionaryEstimate,
    /// `N_k` used for each column.
    pub counts: Vec<usize>,
    /// Gap between the two largest eigenvalues of `Ṽ_k^proj`; `None` for absent columns.
    pub eigengaps: Vec<Option<f64>>,
}

impl RefinedDictionary {
    /// Present columns built from fewer than `floor` samples.
    pub fn low_confidence(&self, floor: usize) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0 && n < floor)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn absent(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&k| self.counts[k] == 0).collect()
    }
}

/// `Ṽ_k = (1/N_k) Σ_{i∈Ã_k} y_i y_iᵀ`.
pub fn conditional_covariance(samples: &SampleSet, members: &[usize]) -> Result<SymMatrix> {
    if members.is_empty() {
        return Err(Error::config("conditional covariance of an empty sample list"));
    }
    if let Some(&bad) = members.iter().find(|&&i| i >= samples.n()) {
        return Err(Error::config(format!("sample {bad} outside 0..{}", samples.n())));
    }
    let g = linalg::scaled_gram(samples.matrix(), members, None);
    SymMatrix::new(g / members.len() as f64)
}

/// Rebuild every column with `N_k > 0` as the lead eigenvector of `Ṽ_k^proj`.
pub fn refine(samples: &SampleSet, covariance: &SymMatrix, supports: &SupportEstimate) -> Result<RefinedDictionary> {
    if covariance.dim() != samples.m() {
        return Err(Error::Dimension {
            context: "refinement covariance",
            expected: samples.m(),
            found: covariance.dim(),
        });
    }
    if supports.n() > samples.n() {
        return Err(Error::Dimension {
            context: "refinement supports",
            expected: samples.n(),
            found: supports.n(),
        });
    }
    let m = samples.m();
    let columns: Vec<Result<Option<(DVector<f64>, f64)>>> = (0..supports.k())
        .into_par_iter()
        .map(|k| {
            let members = supports.element(k);
            if members.is_empty() {
                return Ok(None);
            }
            let v = conditional_covariance(samples, members)?;
            let projected = frobenius_project_out(&v, covariance)?;
            let (values, vectors) = linalg::sym_eigen_desc(projected.matrix());
            let mut d = vectors.column(0).into_owned();
            linalg::fix_sign(d.as_mut_slice());
            let gap = if values.len() > 1 { values[0] - values[1] } else { values[0] };
            Ok(Some((d, gap)))
        })
        .collect();

    let mut matrix = DMatrix::zeros(m, supports.k());
    let mut present = vec![false; supports.k()];
    let mut eigengaps = vec![None; supports.k()];
    for (k, col) in columns.into_iter().enumerate() {
        if let Some((d, gap)) = col? {
            matrix.set_column(k, &d);
            present[k] = true;
            eigengaps[k] = Some(gap);
        }
    }
    let counts = supports.counts();
    let absent = counts.iter().filter(|&&n| n == 0).count();
    if absent > 0 {
        warn!("{absent} of {} columns have no supporting samples and are absent", counts.len());
    }
    Ok(RefinedDictionary {
        estimate: DictionaryEstimate::new(matrix, present)?,
        counts,
        eigengaps,
    })
}

/// `sign(⟨d̃_k, y_i⟩)` for each listed sample; a zero inner product maps to `+1`.
pub fn recover_signs(dtil: &DVector<f64>, samples: &SampleSet, members: &[usize]) -> Vec<i8> {
    let y = samples.matrix();
    members
        .iter()
        .map(|&i| {
            let ip = y.column(i).dot(dtil);
            if ip == 0.0 {
                warn!("sample {i} is orthogonal to the probe column; taking sign +1");
                1
            } else if ip > 0.0 {
                1
            } else {
                -1
            }
        })
        .collect()
}

fn signed_mean(samples: &SampleSet, members: &[usize], signs: &[i8]) -> DVector<f64> {
    let y = samples.matrix();
    let mut acc = DVector::zeros(samples.m());
    for (&i, &t) in members.iter().zip(signs) {
        acc.axpy(f64::from(t), &y.column(i), 1.0);
    }
    acc / members.len() as f64
}

/// `d̄_k = (1/N_k) Σ_{i∈Ã_k} sign(⟨d̃_k, y_i⟩) y_i`, not normalized.
pub fn average(samples: &SampleSet, supports: &SupportEstimate, refined: &DictionaryEstimate) -> Result<DictionaryEstimate> {
    if supports.k() != refined.k() {
        return Err(Error::Dimension {
            context: "averaging column count",
            expected: refined.k(),
            found: supports.k(),
        });
    }
    let columns: Vec<Option<DVector<f64>>> = (0..supports.k())
        .into_par_iter()
        .map(|k| {
            let members = supports.element(k);
            let probe = refined.column(k)?;
            if members.is_empty() {
                return None;
            }
            let signs = recover_signs(&probe, samples, members);
            Some(signed_mean(samples, members, &signs))
        })
        .collect();
    collect_estimate(samples.m(), columns)
}

/// Averaging with the true supports and signs.
pub fn true_average(samples: &SampleSet, coefficients: &CoefficientMatrix) -> Result<DictionaryEstimate> {
    if coefficients.n() > samples.n() {
        return Err(Error::Dimension {
            context: "true averaging sample count",
            expected: samples.n(),
            found: coefficients.n(),
        });
    }
    let by_element = coefficients.by_element();
    let columns: Vec<Option<DVector<f64>>> = by_element
        .par_iter()
        .map(|entries| {
            if entries.is_empty() {
                return None;
            }
            let (members, signs): (Vec<usize>, Vec<i8>) = entries.iter().copied().unzip();
            Some(signed_mean(samples, &members, &signs))
        })
        .collect();
    collect_estimate(samples.m(), columns)
}

fn collect_estimate(m: usize, columns: Vec<Option<DVector<f64>>>) -> Result<DictionaryEstimate> {
    let mut matrix = DMatrix::zeros(m, columns.len());
    let mut present = vec![false; columns.len()];
    for (k, col) in columns.into_iter().enumerate() {
        if let Some(c) = col {
            matrix.set_column(k, &c);
            present[k] = true;
        }
    }
    DictionaryEstimate::new(matrix, present)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{synthesize, Dictionary, Problem, ProblemConfig};
    use crate::rng;
    use crate::spectral::sample_covariance;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn exact_subspaces(p: &Problem, count: usize) -> Vec<Subspace> {
        (0..count)
            .map(|i| Subspace::spanned_by(&p.dictionary, p.coefficients.support(i)).unwrap())
            .collect()
    }

    fn single_sample(column: &DVector<f64>) -> SampleSet {
        SampleSet::new(DMatrix::from_columns(std::slice::from_ref(column)))
    }

    #[test]
    fn exact_inputs_give_exact_supports() {
        let p = Problem::generate(&ProblemConfig::new(128, 256, 3, 400, 21).unwrap()).unwrap();
        let est = DictionaryEstimate::full(p.dictionary.matrix().clone());
        let supp = estimate_supports(&est, &exact_subspaces(&p, 400), 0.5).unwrap();
        for i in 0..400 {
            assert_eq!(supp.sample(i), p.coefficients.support(i), "sample {i}");
        }
    }

    #[test]
    fn orthogonal_probe_is_never_selected() {
        let mut b = DMatrix::zeros(4, 2);
        b[(0, 0)] = 1.0;
        b[(1, 1)] = 1.0;
        let sub = Subspace::from_orthonormal(b).unwrap();
        let mut cols = DMatrix::zeros(4, 2);
        cols[(0, 0)] = 1.0;
        cols[(3, 1)] = 1.0;
        let supp = estimate_supports(&DictionaryEstimate::full(cols), &[sub.clone(), sub], 0.5).unwrap();
        assert_eq!(supp.sample(0), &[0]);
        assert!(supp.element(1).is_empty());
        assert_eq!(supp.counts(), vec![2, 0]);
    }

    #[test]
    fn absent_estimate_columns_are_skipped() {
        let cols = DMatrix::from_element(3, 2, 1.0 / 3f64.sqrt());
        let est = DictionaryEstimate::new(cols, vec![true, false]).unwrap();
        let sub = Subspace::from_spanning(&DMatrix::from_element(3, 1, 1.0)).unwrap();
        let supp = estimate_supports(&est, &[sub], 0.5).unwrap();
        assert_eq!(supp.sample(0), &[0]);
        assert!(est.column(1).is_none());
        assert!(est.matrix().column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn support_transposes_agree() {
        let supp = SupportEstimate::from_samples(5, vec![vec![3, 1], vec![], vec![1, 4, 1]]).unwrap();
        assert_eq!(supp.sample(2), &[1, 4]);
        assert_eq!(supp.element(1), &[0, 2]);
        assert_eq!(supp.counts(), vec![0, 2, 0, 1, 1]);
        assert!(SupportEstimate::from_samples(2, vec![vec![2]]).is_err());
    }

    #[test]
    fn rank_one_refinement_is_exact() {
        // Two samples, one per column; the covariance Σ̂ = ½(d₀d₀ᵀ + d₁d₁ᵀ) is
        // not Frobenius-orthogonal, but projecting it out keeps d₀ dominant.
        let d = Dictionary::new(DMatrix::identity(3, 3)).unwrap();
        let y = DMatrix::from_columns(&[d.column(0), d.column(1)]);
        let samples = SampleSet::new(y);
        let cov = sample_covariance(&samples);
        let supp = SupportEstimate::from_samples(3, vec![vec![0], vec![1]]).unwrap();
        let refined = refine(&samples, &cov, &supp).unwrap();
        let d0 = refined.estimate.column(0).unwrap();
        assert!((&d0 - d.column(0)).norm() < 1e-12);
        assert_eq!(refined.absent(), vec![2]);
        assert!(!refined.estimate.is_present(2));
        assert_eq!(refined.low_confidence(LOW_CONFIDENCE_FLOOR), vec![0, 1]);
    }

    #[test]
    fn refined_columns_are_unit_and_covariance_orthogonal() {
        let p = Problem::generate(&ProblemConfig::new(16, 32, 3, 4000, 2).unwrap()).unwrap();
        let cov = sample_covariance(&p.samples);
        let supp = SupportEstimate::exact(&p.coefficients);
        let refined = refine(&p.samples, &cov, &supp).unwrap();
        for k in refined.estimate.present_indices() {
            let v = conditional_covariance(&p.samples, supp.element(k)).unwrap();
            assert!(v.eigenvalues_desc().last().unwrap() > &-1e-10);
            let proj = frobenius_project_out(&v, &cov).unwrap();
            assert!(proj.frobenius_inner(&cov).abs() < 1e-10 * v.frobenius_norm() * cov.frobenius_norm());
            assert!((refined.estimate.column(k).unwrap().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn conditional_covariance_matches_expectation() {
        let (m, k, s) = (16usize, 32usize, 4usize);
        let p = Problem::generate(&ProblemConfig::new(m, k, s, 100_000, 8).unwrap()).unwrap();
        let supp = SupportEstimate::exact(&p.coefficients);
        let d = p.dictionary.matrix();
        let r = (s - 1) as f64 / (k - 1) as f64;
        for col in [0usize, 7, 31] {
            let members = supp.element(col);
            let v = conditional_covariance(&p.samples, members).unwrap();
            let dk = p.dictionary.column(col);
            let expect = &dk * dk.transpose() * (1.0 - r) + d * d.transpose() * r;
            let dev = linalg::sym_spectral_norm(&(v.matrix() - expect));
            let tol = 3.0 / (members.len() as f64).sqrt();
            assert!(dev < tol, "column {col}: {dev} vs {tol}");
        }
    }

    #[test]
    fn conditional_covariance_rejects_bad_lists() {
        let samples = SampleSet::new(DMatrix::identity(2, 2));
        assert!(conditional_covariance(&samples, &[]).is_err());
        assert!(conditional_covariance(&samples, &[2]).is_err());
    }

    #[test]
    fn signs_exact_with_true_column() {
        let p = Problem::generate(&ProblemConfig::new(64, 128, 4, 2000, 4).unwrap()).unwrap();
        let by = p.coefficients.by_element();
        for k in [0usize, 50, 127] {
            let (members, truth): (Vec<usize>, Vec<i8>) = by[k].iter().copied().unzip();
            assert_eq!(recover_signs(&p.dictionary.column(k), &p.samples, &members), truth);
        }
    }

    #[test]
    fn single_negative_sample_has_negative_sign() {
        let d = DVector::from_vec(vec![0.6, 0.8]);
        assert_eq!(recover_signs(&d, &single_sample(&(-&d)), &[0]), vec![-1]);
        assert_eq!(recover_signs(&d, &single_sample(&DVector::from_vec(vec![0.8, -0.6])), &[0]), vec![1]);
    }

    #[test]
    fn signs_survive_boundary_perturbation() {
        let (m, k, s) = (64usize, 128usize, 4usize);
        let radius = 3.0 / (8.0 * (s as f64).sqrt());
        let p = Problem::generate(&ProblemConfig::new(m, k, s, 1000, 31).unwrap()).unwrap();
        let by = p.coefficients.by_element();
        let mut rng = rng::stream_rng(31, &[rng::stream::PERTURBATION]);
        for trial in 0..100 {
            let col = trial % k;
            let e = linalg::unit(&DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal))) * radius;
            let probe = p.dictionary.column(col) + e;
            let (members, truth): (Vec<usize>, Vec<i8>) = by[col].iter().copied().unzip();
            assert_eq!(recover_signs(&probe, &p.samples, &members), truth, "trial {trial}");
        }
    }

    #[test]
    fn averaging_constant_and_cancelling_samples() {
        let dk = DVector::from_vec(vec![0.6, 0.8, 0.0]);
        let dm = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let same = SampleSet::new(DMatrix::from_columns(&[dk.clone(), dk.clone(), dk.clone()]));
        let supp = SupportEstimate::from_samples(1, vec![vec![0]; 3]).unwrap();
        let probe = DictionaryEstimate::full(DMatrix::from_columns(&[dk.clone()]));
        let avg = average(&same, &supp, &probe).unwrap();
        assert!((avg.column(0).unwrap() - &dk).norm() < 1e-15);

        let pair = SampleSet::new(DMatrix::from_columns(&[&dk + &dm, &dk - &dm]));
        let supp = SupportEstimate::from_samples(1, vec![vec![0], vec![0]]).unwrap();
        let avg = average(&pair, &supp, &probe).unwrap();
        assert!((avg.column(0).unwrap() - &dk).norm() < 1e-15);
    }

    #[test]
    fn averaging_flips_with_probe() {
        let p = Problem::generate(&ProblemConfig::new(32, 64, 3, 3000, 6).unwrap()).unwrap();
        let supp = SupportEstimate::exact(&p.coefficients);
        let pos = DictionaryEstimate::full(p.dictionary.matrix().clone());
        let neg = DictionaryEstimate::full(-p.dictionary.matrix());
        let a = average(&p.samples, &supp, &pos).unwrap();
        let b = average(&p.samples, &supp, &neg).unwrap();
        for k in 0..64 {
            let (x, y) = (a.column(k).unwrap(), b.column(k).unwrap());
            assert!((&x + &y).norm().min((&x - &y).norm()) < 1e-12);
        }
    }

    #[test]
    fn true_average_equals_average_with_exact_inputs() {
        let p = Problem::generate(&ProblemConfig::new(32, 64, 3, 3000, 7).unwrap()).unwrap();
        let supp = SupportEstimate::exact(&p.coefficients);
        let est = DictionaryEstimate::full(p.dictionary.matrix().clone());
        let a = average(&p.samples, &supp, &est).unwrap();
        let t = true_average(&p.samples, &p.coefficients).unwrap();
        assert!((a.matrix() - t.matrix()).amax() < 1e-12);
        assert_eq!(a.present(), t.present());
    }

    #[test]
    fn true_average_recovers_single_term_samples() {
        let cfg = ProblemConfig::new(8, 12, 1, 600, 3).unwrap();
        let p = Problem::generate(&cfg).unwrap();
        let t = true_average(&p.samples, &p.coefficients).unwrap();
        for k in t.present_indices() {
            assert!((t.column(k).unwrap() - p.dictionary.column(k)).norm() < 1e-12);
        }
    }

    #[test]
    fn average_error_halves_when_n_quadruples() {
        let err = |n: usize| {
            let mut total = 0.0;
            for seed in 0..3u64 {
                let p = Problem::generate(&ProblemConfig::new(64, 128, 4, n, 40 + seed).unwrap()).unwrap();
                let t = true_average(&p.samples, &p.coefficients).unwrap();
                total += (t.matrix() - p.dictionary.matrix()).column_iter().map(|c| c.norm()).sum::<f64>();
            }
            total
        };
        let ratio = err(80_000) / err(20_000);
        assert!((0.35..=0.65).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn synthesize_round_trip_feeds_average() {
        let d = Dictionary::new(DMatrix::identity(2, 2)).unwrap();
        let x = CoefficientMatrix::new(2, vec![vec![0], vec![1], vec![0]], vec![vec![-1], vec![1], vec![1]]).unwrap();
        let y = synthesize(&d, &x).unwrap();
        let t = true_average(&y, &x).unwrap();
        assert!((t.matrix() - d.matrix()).amax() < 1e-15);
    }
}
