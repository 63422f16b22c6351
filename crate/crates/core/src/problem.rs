//! Synthetic sparse-coding instances `Y = D X` and dictionary diagnostics.
//!
//! Dictionaries have i.i.d. columns uniform on the unit sphere (normalized
//! standard-normal vectors). Coefficient columns have a uniformly random
//! `s`-element support and independent ±1 values. All indices are 0-based.

use std::collections::BTreeSet;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, stream};

/// Tolerance on column norms of a [`Dictionary`].
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Force dictionary element `index` into the supports of both `samples`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapSeed {
    pub index: usize,
    pub samples: [usize; 2],
}

/// Generator inputs for a synthetic instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProblemConfig")]
pub struct ProblemConfig {
    /// Ambient dimension.
    pub m: usize,
    /// Dictionary size.
    pub k: usize,
    /// Nonzeros per sample.
    pub s: usize,
    /// Sample count.
    pub n: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overlap_seeding: Vec<OverlapSeed>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblemConfig {
    m: usize,
    k: usize,
    s: usize,
    n: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    overlap_seeding: Vec<OverlapSeed>,
}

impl TryFrom<RawProblemConfig> for ProblemConfig {
    type Error = Error;

    fn try_from(raw: RawProblemConfig) -> Result<Self> {
        ProblemConfig::new(raw.m, raw.k, raw.s, raw.n, raw.seed)?.with_overlap_seeding(raw.overlap_seeding)
    }
}

impl ProblemConfig {
    pub fn new(m: usize, k: usize, s: usize, n: usize, seed: u64) -> Result<Self> {
        let cfg = ProblemConfig {
            m,
            k,
            s,
            n,
            seed,
            overlap_seeding: Vec::new(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_overlap_seeding(mut self, seeds: Vec<OverlapSeed>) -> Result<Self> {
        self.overlap_seeding = seeds;
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.m == 0 || self.n == 0 {
            return Err(Error::config("m, s and n must be positive"));
        }
        if self.k <= self.m {
            return Err(Error::config(format!(
                "dictionary must be overcomplete: k = {} <= m = {}",
                self.k, self.m
            )));
        }
        if self.s >= self.m {
            return Err(Error::config(format!(
                "sparsity must be below the dimension: s = {} >= m = {}",
                self.s, self.m
            )));
        }
        let mut forced: Vec<BTreeSet<usize>> = Vec::new();
        for seed in &self.overlap_seeding {
            if seed.index >= self.k {
                return Err(Error::config(format!(
                    "overlap seeding references dictionary index {} but k = {}",
                    seed.index, self.k
                )));
            }
            for &i in &seed.samples {
                if i >= self.n {
                    return Err(Error::config(format!(
                        "overlap seeding references sample {i} but n = {}",
                        self.n
                    )));
                }
                if forced.len() <= i {
                    forced.resize(i + 1, BTreeSet::new());
                }
                forced[i].insert(seed.index);
                if forced[i].len() > self.s {
                    return Err(Error::config(format!(
                        "overlap seeding forces more than s = {} indices into sample {i}",
                        self.s
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether `K / M^{3/2} <= sqrt(K / M)`, i.e. `K <= M²`.
    pub fn side_condition_holds(&self) -> bool {
        side_condition(self.m, self.k)
    }

    /// Dictionary indices forced into each sample, in seeding order.
    fn forced_indices(&self) -> Vec<Vec<usize>> {
        let mut forced: Vec<Vec<usize>> = vec![Vec::new(); self.n];
        for seed in &self.overlap_seeding {
            for &i in &seed.samples {
                if !forced[i].contains(&seed.index) {
                    forced[i].push(seed.index);
                }
            }
        }
        forced
    }
}

fn side_condition(m: usize, k: usize) -> bool {
    (k as f64) <= (m as f64) * (m as f64)
}

/// An `M × K` matrix with unit-norm columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Dictionary(DMatrix<f64>);

impl Dictionary {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        for (k, col) in entries.column_iter().enumerate() {
            let norm = col.norm();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::config(format!(
                    "dictionary column {k} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(Dictionary(entries))
    }

    /// Normalize every column. Zero columns are rejected.
    pub fn normalized(mut entries: DMatrix<f64>) -> Result<Self> {
        for (k, mut col) in entries.column_iter_mut().enumerate() {
            let norm = col.norm();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::config(format!("dictionary column {k} cannot be normalized")));
            }
            col /= norm;
        }
        Ok(Dictionary(entries))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn m(&self) -> usize {
        self.0.nrows()
    }

    pub fn k(&self) -> usize {
        self.0.ncols()
    }

    pub fn column(&self, k: usize) -> DVector<f64> {
        self.0.column(k).into_owned()
    }
}

/// Column-sparse `K × N` coefficients with exactly `s` entries of ±1 per column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoefficientMatrix {
    k: usize,
    s: usize,
    supports: Vec<Vec<usize>>,
    values: Vec<Vec<i8>>,
}

impl CoefficientMatrix {
    /// Supports are sorted on construction; `values[i][t]` goes with `supports[i][t]`.
    pub fn new(k: usize, supports: Vec<Vec<usize>>, values: Vec<Vec<i8>>) -> Result<Self> {
        if supports.len() != values.len() {
            return Err(Error::Dimension {
                context: "coefficient supports vs values",
                expected: supports.len(),
                found: values.len(),
            });
        }
        let s = supports.first().map_or(0, Vec::len);
        let mut out_supports = Vec::with_capacity(supports.len());
        let mut out_values = Vec::with_capacity(values.len());
        for (i, (sup, val)) in supports.into_iter().zip(values).enumerate() {
            if sup.len() != s || val.len() != s {
                return Err(Error::config(format!(
                    "sample {i} has {} support entries and {} values, expected {s}",
                    sup.len(),
                    val.len()
                )));
            }
            let mut pairs: Vec<(usize, i8)> = sup.into_iter().zip(val).collect();
            pairs.sort_unstable_by_key(|p| p.0);
            for w in pairs.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::config(format!("sample {i} repeats index {}", w[0].0)));
                }
            }
            for &(idx, v) in &pairs {
                if idx >= k {
                    return Err(Error::config(format!("sample {i} uses index {idx} >= k = {k}")));
                }
                if v != 1 && v != -1 {
                    return Err(Error::config(format!("sample {i} has coefficient {v}, expected ±1")));
                }
            }
            let (sup, val) = pairs.into_iter().unzip();
            out_supports.push(sup);
            out_values.push(val);
        }
        Ok(CoefficientMatrix {
            k,
            s,
            supports: out_supports,
            values: out_values,
        })
    }

    /// Read a dense `K × N` matrix whose entries are 0 or ±1.
    pub fn from_dense(dense: &DMatrix<f64>) -> Result<Self> {
        let mut supports = Vec::with_capacity(dense.ncols());
        let mut values = Vec::with_capacity(dense.ncols());
        for (i, col) in dense.column_iter().enumerate() {
            let mut sup = Vec::new();
            let mut val = Vec::new();
            for (k, &x) in col.iter().enumerate() {
                if x == 1.0 || x == -1.0 {
                    sup.push(k);
                    val.push(x as i8);
                } else if x != 0.0 {
                    return Err(Error::config(format!(
                        "coefficient ({k}, {i}) = {x}; entries must be 0 or ±1"
                    )));
                }
            }
            supports.push(sup);
            values.push(val);
        }
        Self::new(dense.nrows(), supports, values)
    }

    /// Restrict to the first `n` samples.
    pub fn truncated(&self, n: usize) -> CoefficientMatrix {
        let n = n.min(self.n());
        CoefficientMatrix {
            k: self.k,
            s: self.s,
            supports: self.supports[..n].to_vec(),
            values: self.values[..n].to_vec(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.k, self.n());
        for (i, (sup, val)) in self.supports.iter().zip(&self.values).enumerate() {
            for (&k, &v) in sup.iter().zip(val) {
                out[(k, i)] = f64::from(v);
            }
        }
        out
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn n(&self) -> usize {
        self.supports.len()
    }

    pub fn support(&self, i: usize) -> &[usize] {
        &self.supports[i]
    }

    pub fn values(&self, i: usize) -> &[i8] {
        &self.values[i]
    }

    pub fn supports(&self) -> &[Vec<usize>] {
        &self.supports
    }

    /// Coefficient of element `k` in sample `i` (0 when off-support).
    pub fn value(&self, k: usize, i: usize) -> i8 {
        self.supports[i]
            .binary_search(&k)
            .map_or(0, |t| self.values[i][t])
    }

    /// For each element, the samples using it and the coefficient sign.
    pub fn by_element(&self) -> Vec<Vec<(usize, i8)>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, (sup, val)) in self.supports.iter().zip(&self.values).enumerate() {
            for (&k, &v) in sup.iter().zip(val) {
                out[k].push((i, v));
            }
        }
        out
    }
}

/// The `M × N` sample matrix `Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    samples: DMatrix<f64>,
    /// The generating configuration, when the samples are synthetic.
    pub origin: Option<ProblemConfig>,
}

impl SampleSet {
    pub fn new(samples: DMatrix<f64>) -> Self {
        SampleSet {
            samples,
            origin: None,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn m(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n(&self) -> usize {
        self.samples.ncols()
    }

    pub fn column(&self, i: usize) -> DVector<f64> {
        self.samples.column(i).into_owned()
    }

    /// Restrict to the first `n` samples.
    pub fn truncated(&self, n: usize) -> SampleSet {
        SampleSet {
            samples: self.samples.columns(0, n.min(self.n())).into_owned(),
            origin: self.origin.clone(),
        }
    }
}

/// A full synthetic instance.
#[derive(Clone, Debug)]
pub struct Problem {
    pub config: ProblemConfig,
    pub dictionary: Dictionary,
    pub coefficients: CoefficientMatrix,
    pub samples: SampleSet,
}

impl Problem {
    pub fn generate(cfg: &ProblemConfig) -> Result<Problem> {
        let dictionary = gen_dictionary(cfg)?;
        let coefficients = gen_coefficients(cfg)?;
        let mut samples = synthesize(&dictionary, &coefficients)?;
        samples.origin = Some(cfg.clone());
        Ok(Problem {
            config: cfg.clone(),
            dictionary,
            coefficients,
            samples,
        })
    }
}

/// Random dictionary with columns uniform on the unit sphere.
pub fn gen_dictionary(cfg: &ProblemConfig) -> Result<Dictionary> {
    cfg.validate()?;
    if !cfg.side_condition_holds() {
        warn!(
            "k = {} exceeds m² = {}; the good-dictionary side condition fails",
            cfg.k,
            cfg.m * cfg.m
        );
    }
    let mut rng = rng::stream_rng(cfg.seed, &[stream::DICTIONARY]);
    Ok(random_dictionary(cfg.m, cfg.k, &mut rng))
}

pub(crate) fn random_dictionary(m: usize, k: usize, rng: &mut ChaCha8Rng) -> Dictionary {
    let mut entries = DMatrix::zeros(m, k);
    for mut col in entries.column_iter_mut() {
        loop {
            col.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
                break;
            }
        }
    }
    Dictionary(entries)
}

/// Partial Fisher–Yates over a persistent permutation of `0..k`.
///
/// Positions `0..forced.len()` receive the forced indices, the remaining
/// `count - forced.len()` positions are drawn uniformly from the rest.
pub(crate) struct SubsetSampler {
    pool: Vec<usize>,
    position: Vec<usize>,
}

impl SubsetSampler {
    pub(crate) fn new(k: usize) -> Self {
        SubsetSampler {
            pool: (0..k).collect(),
            position: (0..k).collect(),
        }
    }

    fn swap(&mut self, a: usize, b: usize) {
        self.pool.swap(a, b);
        self.position[self.pool[a]] = a;
        self.position[self.pool[b]] = b;
    }

    pub(crate) fn draw(&mut self, count: usize, forced: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
        let k = self.pool.len();
        debug_assert!(count <= k && forced.len() <= count);
        for (t, &f) in forced.iter().enumerate() {
            let p = self.position[f];
            self.swap(t, p);
        }
        for t in forced.len()..count {
            let r = rng.gen_range(t..k);
            self.swap(t, r);
        }
        let mut out = self.pool[..count].to_vec();
        out.sort_unstable();
        out
    }
}

/// Uniform `s`-subsets with independent equiprobable ±1 values.
pub fn gen_coefficients(cfg: &ProblemConfig) -> Result<CoefficientMatrix> {
    cfg.validate()?;
    let mut rng = rng::stream_rng(cfg.seed, &[stream::COEFFICIENTS]);
    let forced = cfg.forced_indices();
    let mut sampler = SubsetSampler::new(cfg.k);
    let mut supports = Vec::with_capacity(cfg.n);
    let mut values = Vec::with_capacity(cfg.n);
    for f in &forced {
        let sup = sampler.draw(cfg.s, f, &mut rng);
        let val: Vec<i8> = (0..cfg.s).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        supports.push(sup);
        values.push(val);
    }
    CoefficientMatrix::new(cfg.k, supports, values)
}

/// `y_i = Σ_{k∈Ω_i} x_{ik} d_k`.
pub fn synthesize(dictionary: &Dictionary, coefficients: &CoefficientMatrix) -> Result<SampleSet> {
    if dictionary.k() != coefficients.k() {
        return Err(Error::Dimension {
            context: "dictionary columns vs coefficient rows",
            expected: dictionary.k(),
            found: coefficients.k(),
        });
    }
    let d = dictionary.matrix();
    let mut y = DMatrix::zeros(dictionary.m(), coefficients.n());
    for (i, mut col) in y.column_iter_mut().enumerate() {
        for (&k, &v) in coefficients.support(i).iter().zip(coefficients.values(i)) {
            col.axpy(f64::from(v), &d.column(k), 1.0);
        }
    }
    Ok(SampleSet::new(y))
}

/// Per-criterion outcome of the good-dictionary check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoodCriteria {
    /// ‖DDᵀ − (K/M)I‖₂ ≤ B√K/√M
    pub frame: bool,
    /// max |⟨d_k, d_m⟩| ≤ B log M / √M
    pub coherence: bool,
    /// δ_2s ≤ B√s log M / √M < 1/8
    pub rip: bool,
}

impl GoodCriteria {
    pub fn all(&self) -> bool {
        self.frame && self.coherence && self.rip
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodReport {
    pub ddt_deviation: f64,
    pub coherence: f64,
    /// Lower bound on δ_2s from sampled supports.
    pub rip_estimate: f64,
    pub rip_trials: usize,
    pub constant: f64,
    pub passes: GoodCriteria,
    /// `K <= M²`; reported, never enforced.
    pub side_condition: bool,
}

/// Max eigenvalue deviation of `D_Tᵀ D_T` from 1 over the given support.
pub(crate) fn restricted_deviation(d: &DMatrix<f64>, support: &[usize]) -> f64 {
    let sub = d.select_columns(support);
    let gram = sub.transpose() * &sub;
    let eig = linalg::sym_eigenvalues_desc(&gram);
    let hi = eig.first().copied().unwrap_or(1.0);
    let lo = eig.last().copied().unwrap_or(1.0);
    (hi - 1.0).abs().max((lo - 1.0).abs())
}

pub fn diagnose_dictionary(
    dictionary: &Dictionary,
    s: usize,
    constant: f64,
    rip_trials: usize,
    seed: u64,
) -> Result<GoodReport> {
    let (m, k) = (dictionary.m(), dictionary.k());
    if rip_trials == 0 {
        return Err(Error::config("rip_trials must be positive"));
    }
    if s == 0 || s >= m {
        return Err(Error::config(format!("need 0 < s < m, got s = {s}, m = {m}")));
    }
    let d = dictionary.matrix();

    let mut frame = d * d.transpose();
    let ratio = k as f64 / m as f64;
    for i in 0..m {
        frame[(i, i)] -= ratio;
    }
    let ddt_deviation = linalg::sym_spectral_norm(&frame);

    let gram = d.transpose() * d;
    let mut coherence = 0.0f64;
    for a in 0..k {
        for b in (a + 1)..k {
            coherence = coherence.max(gram[(a, b)].abs());
        }
    }

    let width = (2 * s).min(k);
    let mut rng = rng::stream_rng(seed, &[stream::RIP_TRIALS]);
    let mut sampler = SubsetSampler::new(k);
    let mut rip_estimate = 0.0f64;
    for _ in 0..rip_trials {
        let support = sampler.draw(width, &[], &mut rng);
        rip_estimate = rip_estimate.max(restricted_deviation(d, &support));
    }

    let (mf, kf, sf) = (m as f64, k as f64, s as f64);
    let log_m = mf.ln();
    let passes = GoodCriteria {
        frame: ddt_deviation <= constant * kf.sqrt() / mf.sqrt(),
        coherence: coherence <= constant * log_m / mf.sqrt(),
        rip: rip_estimate <= constant * sf.sqrt() * log_m / mf.sqrt() && rip_estimate < 0.125,
    };
    let side = side_condition(m, k);
    if !side {
        warn!("k = {k} exceeds m² = {}; the good-dictionary side condition fails", m * m);
    }
    Ok(GoodReport {
        ddt_deviation,
        coherence,
        rip_estimate,
        rip_trials,
        constant,
        passes,
        side_condition: side,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(m: usize, k: usize, s: usize, n: usize, seed: u64) -> ProblemConfig {
        ProblemConfig::new(m, k, s, n, seed).unwrap()
    }

    #[test]
    fn config_rejects_bad_shapes() {
        assert!(ProblemConfig::new(8, 8, 2, 10, 0).is_err());
        assert!(ProblemConfig::new(8, 6, 2, 10, 0).is_err());
        assert!(ProblemConfig::new(8, 16, 8, 10, 0).is_err());
        assert!(ProblemConfig::new(8, 16, 0, 10, 0).is_err());
        assert!(ProblemConfig::new(8, 16, 2, 0, 0).is_err());
        assert!(ProblemConfig::new(8, 16, 2, 10, 0).is_ok());
    }

    #[test]
    fn config_rejects_out_of_range_seeding() {
        let base = cfg(8, 16, 2, 5, 1);
        let bad_sample = OverlapSeed { index: 0, samples: [0, 5] };
        let bad_index = OverlapSeed { index: 16, samples: [0, 1] };
        assert!(base.clone().with_overlap_seeding(vec![bad_sample]).is_err());
        assert!(base.clone().with_overlap_seeding(vec![bad_index]).is_err());
        let too_many = vec![
            OverlapSeed { index: 0, samples: [0, 1] },
            OverlapSeed { index: 1, samples: [0, 2] },
            OverlapSeed { index: 2, samples: [0, 3] },
        ];
        assert!(base.with_overlap_seeding(too_many).is_err());
    }

    #[test]
    fn config_json_round_trip_validates() {
        let c = cfg(8, 16, 2, 5, 9)
            .with_overlap_seeding(vec![OverlapSeed { index: 3, samples: [0, 1] }])
            .unwrap();
        let text = serde_json::to_string(&c).unwrap();
        let back: ProblemConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<ProblemConfig>(r#"{"m":4,"k":4,"s":1,"n":1}"#).is_err());
    }

    #[test]
    fn dictionary_columns_are_unit() {
        let d = gen_dictionary(&cfg(4, 8, 1, 1, 7)).unwrap();
        assert_eq!((d.m(), d.k()), (4, 8));
        for col in d.matrix().column_iter() {
            assert!((col.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let c = cfg(6, 12, 2, 40, 7);
        let a = Problem::generate(&c).unwrap();
        let b = Problem::generate(&c).unwrap();
        assert_eq!(a.dictionary, b.dictionary);
        assert_eq!(a.coefficients, b.coefficients);
        assert_eq!(a.samples, b.samples);
        let other = Problem::generate(&c.clone().with_seed(8)).unwrap();
        assert_ne!(a.dictionary, other.dictionary);
    }

    #[test]
    fn supports_have_exact_cardinality() {
        let x = gen_coefficients(&cfg(4, 8, 3, 5, 1)).unwrap();
        for i in 0..x.n() {
            let sup = x.support(i);
            assert_eq!(sup.len(), 3);
            assert!(sup.windows(2).all(|w| w[0] < w[1]));
            assert!(x.values(i).iter().all(|&v| v == 1 || v == -1));
        }
    }

    #[test]
    fn overlap_seeding_forces_shared_index() {
        let c = cfg(6, 12, 3, 10, 4)
            .with_overlap_seeding(vec![
                OverlapSeed { index: 0, samples: [0, 1] },
                OverlapSeed { index: 7, samples: [2, 3] },
            ])
            .unwrap();
        let x = gen_coefficients(&c).unwrap();
        assert!(x.support(0).contains(&0) && x.support(1).contains(&0));
        assert!(x.support(2).contains(&7) && x.support(3).contains(&7));
        assert!((0..x.n()).all(|i| x.support(i).len() == 3));
    }

    #[test]
    fn inclusion_frequency_matches_uniform_law() {
        let x = gen_coefficients(&cfg(20, 100, 10, 10_000, 3)).unwrap();
        let mut counts = vec![0usize; 100];
        for i in 0..x.n() {
            for &k in x.support(i) {
                counts[k] += 1;
            }
        }
        for c in counts {
            let p = c as f64 / 10_000.0;
            assert!((p - 0.1).abs() <= 0.01, "inclusion frequency {p}");
        }
    }

    #[test]
    fn synthesize_single_terms() {
        let d = gen_dictionary(&cfg(4, 8, 1, 1, 2)).unwrap();
        let x = CoefficientMatrix::new(8, vec![vec![5], vec![2]], vec![vec![1], vec![-1]]).unwrap();
        let y = synthesize(&d, &x).unwrap();
        assert_eq!(y.column(0), d.column(5));
        assert_eq!(y.column(1), -d.column(2));
    }

    #[test]
    fn synthesize_rejects_mismatch() {
        let d = gen_dictionary(&cfg(4, 8, 1, 1, 2)).unwrap();
        let x = CoefficientMatrix::new(9, vec![vec![5]], vec![vec![1]]).unwrap();
        assert!(matches!(synthesize(&d, &x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dense_round_trip_and_validation() {
        let x = gen_coefficients(&cfg(6, 12, 2, 7, 5)).unwrap();
        assert_eq!(CoefficientMatrix::from_dense(&x.to_dense()).unwrap(), x);
        let mut bad = x.to_dense();
        bad[(0, 0)] = 0.5;
        assert!(CoefficientMatrix::from_dense(&bad).is_err());
    }

    #[test]
    fn identity_dictionary_is_perfect() {
        let d = Dictionary::new(DMatrix::identity(6, 6)).unwrap();
        let r = diagnose_dictionary(&d, 2, 1.0, 50, 0).unwrap();
        assert_eq!(r.ddt_deviation, 0.0);
        assert_eq!(r.coherence, 0.0);
        assert!(r.rip_estimate < 1e-12);
    }

    #[test]
    fn duplicate_columns_have_unit_coherence() {
        let mut m = gen_dictionary(&cfg(5, 10, 1, 1, 3)).unwrap().into_matrix();
        let c0 = m.column(0).into_owned();
        m.set_column(4, &c0);
        let d = Dictionary::new(m).unwrap();
        let r = diagnose_dictionary(&d, 1, 1.0, 10, 0).unwrap();
        assert!((r.coherence - 1.0).abs() < 1e-12);
        assert!(diagnose_dictionary(&d, 1, 1.0, 0, 0).is_err());
    }

    #[test]
    fn rip_estimate_equals_exhaustive_search_on_small_instance() {
        let d = gen_dictionary(&cfg(8, 12, 2, 1, 21)).unwrap();
        // Independent oracle: every 4-subset of 12 columns.
        let mut exhaustive = 0.0f64;
        for a in 0..12 {
            for b in a + 1..12 {
                for c in b + 1..12 {
                    for e in c + 1..12 {
                        let sub = d.matrix().select_columns(&[a, b, c, e]);
                        let g = sub.transpose() * &sub;
                        let ev = g.symmetric_eigenvalues();
                        let hi = ev.max();
                        let lo = ev.min();
                        exhaustive = exhaustive.max((hi - 1.0).abs().max((lo - 1.0).abs()));
                    }
                }
            }
        }
        let r = diagnose_dictionary(&d, 2, 1.0, 20_000, 5).unwrap();
        assert!((r.rip_estimate - exhaustive).abs() < 1e-12, "{} vs {exhaustive}", r.rip_estimate);
    }

    #[test]
    fn rip_estimate_monotone_in_trials() {
        let d = gen_dictionary(&cfg(16, 32, 3, 1, 2)).unwrap();
        let mut last = 0.0;
        for trials in [1, 5, 20, 100] {
            let r = diagnose_dictionary(&d, 3, 1.0, trials, 9).unwrap();
            assert!(r.rip_estimate >= last);
            last = r.rip_estimate;
        }
    }

    #[test]
    fn frame_deviation_scales_like_sqrt_ratio() {
        // Monte-Carlo calibration of the frame constant over 50 seeds.
        let mut worst = 0.0f64;
        for seed in 0..50 {
            let d = gen_dictionary(&cfg(200, 400, 2, 1, seed)).unwrap();
            let r = diagnose_dictionary(&d, 2, 1.0, 1, seed).unwrap();
            worst = worst.max(r.ddt_deviation / (400.0f64 / 200.0).sqrt());
        }
        // Marchenko–Pastur edge: (1 + sqrt(M/K))² K/M − K/M = 2√(K/M) + 1, so B ≈ 2 + 1/√2.
        assert!(worst > 1.5 && worst < 3.5, "empirical frame constant {worst}");
    }
}
