//! Approximate subspace intersection and the SSDL driver.
//!
//! Consecutive disjoint blocks of `ℓ` recovered subspaces are folded with the
//! approximate intersection `A_τ`. A block whose fold collapses to a line
//! yields a candidate dictionary column; near-duplicate candidates (large
//! absolute inner product with an earlier one) are dropped.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::SampleSet;
use crate::spectral::{Subspace, SubspaceRecovery};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.8;
const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectConfig {
    /// Subspaces per block.
    pub ell: usize,
    /// Number of leading samples whose subspaces are recovered.
    pub j: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_dedup")]
    pub dedup_threshold: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

fn default_dedup() -> f64 {
    DEFAULT_DEDUP_THRESHOLD
}

fn default_alpha() -> f64 {
    1.0
}

impl IntersectConfig {
    /// Block size and sample budget from the coverage bound:
    /// `ℓ = ⌈log 2K / log(K/s)⌉`, `J = ⌈4K(α+1)ℓ log K⌉` rounded up to a multiple of `ℓ`.
    pub fn for_problem(k: usize, s: usize, alpha: f64) -> Result<Self> {
        let ell = choose_ell(k, s)?;
        let cfg = IntersectConfig {
            ell,
            j: coverage_budget(k, ell, alpha),
            tau: DEFAULT_TAU,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            alpha,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ell == 0 {
            return Err(Error::config("ell must be at least 1"));
        }
        if self.j == 0 {
            return Err(Error::config("J must be positive"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("tau = {} must lie in (0, 1)", self.tau)));
        }
        if !(self.dedup_threshold > 0.0 && self.dedup_threshold < 1.0) {
            return Err(Error::config(format!(
                "dedup_threshold = {} must lie in (0, 1)",
                self.dedup_threshold
            )));
        }
        if !(self.alpha >= 1.0) {
            return Err(Error::config(format!("alpha = {} must be at least 1", self.alpha)));
        }
        Ok(())
    }

    /// `J` rounded up to a whole number of blocks.
    pub fn samples_used(&self) -> usize {
        self.j.div_ceil(self.ell) * self.ell
    }

    pub fn blocks(&self) -> usize {
        self.j.div_ceil(self.ell)
    }
}

/// Smallest `ℓ` with `(K/s)^ℓ ≥ 2K`, i.e. `⌈log(2K) / log(K/s)⌉`, evaluated exactly.
pub fn choose_ell(k: usize, s: usize) -> Result<usize> {
    if s == 0 || s >= k {
        return Err(Error::config(format!("need 1 <= s < k, got s = {s}, k = {k}")));
    }
    // (K/s)^ℓ ≥ 2K  ⇔  K^ℓ ≥ 2K s^ℓ, compared in integers while they fit.
    let (kk, ss) = (k as u128, s as u128);
    let (mut lhs, mut rhs) = (1u128, 2 * kk);
    for ell in 1..=128usize {
        match (lhs.checked_mul(kk), rhs.checked_mul(ss)) {
            (Some(l), Some(r)) => {
                lhs = l;
                rhs = r;
                if lhs >= rhs {
                    return Ok(ell);
                }
            }
            _ => {
                let exact = (2.0 * k as f64).ln() / (k as f64 / s as f64).ln();
                return Ok(exact.ceil().max(ell as f64) as usize);
            }
        }
    }
    Err(Error::Numerical(format!("no block size below 128 for k = {k}, s = {s}")))
}

/// `⌈4K(α+1)ℓ ln K⌉` rounded up to a multiple of `ℓ`.
pub fn coverage_budget(k: usize, ell: usize, alpha: f64) -> usize {
    let raw = (4.0 * k as f64 * (alpha + 1.0) * ell as f64 * (k as f64).ln()).ceil() as usize;
    raw.max(ell).div_ceil(ell) * ell
}

/// `A_τ(S_a, S_b)`: the part of `S_a` within angle `arcsin τ` of `S_b`.
///
/// Right singular vectors of `P = (I − F_b F_bᵀ) F_a` with singular value `≤ τ`,
/// mapped back through `F_a`. `None` when no singular value qualifies.
pub fn approx_intersection(a: &Subspace, b: &Subspace, tau: f64) -> Result<Option<Subspace>> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(Error::Dimension {
            context: "approximate intersection",
            expected: a.ambient_dim(),
            found: b.ambient_dim(),
        });
    }
    let fa = a.basis();
    let fb = b.basis();
    let p = fa - fb * (fb.transpose() * fa);
    let svd = p.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not return right singular vectors".into()))?;
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &sv)| sv <= tau)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let v = v_t.select_rows(&keep).transpose();
    Ok(Some(Subspace::from_basis_unchecked(fa * v)))
}

/// Fold approximate intersections left to right until one line remains.
///
/// Returns the unit vector spanning the line (largest-magnitude entry
/// positive), or `None` if the fold empties or the list ends while the
/// running intersection still has dimension two or more. The result depends on
/// the order of `subspaces`.
pub fn l_fold_intersect(subspaces: &[Subspace], tau: f64) -> Result<Option<DVector<f64>>> {
    let Some((first, rest)) = subspaces.split_first() else {
        return Err(Error::config("cannot intersect an empty list of subspaces"));
    };
    let mut current = first.clone();
    for next in rest {
        match approx_intersection(&current, next, tau)? {
            None => return Ok(None),
            Some(a) if a.dim() == 1 => {
                let mut v = linalg::unit(&a.basis().column(0).into_owned());
                linalg::fix_sign(v.as_mut_slice());
                return Ok(Some(v));
            }
            Some(a) => current = a,
        }
    }
    Ok(None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub vector: DVector<f64>,
    /// Index of the producing block.
    pub block: usize,
}

/// What one block returned, before deduplication.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutcome {
    pub block: usize,
    pub vector: Option<DVector<f64>>,
    /// Kept after deduplication.
    pub accepted: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    /// Blocks that returned no vector.
    pub rejected_blocks: usize,
    /// Vectors dropped as duplicates.
    pub duplicates: usize,
    pub outcomes: Vec<BlockOutcome>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Candidate vectors as the columns of an `M × K̂` matrix.
    pub fn matrix(&self, m: usize) -> nalgebra::DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self.candidates.iter().map(|c| c.vector.clone()).collect();
        if cols.is_empty() {
            nalgebra::DMatrix::zeros(m, 0)
        } else {
            nalgebra::DMatrix::from_columns(&cols)
        }
    }
}

/// Keep a vector unless an earlier kept one has `|⟨u, v⟩| ≥ threshold`.
pub fn dedup(vectors: &[DVector<f64>], threshold: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (i, v) in vectors.iter().enumerate() {
        if kept.iter().all(|&j| vectors[j].dot(v).abs() < threshold) {
            kept.push(i);
        }
    }
    kept
}

/// Intersect consecutive disjoint blocks of precomputed subspaces.
pub fn intersect_blocks(subspaces: &[Subspace], cfg: &IntersectConfig) -> Result<CandidateSet> {
    cfg.validate()?;
    let mut set = CandidateSet::default();
    for (block, chunk) in subspaces.chunks(cfg.ell).enumerate() {
        let vector = l_fold_intersect(chunk, cfg.tau)?;
        let mut accepted = false;
        match &vector {
            None => set.rejected_blocks += 1,
            Some(v) => {
                debug_assert!((v.norm() - 1.0).abs() < UNIT_TOLERANCE);
                let duplicate = set
                    .candidates
                    .iter()
                    .any(|c| c.vector.dot(v).abs() >= cfg.dedup_threshold);
                if duplicate {
                    set.duplicates += 1;
                } else {
                    accepted = true;
                    set.candidates.push(Candidate {
                        vector: v.clone(),
                        block,
                    });
                }
            }
        }
        set.outcomes.push(BlockOutcome {
            block,
            vector,
            accepted,
        });
    }
    Ok(set)
}

/// Subspace recovery on the first `J` samples followed by block intersection.
pub fn ssdl(samples: &SampleSet, s: usize, cfg: &IntersectConfig, jobs: usize) -> Result<CandidateSet> {
    cfg.validate()?;
    let used = cfg.samples_used();
    if used > samples.n() {
        return Err(Error::config(format!(
            "J = {used} (rounded to whole blocks) exceeds n = {}",
            samples.n()
        )));
    }
    let recovery = SubspaceRecovery::new(samples, s)?;
    let subspaces = recovery.recover_range(0..used, jobs)?;
    intersect_blocks(&subspaces, cfg)
}

/// Which elements some disjoint block isolates as its unique common support element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coverage {
    pub all_covered: bool,
    /// For each element, the first block whose supports intersect in exactly that element.
    pub witness: Vec<Option<usize>>,
}

/// Combinatorial coverage of consecutive blocks of `ell` supports among the first `j`.
pub fn blocks_cover_all(supports: &[Vec<usize>], ell: usize, j: usize, k: usize) -> Result<Coverage> {
    if ell == 0 {
        return Err(Error::config("ell must be at least 1"));
    }
    let usable = j.min(supports.len());
    let mut witness = vec![None; k];
    let mut mark = vec![0usize; k];
    for (block, chunk) in supports[..usable].chunks(ell).enumerate() {
        if chunk.len() < ell {
            break;
        }
        for sup in chunk {
            for &x in sup {
                if x < k {
                    mark[x] += 1;
                }
            }
        }
        let common: Vec<usize> = chunk[0].iter().copied().filter(|&x| x < k && mark[x] == ell).collect();
        if let [only] = common[..] {
            witness[only].get_or_insert(block);
        }
        for sup in chunk {
            for &x in sup {
                if x < k {
                    mark[x] = 0;
                }
            }
        }
    }
    Ok(Coverage {
        all_covered: witness.iter().all(Option::is_some),
        witness,
    })
}
