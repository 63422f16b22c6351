//! Recovery metrics: column matching, angular accuracy, false recoveries and
//! support/sign accuracy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::oracle::{DictionaryEstimate, SupportEstimate};
use crate::problem::{CoefficientMatrix, Dictionary};

/// Minimum-cost assignment on a dense `rows × cols` cost matrix.
///
/// Every row is assigned when `rows ≤ cols`, every column otherwise.
/// Returns for each row the assigned column, if any.
pub fn assign(cost: &DMatrix<f64>) -> Vec<Option<usize>> {
    let (rows, cols) = cost.shape();
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let by_col = hungarian(&cost.transpose());
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            out[r] = Some(c);
        }
        return out;
    }
    hungarian(cost).into_iter().map(Some).collect()
}

/// Shortest augmenting path Hungarian method with potentials; requires `rows ≤ cols`.
fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = cost.shape();
    debug_assert!(n <= m);
    // 1-based with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    #[default]
    Exact,
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    /// Ground-truth column `k`.
    pub truth: usize,
    /// Estimated column `π(k)`.
    pub estimate: usize,
    /// `θ_k`.
    pub sign: i8,
    /// `‖d_k − θ_k d̂_{π(k)}‖₂` against the raw estimate column.
    pub error: f64,
    /// `|⟨d_k, d̂_{π(k)}⟩|` with the estimate normalized.
    pub angular: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_truth: Vec<usize>,
    pub surplus_estimates: Vec<usize>,
}

impl Matching {
    pub fn total_cost(&self) -> f64 {
        self.pairs.iter().map(|p| p.error * p.error).sum()
    }

    pub fn max_error(&self) -> Option<f64> {
        self.pairs.iter().map(|p| p.error).reduce(f64::max)
    }

    pub fn mean_error(&self) -> Option<f64> {
        (!self.pairs.is_empty()).then(|| self.pairs.iter().map(|p| p.error).sum::<f64>() / self.pairs.len() as f64)
    }

    /// Pair for ground-truth column `k`.
    pub fn pair_for(&self, k: usize) -> Option<&MatchedPair> {
        self.pairs.iter().find(|p| p.truth == k)
    }

    /// Matched columns with error at most `eps`.
    pub fn within(&self, eps: f64) -> usize {
        self.pairs.iter().filter(|p| p.error <= eps).count()
    }

    /// The estimate reordered and re-signed to line up with the ground truth;
    /// unmatched truth columns are absent.
    pub fn relabel(&self, estimate: &DictionaryEstimate, k: usize) -> Result<DictionaryEstimate> {
        let mut columns = DMatrix::zeros(estimate.m(), k);
        let mut present = vec![false; k];
        for p in &self.pairs {
            let col = estimate
                .column(p.estimate)
                .ok_or_else(|| Error::config(format!("matched estimate column {} is absent", p.estimate)))?;
            columns.set_column(p.truth, &(col * f64::from(p.sign)));
            present[p.truth] = true;
        }
        DictionaryEstimate::new(columns, present)
    }
}

/// `min_t ‖d − t·e‖₂` over `t ∈ {−1, +1}` and the minimizing sign.
pub fn signed_distance(d: &DVector<f64>, e: &DVector<f64>) -> (f64, i8) {
    let plus = (d - e).norm();
    let minus = (d + e).norm();
    if minus < plus {
        (minus, -1)
    } else {
        (plus, 1)
    }
}

fn squared_cost(d: &DMatrix<f64>, e: &DMatrix<f64>) -> DMatrix<f64> {
    // ‖d − t e‖² = ‖d‖² + ‖e‖² − 2|⟨d, e⟩| at the optimal sign.
    let ip = d.transpose() * e;
    let dn: Vec<f64> = d.column_iter().map(|c| c.norm_squared()).collect();
    let en: Vec<f64> = e.column_iter().map(|c| c.norm_squared()).collect();
    DMatrix::from_fn(d.ncols(), e.ncols(), |i, j| (dn[i] + en[j] - 2.0 * ip[(i, j)].abs()).max(0.0))
}

fn greedy(cost: &DMatrix<f64>) -> Vec<Option<usize>> {
    let (rows, cols) = cost.shape();
    let mut order: Vec<(usize, usize)> = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).collect();
    order.sort_by(|a, b| cost[*a].total_cmp(&cost[*b]).then(a.cmp(b)));
    let mut row_used = vec![None; rows];
    let mut col_used = vec![false; cols];
    for (i, j) in order {
        if row_used[i].is_none() && !col_used[j] {
            row_used[i] = Some(j);
            col_used[j] = true;
        }
    }
    row_used
}

/// Align an estimate to ground truth by minimum total squared sign-optimal distance.
pub fn match_columns(truth: &Dictionary, estimate: &DictionaryEstimate, mode: MatchMode) -> Result<Matching> {
    if truth.m() != estimate.m() {
        return Err(Error::Dimension {
            context: "column matching",
            expected: truth.m(),
            found: estimate.m(),
        });
    }
    let present = estimate.present_indices();
    let est = estimate.matrix().select_columns(&present);
    let d = truth.matrix();
    let cost = squared_cost(d, &est);
    let rows = match mode {
        MatchMode::Exact => assign(&cost),
        MatchMode::Greedy => greedy(&cost),
    };
    let mut used = vec![false; present.len()];
    let mut pairs = Vec::new();
    let mut unmatched_truth = Vec::new();
    for (k, slot) in rows.into_iter().enumerate() {
        let Some(j) = slot else {
            unmatched_truth.push(k);
            continue;
        };
        used[j] = true;
        let dk = d.column(k).into_owned();
        let e = est.column(j).into_owned();
        let (error, sign) = signed_distance(&dk, &e);
        let angular = linalg::unit(&e).dot(&dk).abs();
        pairs.push(MatchedPair {
            truth: k,
            estimate: present[j],
            sign,
            error,
            angular,
        });
    }
    let surplus_estimates = (0..present.len()).filter(|&j| !used[j]).map(|j| present[j]).collect();
    Ok(Matching {
        pairs,
        unmatched_truth,
        surplus_estimates,
    })
}

/// Mean of `|⟨d̂_{π(k)}, d_k⟩|` over matched pairs.
pub fn angular_accuracy(matching: &Matching) -> Result<f64> {
    if matching.pairs.is_empty() {
        return Err(Error::Numerical("angular accuracy of an empty matching".into()));
    }
    Ok(matching.pairs.iter().map(|p| p.angular).sum::<f64>() / matching.pairs.len() as f64)
}

/// Whether a block's supports share exactly one element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "element")]
pub enum BlockTruth {
    /// The supports share nothing.
    Empty,
    Unique(usize),
    /// The supports share two or more elements.
    Multiple,
}

impl BlockTruth {
    pub fn of(supports: &[&[usize]]) -> Self {
        let Some((first, rest)) = supports.split_first() else {
            return BlockTruth::Multiple;
        };
        let common: Vec<usize> = first
            .iter()
            .copied()
            .filter(|x| rest.iter().all(|s| s.contains(x)))
            .collect();
        match common[..] {
            [] => BlockTruth::Empty,
            [only] => BlockTruth::Unique(only),
            _ => BlockTruth::Multiple,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub truth: BlockTruth,
    pub returned: bool,
}

impl BlockRecord {
    /// A block is wrong when it returns a vector without a unique shared
    /// element, or returns nothing despite one.
    pub fn is_false(&self) -> bool {
        match self.truth {
            BlockTruth::Unique(_) => !self.returned,
            BlockTruth::Empty | BlockTruth::Multiple => self.returned,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryLedger {
    pub blocks: Vec<BlockRecord>,
}

impl RecoveryLedger {
    pub fn push(&mut self, truth: BlockTruth, returned: bool) {
        self.blocks.push(BlockRecord { truth, returned });
    }

    pub fn false_recoveries(&self) -> usize {
        self.blocks.iter().filter(|b| b.is_false()).count()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

pub fn false_recovery_rate(ledger: &RecoveryLedger) -> Result<f64> {
    if ledger.is_empty() {
        return Err(Error::config("false recovery rate of an empty ledger"));
    }
    Ok(ledger.false_recoveries() as f64 / ledger.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSignReport {
    pub precision: f64,
    pub recall: f64,
    /// Set when no index was estimated at all, so precision is reported as 1.
    pub precision_undefined: bool,
    pub sign_rate: f64,
    /// Samples whose estimated support equals the true one.
    pub exact_supports: usize,
    pub samples: usize,
    pub per_sample_precision: Vec<f64>,
    pub per_sample_recall: Vec<f64>,
}

/// Support precision/recall and sign agreement over true-positive entries.
///
/// `signs[i]` lists signs aligned with `est.sample(i)`.
pub fn support_sign_metrics(
    truth: &CoefficientMatrix,
    est: &SupportEstimate,
    signs: &[Vec<i8>],
) -> Result<SupportSignReport> {
    if truth.n() != est.n() || truth.k() != est.k() {
        return Err(Error::Dimension {
            context: "support metrics",
            expected: truth.n(),
            found: est.n(),
        });
    }
    if signs.len() != est.n() {
        return Err(Error::Dimension {
            context: "support metrics signs",
            expected: est.n(),
            found: signs.len(),
        });
    }
    let (mut tp, mut est_total, mut true_total) = (0usize, 0usize, 0usize);
    let (mut sign_hits, mut exact) = (0usize, 0usize);
    let mut per_p = Vec::with_capacity(est.n());
    let mut per_r = Vec::with_capacity(est.n());
    for i in 0..est.n() {
        let t = truth.support(i);
        let e = est.sample(i);
        if signs[i].len() != e.len() {
            return Err(Error::Dimension {
                context: "support metrics signs per sample",
                expected: e.len(),
                found: signs[i].len(),
            });
        }
        let mut hits = 0usize;
        for (&idx, &sg) in e.iter().zip(&signs[i]) {
            if t.binary_search(&idx).is_ok() {
                hits += 1;
                if sg == truth.value(idx, i) {
                    sign_hits += 1;
                }
            }
        }
        tp += hits;
        est_total += e.len();
        true_total += t.len();
        exact += usize::from(t == e);
        per_p.push(if e.is_empty() { 1.0 } else { hits as f64 / e.len() as f64 });
        per_r.push(if t.is_empty() { 1.0 } else { hits as f64 / t.len() as f64 });
    }
    Ok(SupportSignReport {
        precision: if est_total == 0 { 1.0 } else { tp as f64 / est_total as f64 },
        recall: if true_total == 0 { 1.0 } else { tp as f64 / true_total as f64 },
        precision_undefined: est_total == 0,
        sign_rate: if tp == 0 { 1.0 } else { sign_hits as f64 / tp as f64 },
        exact_supports: exact,
        samples: est.n(),
        per_sample_precision: per_p,
        per_sample_recall: per_r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{gen_dictionary, ProblemConfig};

    fn brute_force(cost: &DMatrix<f64>) -> f64 {
        fn rec(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.nrows() {
                *best = best.min(acc);
                return;
            }
            for j in 0..cost.ncols() {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost[(row, j)], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
        best
    }

    fn cost_of(cost: &DMatrix<f64>, a: &[Option<usize>]) -> f64 {
        a.iter().enumerate().filter_map(|(i, j)| j.map(|j| cost[(i, j)])).sum()
    }

    #[test]
    fn hand_built_three_by_three() {
        let cost = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let a = assign(&cost);
        assert_eq!(cost_of(&cost, &a), brute_force(&cost));
        assert_eq!(cost_of(&cost, &a), 5.0);
    }

    #[test]
    fn random_rectangular_against_brute_force() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(12, &[]);
        for trial in 0..200 {
            let rows = 1 + trial % 5;
            let cols = 1 + (trial / 5) % 6;
            let cost = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(0.0..10.0));
            let a = assign(&cost);
            let best = if rows <= cols { brute_force(&cost) } else { brute_force(&cost.transpose()) };
            assert!((cost_of(&cost, &a) - best).abs() < 1e-9, "trial {trial}");
            let assigned: Vec<usize> = a.iter().flatten().copied().collect();
            let mut dedup = assigned.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), assigned.len());
            assert_eq!(assigned.len(), rows.min(cols));
        }
    }

    #[test]
    fn permuted_and_flipped_dictionary_matches_exactly() {
        let d = gen_dictionary(&ProblemConfig::new(10, 20, 2, 1, 5).unwrap()).unwrap();
        let perm: Vec<usize> = (0..20).map(|i| (i * 7) % 20).collect();
        let mut est = DMatrix::zeros(10, 20);
        for (j, &k) in perm.iter().enumerate() {
            let sign = if j % 3 == 0 { -1.0 } else { 1.0 };
            est.set_column(j, &(d.column(k) * sign));
        }
        let m = match_columns(&d, &DictionaryEstimate::full(est), MatchMode::Exact).unwrap();
        assert!(m.unmatched_truth.is_empty() && m.surplus_estimates.is_empty());
        for p in &m.pairs {
            assert!(p.error < 1e-12);
            assert_eq!(perm[p.estimate], p.truth);
            assert_eq!(p.sign, if p.estimate % 3 == 0 { -1 } else { 1 });
        }
        assert!((angular_accuracy(&m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_column_leaves_one_unmatched() {
        let d = gen_dictionary(&ProblemConfig::new(10, 20, 2, 1, 6).unwrap()).unwrap();
        let keep: Vec<usize> = (0..20).filter(|&k| k != 4).collect();
        let est = DictionaryEstimate::full(d.matrix().select_columns(&keep));
        let m = match_columns(&d, &est, MatchMode::Exact).unwrap();
        assert_eq!(m.unmatched_truth, vec![4]);
        let masked = DictionaryEstimate::new(d.matrix().clone(), (0..20).map(|k| k != 9).collect()).unwrap();
        let m = match_columns(&d, &masked, MatchMode::Greedy).unwrap();
        assert_eq!(m.unmatched_truth, vec![9]);
    }

    #[test]
    fn empty_estimate_matches_nothing() {
        let d = gen_dictionary(&ProblemConfig::new(4, 6, 1, 1, 1).unwrap()).unwrap();
        let m = match_columns(&d, &DictionaryEstimate::full(DMatrix::zeros(4, 0)), MatchMode::Exact).unwrap();
        assert_eq!(m.unmatched_truth.len(), 6);
        assert!(angular_accuracy(&m).is_err());
    }

    #[test]
    fn angular_values() {
        let d = Dictionary::new(DMatrix::identity(3, 1)).unwrap();
        let ortho = DictionaryEstimate::full(DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]));
        let m = match_columns(&d, &ortho, MatchMode::Exact).unwrap();
        assert!(angular_accuracy(&m).unwrap().abs() < 1e-15);

        let tilted = DictionaryEstimate::full(DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.1]));
        let m = match_columns(&d, &tilted, MatchMode::Exact).unwrap();
        assert!((angular_accuracy(&m).unwrap() - 1.0 / 1.01f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unit_error_and_angle_identity() {
        let d = gen_dictionary(&ProblemConfig::new(8, 16, 2, 1, 2).unwrap()).unwrap();
        let e = gen_dictionary(&ProblemConfig::new(8, 16, 2, 1, 3).unwrap()).unwrap();
        let m = match_columns(&d, &DictionaryEstimate::full(e.matrix().clone()), MatchMode::Exact).unwrap();
        for p in &m.pairs {
            assert!((p.error * p.error - (2.0 - 2.0 * p.angular)).abs() < 1e-9);
        }
    }

    #[test]
    fn relabel_lines_up_columns() {
        let d = gen_dictionary(&ProblemConfig::new(6, 8, 2, 1, 9).unwrap()).unwrap();
        let est = DictionaryEstimate::full(-d.matrix().select_columns(&[3, 1, 0, 2, 7, 6, 5, 4]));
        let m = match_columns(&d, &est, MatchMode::Exact).unwrap();
        let r = m.relabel(&est, 8).unwrap();
        assert!((r.matrix() - d.matrix()).amax() < 1e-12);
    }

    #[test]
    fn block_truth_and_rate() {
        assert_eq!(BlockTruth::of(&[&[1, 2], &[2, 3]]), BlockTruth::Unique(2));
        assert_eq!(BlockTruth::of(&[&[1, 2], &[3, 4]]), BlockTruth::Empty);
        assert_eq!(BlockTruth::of(&[&[1, 2], &[1, 2]]), BlockTruth::Multiple);

        let mut ledger = RecoveryLedger::default();
        assert!(false_recovery_rate(&ledger).is_err());
        for b in 0..25 {
            ledger.push(BlockTruth::Unique(b), b != 0);
        }
        assert!((false_recovery_rate(&ledger).unwrap() - 0.04).abs() < 1e-15);
        ledger.push(BlockTruth::Empty, true);
        ledger.push(BlockTruth::Multiple, true);
        ledger.push(BlockTruth::Multiple, false);
        assert_eq!(ledger.false_recoveries(), 3);
    }

    #[test]
    fn support_metrics_conventions() {
        let x = CoefficientMatrix::new(4, vec![vec![0, 1], vec![2, 3]], vec![vec![1, -1], vec![1, 1]]).unwrap();
        let exact = SupportEstimate::exact(&x);
        let signs = vec![vec![1, -1], vec![1, 1]];
        let r = support_sign_metrics(&x, &exact, &signs).unwrap();
        assert_eq!((r.precision, r.recall, r.sign_rate), (1.0, 1.0, 1.0));
        assert_eq!(r.exact_supports, 2);

        let empty = SupportEstimate::from_samples(4, vec![vec![], vec![]]).unwrap();
        let r = support_sign_metrics(&x, &empty, &[vec![], vec![]]).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 0.0));
        assert!(r.precision_undefined);
    }

    #[test]
    fn one_flipped_sign_in_a_thousand() {
        let supports: Vec<Vec<usize>> = (0..1000).map(|i| vec![i % 5]).collect();
        let values = vec![vec![1i8]; 1000];
        let x = CoefficientMatrix::new(5, supports, values).unwrap();
        let est = SupportEstimate::exact(&x);
        let mut signs = vec![vec![1i8]; 1000];
        signs[417][0] = -1;
        let r = support_sign_metrics(&x, &est, &signs).unwrap();
        assert!((r.sign_rate - 0.999).abs() < 1e-12);
    }
}
