//! Pipeline orchestration and the experiment drivers.
//!
//! `run_pipeline` chains subspace recovery, block intersection, support
//! estimation, refinement and averaging on one instance and scores every stage
//! against the ground truth. `run_exp1` searches for the largest sparsity at
//! which seeded pairwise intersections stay accurate; `run_exp2` sweeps the
//! sample count and reports per-stage column errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    self, false_recovery_rate, match_columns, signed_distance, BlockTruth, MatchMode, Matching, RecoveryLedger,
    SupportSignReport,
};
use crate::intersect::{self, coverage_budget, CandidateSet, IntersectConfig};
use crate::io;
use crate::oracle::{self, DictionaryEstimate, RefinedDictionary, SupportBuilder, SupportEstimate};
use crate::problem::{Dictionary, OverlapSeed, Problem, ProblemConfig, SampleSet};
use crate::rng::{derive_seed, stream};
use crate::spectral::{CovarianceRoute, Subspace, SubspaceRecovery, SymMatrix, DEFAULT_TENSOR_BUDGET};

/// Partial intersection settings; missing values follow the coverage bound.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectSettings {
    pub ell: Option<usize>,
    pub j: Option<usize>,
    pub tau: Option<f64>,
    pub dedup_threshold: Option<f64>,
    pub alpha: Option<f64>,
}

impl IntersectSettings {
    pub fn resolve(&self, k: usize, s: usize) -> Result<IntersectConfig> {
        let alpha = self.alpha.unwrap_or(1.0);
        let ell = match self.ell {
            Some(l) => l,
            None => intersect::choose_ell(k, s)?,
        };
        let cfg = IntersectConfig {
            ell,
            j: self.j.unwrap_or_else(|| coverage_budget(k, ell.max(1), alpha)),
            tau: self.tau.unwrap_or(intersect::DEFAULT_TAU),
            dedup_threshold: self.dedup_threshold.unwrap_or(intersect::DEFAULT_DEDUP_THRESHOLD),
            alpha,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSettings {
    #[serde(default = "default_support_tau")]
    pub tau_support: f64,
    /// Leading samples whose subspaces feed support estimation; all when unset.
    #[serde(default)]
    pub oracle_samples: Option<usize>,
    #[serde(default = "default_floor")]
    pub low_confidence_floor: usize,
}

fn default_support_tau() -> f64 {
    oracle::DEFAULT_SUPPORT_TAU
}

fn default_floor() -> usize {
    oracle::LOW_CONFIDENCE_FLOOR
}

impl Default for OracleSettings {
    fn default() -> Self {
        OracleSettings {
            tau_support: default_support_tau(),
            oracle_samples: None,
            low_confidence_floor: default_floor(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// A matched column counts as recovered when its error is at most this.
    #[serde(default = "default_recovery_threshold")]
    pub recovery_threshold: f64,
    #[serde(default)]
    pub matching: MatchMode,
}

fn default_recovery_threshold() -> f64 {
    0.5
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            recovery_threshold: default_recovery_threshold(),
            matching: MatchMode::Exact,
        }
    }
}

/// Everything a CLI config file may hold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub problem: Option<ProblemConfig>,
    #[serde(default)]
    pub intersect: IntersectSettings,
    #[serde(default)]
    pub oracle: OracleSettings,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
    /// Bytes allowed for the fourth-moment table.
    #[serde(default)]
    pub memory_budget: Option<usize>,
}

/// Metadata written next to every experiment CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub config: RunConfig,
    pub build: String,
    pub output: String,
}

impl RunConfig {
    /// Load a config file, or the config recorded in a `.meta.json` sidecar.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        RunConfig::parse(&text, io::ConfigFormat::for_path(path)).map_err(|e| e.in_file(path))
    }

    pub fn parse(text: &str, format: io::ConfigFormat) -> Result<RunConfig> {
        if format == io::ConfigFormat::Json {
            if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(text) {
                if map.contains_key("config") && map.contains_key("build") {
                    let sidecar: Sidecar = io::parse_config(text, format)?;
                    return Ok(sidecar.config);
                }
            }
        }
        io::parse_config(text, format)
    }

    pub fn memory_budget(&self) -> usize {
        self.memory_budget.unwrap_or(DEFAULT_TENSOR_BUDGET)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOptions {
    pub intersect: IntersectConfig,
    pub oracle: OracleSettings,
    pub eval: EvalSettings,
    pub jobs: usize,
    pub memory_budget: usize,
}

impl PipelineOptions {
    pub fn from_config(cfg: &RunConfig, problem: &ProblemConfig, jobs: usize) -> Result<Self> {
        Ok(PipelineOptions {
            intersect: cfg.intersect.resolve(problem.k, problem.s)?,
            oracle: cfg.oracle.clone(),
            eval: cfg.eval.clone(),
            jobs: jobs.max(1),
            memory_budget: cfg.memory_budget(),
        })
    }
}

/// Column error summary over the correctly recovered columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub columns: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub max: Option<f64>,
}

impl StageError {
    pub fn from_errors(mut errors: Vec<f64>) -> Self {
        if errors.is_empty() {
            return StageError::default();
        }
        errors.sort_by(f64::total_cmp);
        let n = errors.len();
        let median = if n % 2 == 1 {
            errors[n / 2]
        } else {
            0.5 * (errors[n / 2 - 1] + errors[n / 2])
        };
        StageError {
            columns: n,
            mean: Some(errors.iter().sum::<f64>() / n as f64),
            median: Some(median),
            max: errors.last().copied(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsdlReport {
    pub ell: usize,
    pub j: usize,
    pub blocks: usize,
    pub candidates: usize,
    pub rejected_blocks: usize,
    pub duplicates: usize,
    pub route: String,
}

impl SsdlReport {
    pub fn new(cfg: &IntersectConfig, set: &CandidateSet, route: CovarianceRoute) -> Self {
        SsdlReport {
            ell: cfg.ell,
            j: cfg.samples_used(),
            blocks: set.outcomes.len(),
            candidates: set.len(),
            rejected_blocks: set.rejected_blocks,
            duplicates: set.duplicates,
            route: route_name(route).into(),
        }
    }
}

fn route_name(route: CovarianceRoute) -> &'static str {
    match route {
        CovarianceRoute::Direct => "direct",
        CovarianceRoute::FourthMoment => "fourth_moment",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub present: Vec<bool>,
    /// `N_k` per column.
    pub counts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eigengaps: Vec<Option<f64>>,
    pub absent: Vec<usize>,
    pub low_confidence: Vec<usize>,
    pub samples: usize,
}

impl ColumnReport {
    pub fn refined(refined: &RefinedDictionary, samples: usize, floor: usize) -> Self {
        ColumnReport {
            present: refined.estimate.present().to_vec(),
            counts: refined.counts.clone(),
            eigengaps: refined.eigengaps.clone(),
            absent: refined.absent(),
            low_confidence: refined.low_confidence(floor),
            samples,
        }
    }

    pub fn averaged(averaged: &DictionaryEstimate, supports: &SupportEstimate, floor: usize) -> Self {
        let counts = supports.counts();
        ColumnReport {
            present: averaged.present().to_vec(),
            absent: (0..averaged.k()).filter(|&k| !averaged.is_present(k)).collect(),
            low_confidence: counts
                .iter()
                .enumerate()
                .filter(|(k, &n)| averaged.is_present(*k) && n < floor)
                .map(|(k, _)| k)
                .collect(),
            counts,
            eigengaps: Vec::new(),
            samples: supports.n(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsdlScore {
    pub matched: usize,
    pub recovered: usize,
    pub surplus: usize,
    pub unmatched_truth: usize,
    pub angular_accuracy: Option<f64>,
    pub false_recovery_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageErrors {
    pub ssdl: StageError,
    pub refine: StageError,
    pub average: StageError,
    pub true_average: StageError,
}

/// Support metrics without the per-sample vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub precision: f64,
    pub recall: f64,
    pub precision_undefined: bool,
    pub sign_rate: f64,
    pub exact_supports: usize,
    pub samples: usize,
    /// Estimated entries that belong to unmatched candidates.
    pub dropped_entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problem: ProblemConfig,
    pub intersect: IntersectConfig,
    pub oracle: OracleSettings,
    pub eval: EvalSettings,
    pub ssdl: SsdlReport,
    pub score: SsdlScore,
    pub errors: StageErrors,
    pub supports: SupportSummary,
    pub refine_absent: usize,
    pub refine_low_confidence: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: BTreeMap<String, f64>,
}

impl Timings {
    fn record<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.stages.entry(stage.to_string()).or_default() += t.elapsed().as_secs_f64();
        out
    }
}

pub struct PipelineRun {
    pub candidates: CandidateSet,
    pub dhat: DictionaryEstimate,
    pub supports: SupportEstimate,
    pub refined: RefinedDictionary,
    pub averaged: DictionaryEstimate,
    pub true_averaged: DictionaryEstimate,
    pub matching: Matching,
    pub summary: Summary,
    pub timings: Timings,
}

/// Everything the SSDL stage produces before scoring.
pub struct SsdlRun {
    pub covariance: SymMatrix,
    pub route: CovarianceRoute,
    pub candidates: CandidateSet,
    pub supports: SupportEstimate,
}

/// Recover subspaces for the first `max(J, oracle_samples)` samples, intersect the
/// first `J` in blocks, then threshold every recovered subspace against the candidates.
pub fn ssdl_and_supports(
    samples: &SampleSet,
    s: usize,
    cfg: &IntersectConfig,
    oracle_cfg: &OracleSettings,
    jobs: usize,
    memory_budget: usize,
    timings: &mut Timings,
) -> Result<SsdlRun> {
    cfg.validate().map_err(|e| e.in_stage("ssdl"))?;
    let j = cfg.samples_used();
    if j > samples.n() {
        return Err(Error::config(format!("J = {j} (whole blocks) exceeds n = {}", samples.n())).in_stage("ssdl"));
    }
    let n_oracle = oracle_samples(oracle_cfg, samples.n()).map_err(|e| e.in_stage("refine"))?;
    let mut recovery = timings
        .record("covariance", || SubspaceRecovery::new(samples, s))
        .map_err(|e| e.in_stage("subspace recovery"))?;
    timings.record("fourth_moment", || recovery.plan(j.max(n_oracle), memory_budget));
    info!("recovering {} subspaces via the {} route", j.max(n_oracle), route_name(recovery.route()));

    let subspaces = timings
        .record("subspace_recovery", || recovery.recover_range(0..j, jobs))
        .map_err(|e| e.in_stage("subspace recovery"))?;
    let candidates = timings
        .record("intersection", || intersect::intersect_blocks(&subspaces, cfg))
        .map_err(|e| e.in_stage("ssdl"))?;
    info!(
        "{} candidates from {} blocks ({} rejected, {} duplicates)",
        candidates.len(),
        candidates.outcomes.len(),
        candidates.rejected_blocks,
        candidates.duplicates
    );

    let dhat = DictionaryEstimate::full(candidates.matrix(samples.m()));
    let mut builder = SupportBuilder::new(&dhat, oracle_cfg.tau_support).map_err(|e| e.in_stage("refine"))?;
    timings
        .record("support_estimation", || -> Result<()> {
            for sub in subspaces.iter().take(n_oracle) {
                builder.push(sub)?;
            }
            Ok(())
        })
        .map_err(|e| e.in_stage("refine"))?;
    drop(subspaces);
    if n_oracle > j {
        let t = Instant::now();
        let mut push_time = 0.0;
        recovery
            .recover_batches(j..n_oracle, jobs, |_, batch| {
                let p = Instant::now();
                for sub in &batch {
                    builder.push(sub)?;
                }
                push_time += p.elapsed().as_secs_f64();
                Ok(())
            })
            .map_err(|e| e.in_stage("refine"))?;
        *timings.stages.entry("subspace_recovery".into()).or_default() += t.elapsed().as_secs_f64() - push_time;
        *timings.stages.entry("support_estimation".into()).or_default() += push_time;
    }
    let route = recovery.route();
    Ok(SsdlRun {
        covariance: recovery.into_covariance(),
        route,
        candidates,
        supports: builder.finish(),
    })
}

fn oracle_samples(cfg: &OracleSettings, n: usize) -> Result<usize> {
    match cfg.oracle_samples {
        Some(0) => Err(Error::config("oracle_samples must be positive")),
        Some(v) => Ok(v.min(n)),
        None => Ok(n),
    }
}

/// Run every stage on a generated instance and score it, writing artifacts to `out` as they appear.
pub fn run_pipeline(problem: &Problem, opts: &PipelineOptions, out: Option<&Path>) -> Result<PipelineRun> {
    let mut timings = Timings::default();
    let cfg = &problem.config;
    let samples = &problem.samples;
    if let Some(dir) = out {
        io::write_problem(dir, problem).map_err(|e| e.in_stage("generation"))?;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;

    let run = ssdl_and_supports(
        samples,
        cfg.s,
        &opts.intersect,
        &opts.oracle,
        opts.jobs,
        opts.memory_budget,
        &mut timings,
    )?;
    let SsdlRun {
        covariance,
        route,
        candidates,
        supports,
    } = run;
    let dhat = DictionaryEstimate::full(candidates.matrix(samples.m()));
    let ssdl_report = SsdlReport::new(&opts.intersect, &candidates, route);
    if let Some(dir) = out {
        write_ssdl(dir, &candidates, &ssdl_report, &timings).map_err(|e| e.in_stage("ssdl"))?;
        io::write_supports(&dir.join("supports.csv"), &supports).map_err(|e| e.in_stage("refine"))?;
    }

    let refined = timings
        .record("refine", || pool.install(|| oracle::refine(samples, &covariance, &supports)))
        .map_err(|e| e.in_stage("refine"))?;
    let floor = opts.oracle.low_confidence_floor;
    if let Some(dir) = out {
        write_estimate(dir, "Dtil", &refined.estimate, &ColumnReport::refined(&refined, supports.n(), floor))
            .map_err(|e| e.in_stage("refine"))?;
    }

    let averaged = timings
        .record("average", || pool.install(|| oracle::average(samples, &supports, &refined.estimate)))
        .map_err(|e| e.in_stage("average"))?;
    if let Some(dir) = out {
        write_estimate(dir, "Dbar", &averaged, &ColumnReport::averaged(&averaged, &supports, floor))
            .map_err(|e| e.in_stage("average"))?;
    }

    // True averaging sees the same samples as oracle averaging.
    let truth_x = problem.coefficients.truncated(supports.n());
    let true_averaged = timings
        .record("true_average", || pool.install(|| oracle::true_average(samples, &truth_x)))
        .map_err(|e| e.in_stage("average"))?;

    let (matching, summary, columns) = timings
        .record("eval", || {
            score(
                problem,
                opts,
                &candidates,
                &dhat,
                &supports,
                &refined,
                &averaged,
                &true_averaged,
                ssdl_report,
            )
        })
        .map_err(|e| e.in_stage("eval"))?;
    if let Some(dir) = out {
        io::write_matrix(&dir.join("Dtrue.csv"), true_averaged.matrix()).map_err(|e| e.in_stage("eval"))?;
        write_column_errors(&dir.join("columns.csv"), &columns).map_err(|e| e.in_stage("eval"))?;
        io::write_json(&dir.join("summary.json"), &summary).map_err(|e| e.in_stage("eval"))?;
        io::write_json(&dir.join("timings.json"), &timings).map_err(|e| e.in_stage("eval"))?;
    }
    let _ = cfg;
    Ok(PipelineRun {
        candidates,
        dhat,
        supports,
        refined,
        averaged,
        true_averaged,
        matching,
        summary,
        timings,
    })
}

/// Per truth column: matched candidate and each stage's error.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ColumnErrors {
    pub truth: usize,
    pub candidate: Option<usize>,
    pub recovered: bool,
    pub ssdl: Option<f64>,
    pub refine: Option<f64>,
    pub average: Option<f64>,
    pub true_average: Option<f64>,
}

fn column_error(truth: &Dictionary, k: usize, est: &DictionaryEstimate, j: usize) -> Option<f64> {
    est.column(j).map(|c| signed_distance(&truth.column(k), &c).0)
}

#[allow(clippy::too_many_arguments)]
fn score(
    problem: &Problem,
    opts: &PipelineOptions,
    candidates: &CandidateSet,
    dhat: &DictionaryEstimate,
    supports: &SupportEstimate,
    refined: &RefinedDictionary,
    averaged: &DictionaryEstimate,
    true_averaged: &DictionaryEstimate,
    ssdl_report: SsdlReport,
) -> Result<(Matching, Summary, Vec<ColumnErrors>)> {
    let truth = &problem.dictionary;
    let threshold = opts.eval.recovery_threshold;
    let matching = match_columns(truth, dhat, opts.eval.matching)?;

    let mut columns: Vec<ColumnErrors> = (0..truth.k())
        .map(|k| ColumnErrors {
            truth: k,
            candidate: None,
            recovered: false,
            ssdl: None,
            refine: None,
            average: None,
            true_average: column_error(truth, k, true_averaged, k),
        })
        .collect();
    for p in &matching.pairs {
        let row = &mut columns[p.truth];
        row.candidate = Some(p.estimate);
        row.recovered = p.error <= threshold;
        row.ssdl = Some(p.error);
        row.refine = column_error(truth, p.truth, &refined.estimate, p.estimate);
        row.average = column_error(truth, p.truth, averaged, p.estimate);
    }
    let recovered: Vec<&ColumnErrors> = columns.iter().filter(|c| c.recovered).collect();
    let collect = |f: fn(&ColumnErrors) -> Option<f64>| StageError::from_errors(recovered.iter().filter_map(|c| f(c)).collect());
    let errors = StageErrors {
        ssdl: collect(|c| c.ssdl),
        refine: collect(|c| c.refine),
        average: collect(|c| c.average),
        true_average: collect(|c| c.true_average),
    };

    let ledger = block_ledger(candidates, problem.coefficients.supports(), opts.intersect.ell);
    let score = SsdlScore {
        matched: matching.pairs.len(),
        recovered: recovered.len(),
        surplus: matching.surplus_estimates.len(),
        unmatched_truth: matching.unmatched_truth.len(),
        angular_accuracy: eval::angular_accuracy(&matching).ok(),
        false_recovery_rate: false_recovery_rate(&ledger).ok(),
    };

    let (report, dropped) = translated_support_metrics(problem, &matching, supports, refined)?;
    let summary = Summary {
        problem: problem.config.clone(),
        intersect: opts.intersect.clone(),
        oracle: opts.oracle.clone(),
        eval: opts.eval.clone(),
        ssdl: ssdl_report,
        score,
        errors,
        supports: SupportSummary {
            precision: report.precision,
            recall: report.recall,
            precision_undefined: report.precision_undefined,
            sign_rate: report.sign_rate,
            exact_supports: report.exact_supports,
            samples: report.samples,
            dropped_entries: dropped,
        },
        refine_absent: refined.absent().len(),
        refine_low_confidence: refined.low_confidence(opts.oracle.low_confidence_floor).len(),
    };
    Ok((matching, summary, columns))
}

/// Ground truth and outcome for each intersection block.
pub fn block_ledger(candidates: &CandidateSet, supports: &[Vec<usize>], ell: usize) -> RecoveryLedger {
    let mut ledger = RecoveryLedger::default();
    for outcome in &candidates.outcomes {
        let start = outcome.block * ell;
        let block: Vec<&[usize]> = supports[start..(start + ell).min(supports.len())]
            .iter()
            .map(Vec::as_slice)
            .collect();
        ledger.push(BlockTruth::of(&block), outcome.vector.is_some());
    }
    ledger
}

/// Support/sign metrics after mapping candidate indices to truth indices
/// through the matching and correcting signs by the refined column's orientation.
fn translated_support_metrics(
    problem: &Problem,
    matching: &Matching,
    supports: &SupportEstimate,
    refined: &RefinedDictionary,
) -> Result<(SupportSignReport, usize)> {
    let truth = &problem.dictionary;
    let mut per_sample: Vec<Vec<(usize, i8)>> = vec![Vec::new(); supports.n()];
    let mut mapped = vec![None; supports.k()];
    for p in &matching.pairs {
        mapped[p.estimate] = Some(p.truth);
    }
    let mut dropped = 0usize;
    for j in 0..supports.k() {
        let members = supports.element(j);
        let (Some(k), Some(dtil)) = (mapped[j], refined.estimate.column(j)) else {
            dropped += members.len();
            continue;
        };
        let orientation: i8 = if dtil.dot(&truth.column(k)) < 0.0 { -1 } else { 1 };
        let signs = oracle::recover_signs(&dtil, &problem.samples, members);
        for (&i, &sg) in members.iter().zip(&signs) {
            per_sample[i].push((k, sg * orientation));
        }
    }
    let mut lists = Vec::with_capacity(per_sample.len());
    let mut signs = Vec::with_capacity(per_sample.len());
    for mut entries in per_sample {
        entries.sort_unstable();
        lists.push(entries.iter().map(|e| e.0).collect());
        signs.push(entries.iter().map(|e| e.1).collect());
    }
    let est = SupportEstimate::from_samples(truth.k(), lists)?;
    let truth_x = problem.coefficients.truncated(supports.n());
    Ok((eval::support_sign_metrics(&truth_x, &est, &signs)?, dropped))
}

pub fn write_ssdl(dir: &Path, set: &CandidateSet, report: &SsdlReport, timings: &Timings) -> Result<()> {
    #[derive(Serialize)]
    struct Report<'a> {
        #[serde(flatten)]
        report: &'a SsdlReport,
        timings: &'a Timings,
    }
    io::write_matrix(&dir.join("Dhat.csv"), &set.matrix(dir_rows(set)))?;
    let blocks: Vec<usize> = set.candidates.iter().map(|c| c.block).collect();
    std::fs::write(dir.join("provenance.csv"), io::format_provenance(&blocks))
        .map_err(|e| Error::io("writing provenance.csv", e))?;
    io::write_json(&dir.join("ssdl.json"), &Report { report, timings })
}

fn dir_rows(set: &CandidateSet) -> usize {
    set.candidates.first().map_or(0, |c| c.vector.len())
}

/// Write `<name>.csv` and `<name>.json`.
pub fn write_estimate(dir: &Path, name: &str, est: &DictionaryEstimate, report: &ColumnReport) -> Result<()> {
    io::write_matrix(&dir.join(format!("{name}.csv")), est.matrix())?;
    io::write_json(&dir.join(format!("{name}.json")), report)
}

/// Read `<name>.csv` with the presence mask from `<name>.json` when available.
pub fn read_estimate(path: &Path, m: usize) -> Result<DictionaryEstimate> {
    let matrix = io::read_matrix_with_rows(path, m)?;
    let report_path = path.with_extension("json");
    if let Ok(report) = io::load_config::<ColumnReport>(&report_path) {
        return DictionaryEstimate::new(matrix, report.present);
    }
    // Without a report, all-zero columns are taken as absent.
    let present = matrix.column_iter().map(|c| c.iter().any(|&v| v != 0.0)).collect();
    DictionaryEstimate::new(matrix, present)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_column_errors(path: &Path, rows: &[ColumnErrors]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Numerical(e.to_string()))?;
    let mut put = |rec: Vec<String>| w.write_record(rec).map_err(|e| Error::Numerical(e.to_string()));
    put(["truth", "candidate", "recovered", "err_ssdl", "err_refine", "err_average", "err_true_average"]
        .map(String::from)
        .to_vec())?;
    for r in rows {
        put(vec![
            r.truth.to_string(),
            r.candidate.map(|c| c.to_string()).unwrap_or_default(),
            r.recovered.to_string(),
            opt(r.ssdl),
            opt(r.refine),
            opt(r.average),
            opt(r.true_average),
        ])?;
    }
    w.flush().map_err(|e| Error::io("writing column errors", e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Exp1,
    Exp2,
    Pipeline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KRule {
    /// `K = round(ratio · M)`.
    Ratio(f64),
    /// One `K` per entry of the dimension schedule.
    Explicit(Vec<usize>),
}

impl Default for KRule {
    fn default() -> Self {
        KRule::Ratio(2.0)
    }
}

impl KRule {
    pub fn k_for(&self, index: usize, m: usize) -> Result<usize> {
        match self {
            KRule::Ratio(r) => Ok((r * m as f64).round() as usize),
            KRule::Explicit(ks) => ks
                .get(index)
                .copied()
                .ok_or_else(|| Error::config(format!("k_rule lists no K for dimension #{index}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NRule {
    Fixed {
        n: usize,
    },
    /// `N = round(anchor_n · (M / anchor_m)^power)`.
    Power {
        power: f64,
        #[serde(default = "default_anchor_m")]
        anchor_m: usize,
        #[serde(default = "default_anchor_n")]
        anchor_n: usize,
    },
}

fn default_anchor_m() -> usize {
    500
}

fn default_anchor_n() -> usize {
    30_000
}

impl NRule {
    pub fn n_for(&self, m: usize) -> usize {
        match *self {
            NRule::Fixed { n } => n,
            NRule::Power {
                power,
                anchor_m,
                anchor_n,
            } => (anchor_n as f64 * (m as f64 / anchor_m as f64).powf(power)).round() as usize,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            NRule::Fixed { n } => format!("fixed:{n}"),
            NRule::Power { power, .. } => format!("M^{power}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default = "default_angular")]
    pub angular: f64,
    #[serde(default = "default_false_recovery")]
    pub false_recovery: f64,
}

fn default_angular() -> f64 {
    0.95
}

fn default_false_recovery() -> f64 {
    0.08
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            angular: default_angular(),
            false_recovery: default_false_recovery(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    /// Schedule of ambient dimensions.
    pub dims: Vec<usize>,
    #[serde(default)]
    pub k_rule: KRule,
    /// Sample-count rules (exp1).
    #[serde(default)]
    pub n_rules: Vec<NRule>,
    /// Sample counts to sweep (exp2).
    #[serde(default)]
    pub n_values: Vec<usize>,
    /// Smallest sparsity tried (exp1).
    #[serde(default = "one")]
    pub s_min: usize,
    /// Largest sparsity tried (exp1); defaults to `M − 1`.
    #[serde(default)]
    pub s_max: Option<usize>,
    /// Fixed sparsity (exp2).
    #[serde(default)]
    pub s: Option<usize>,
    #[serde(default)]
    pub thresholds: Thresholds,
    /// Dictionaries per point.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Seeded-overlap subspaces per dictionary (exp1).
    #[serde(default = "default_subspaces")]
    pub subspaces: usize,
    /// Subspaces intersected (exp2); the coverage bound when unset.
    #[serde(default)]
    pub j: Option<usize>,
    #[serde(default)]
    pub oracle_samples: Option<usize>,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn default_repetitions() -> usize {
    5
}

fn default_subspaces() -> usize {
    50
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::config("dimension schedule is empty"));
        }
        for (name, v) in [("angular", self.thresholds.angular), ("false_recovery", self.thresholds.false_recovery)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!("threshold {name} = {v} must lie in (0, 1]")));
            }
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions must be positive"));
        }
        if let KRule::Explicit(ks) = &self.k_rule {
            if ks.len() != self.dims.len() {
                return Err(Error::config("explicit k_rule must list one K per dimension"));
            }
        }
        match self.kind {
            ExperimentKind::Exp1 => {
                if self.n_rules.is_empty() {
                    return Err(Error::config("exp1 needs at least one n_rule"));
                }
                if self.subspaces < 2 || self.subspaces % 2 != 0 {
                    return Err(Error::config("exp1 needs an even number of subspaces, at least 2"));
                }
                if self.s_min == 0 || self.s_max.is_some_and(|m| m < self.s_min) {
                    return Err(Error::config("sparsity bounds must satisfy 1 <= s_min <= s_max"));
                }
            }
            ExperimentKind::Exp2 => {
                if self.n_values.is_empty() {
                    return Err(Error::config("exp2 needs at least one value in n_values"));
                }
                if self.s.is_none() {
                    return Err(Error::config("exp2 needs a fixed sparsity s"));
                }
            }
            ExperimentKind::Pipeline => {}
        }
        Ok(())
    }
}

/// Outcome of the seeded-overlap intersection test at one `(M, K, N, s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exp1Point {
    pub accuracy: Option<f64>,
    pub false_recovery_rate: f64,
    pub returned: usize,
    pub blocks: usize,
}

impl Exp1Point {
    pub fn passes(&self, t: &Thresholds) -> bool {
        self.accuracy.is_some_and(|a| a >= t.angular) && self.false_recovery_rate <= t.false_recovery
    }
}

/// Instance for one dictionary of an exp1 point: sample pairs `(2p, 2p+1)` share element `p`.
pub fn exp1_problem(m: usize, k: usize, n: usize, s: usize, subspaces: usize, seed: u64) -> Result<Problem> {
    let seeds = (0..subspaces / 2)
        .map(|p| OverlapSeed {
            index: p % k,
            samples: [2 * p, 2 * p + 1],
        })
        .collect();
    let cfg = ProblemConfig::new(m, k, s, n, seed)?.with_overlap_seeding(seeds)?;
    Problem::generate(&cfg)
}

/// Intersect the seeded pairs of the first `subspaces` samples of each dictionary.
///
/// Accuracy is the mean `|⟨v, d_k⟩|` over blocks with a unique shared element that
/// returned a vector; false recoveries are counted over every block.
pub fn exp1_point(spec: &ExperimentSpec, m: usize, k: usize, n: usize, s: usize, jobs: usize) -> Result<Exp1Point> {
    let tau = spec.tau.unwrap_or(intersect::DEFAULT_TAU);
    let mut ledger = RecoveryLedger::default();
    let mut angles = Vec::new();
    for rep in 0..spec.repetitions {
        let seed = derive_seed(spec.seed, &[stream::EXPERIMENT, 1, m as u64, rep as u64]);
        let problem = exp1_problem(m, k, n, s, spec.subspaces, seed)?;
        let recovery = SubspaceRecovery::new(&problem.samples, s)?;
        let subspaces = recovery.recover_range(0..spec.subspaces, jobs)?;
        for (b, pair) in subspaces.chunks(2).enumerate() {
            let sup: Vec<&[usize]> = vec![
                problem.coefficients.support(2 * b),
                problem.coefficients.support(2 * b + 1),
            ];
            let truth = BlockTruth::of(&sup);
            let v = intersect::l_fold_intersect(pair, tau)?;
            if let (BlockTruth::Unique(e), Some(v)) = (truth, &v) {
                angles.push(v.dot(&problem.dictionary.column(e)).abs());
            }
            ledger.push(truth, v.is_some());
        }
    }
    Ok(Exp1Point {
        accuracy: (!angles.is_empty()).then(|| angles.iter().sum::<f64>() / angles.len() as f64),
        false_recovery_rate: false_recovery_rate(&ledger)?,
        returned: ledger.blocks.iter().filter(|b| b.returned).count(),
        blocks: ledger.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exp1Row {
    pub m: usize,
    pub k: usize,
    pub n_rule: String,
    pub n: usize,
    pub s_max: usize,
    pub accuracy: Option<f64>,
    pub frr: f64,
    /// Set when no sparsity passed; `s_max` is then 0.
    pub none_passed: bool,
}

/// Largest passing `s` by a doubling scan followed by bisection, assuming
/// pass/fail is monotone in `s`.
pub fn search_s_max<F>(s_min: usize, s_max: usize, mut eval: F) -> Result<(usize, Option<Exp1Point>, Exp1Point)>
where
    F: FnMut(usize) -> Result<(bool, Exp1Point)>,
{
    let (ok, first) = eval(s_min)?;
    if !ok {
        return Ok((0, None, first));
    }
    let (mut lo, mut lo_point) = (s_min, first);
    let mut hi = None;
    while hi.is_none() && lo < s_max {
        let next = (lo * 2).min(s_max);
        let (ok, p) = eval(next)?;
        if ok {
            lo = next;
            lo_point = p;
        } else {
            hi = Some(next);
        }
    }
    if let Some(mut hi) = hi {
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            let (ok, p) = eval(mid)?;
            if ok {
                lo = mid;
                lo_point = p;
            } else {
                hi = mid;
            }
        }
    }
    Ok((lo, Some(lo_point.clone()), lo_point))
}

pub fn run_exp1(spec: &ExperimentSpec, jobs: usize) -> Result<Vec<Exp1Row>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for (idx, &m) in spec.dims.iter().enumerate() {
        let k = spec.k_rule.k_for(idx, m)?;
        for rule in &spec.n_rules {
            let n = rule.n_for(m).max(spec.subspaces);
            let upper = spec.s_max.unwrap_or(m - 1).min(m - 1);
            let (s_max, passing, last) = search_s_max(spec.s_min, upper, |s| {
                let p = exp1_point(spec, m, k, n, s, jobs)?;
                info!(
                    "exp1 M={m} K={k} N={n} s={s}: accuracy {:?}, frr {}",
                    p.accuracy, p.false_recovery_rate
                );
                Ok((p.passes(&spec.thresholds), p))
            })?;
            let point = passing.as_ref().unwrap_or(&last);
            if s_max == 0 {
                warn!("exp1 M={m} N={n}: no sparsity passed");
            }
            rows.push(Exp1Row {
                m,
                k,
                n_rule: rule.label(),
                n,
                s_max,
                accuracy: point.accuracy,
                frr: point.false_recovery_rate,
                none_passed: s_max == 0,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exp2Row {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub err_ssdl: Option<f64>,
    pub err_refine: Option<f64>,
    pub err_average: Option<f64>,
    pub err_true_average: Option<f64>,
    /// Recovered columns summed over repetitions.
    pub columns: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn run_exp2(spec: &ExperimentSpec, base: &RunConfig, jobs: usize) -> Result<Vec<Exp2Row>> {
    spec.validate()?;
    let s = spec.s.expect("validated");
    let mut rows = Vec::new();
    for (idx, &m) in spec.dims.iter().enumerate() {
        let k = spec.k_rule.k_for(idx, m)?;
        for &n in &spec.n_values {
            let mut summaries = Vec::new();
            for rep in 0..spec.repetitions {
                let seed = derive_seed(spec.seed, &[stream::EXPERIMENT, 2, m as u64, rep as u64]);
                let problem = Problem::generate(&ProblemConfig::new(m, k, s, n, seed)?)?;
                let mut settings = base.intersect.clone();
                if spec.j.is_some() {
                    settings.j = spec.j;
                }
                if spec.tau.is_some() {
                    settings.tau = spec.tau;
                }
                let mut oracle_cfg = base.oracle.clone();
                if spec.oracle_samples.is_some() {
                    oracle_cfg.oracle_samples = spec.oracle_samples;
                }
                let opts = PipelineOptions {
                    intersect: settings.resolve(k, s)?,
                    oracle: oracle_cfg,
                    eval: base.eval.clone(),
                    jobs,
                    memory_budget: base.memory_budget(),
                };
                let run = run_pipeline(&problem, &opts, None)?;
                info!("exp2 M={m} N={n} rep={rep}: {:?}", run.summary.errors);
                summaries.push(run.summary);
            }
            rows.push(Exp2Row {
                m,
                k,
                n,
                err_ssdl: mean_of(summaries.iter().map(|s| s.errors.ssdl.mean)),
                err_refine: mean_of(summaries.iter().map(|s| s.errors.refine.mean)),
                err_average: mean_of(summaries.iter().map(|s| s.errors.average.mean)),
                err_true_average: mean_of(summaries.iter().map(|s| s.errors.true_average.mean)),
                columns: summaries.iter().map(|s| s.score.recovered).sum(),
            });
        }
    }
    Ok(rows)
}

pub const EXP1_HEADER: [&str; 8] = ["M", "N_rule", "N", "s_max", "accuracy", "frr", "K", "none_passed"];
pub const EXP2_HEADER: [&str; 8] = [
    "N",
    "err_ssdl",
    "err_refine",
    "err_average",
    "err_true_average",
    "M",
    "K",
    "columns",
];

pub fn format_exp1_csv(rows: &[Exp1Row]) -> Result<String> {
    write_csv(
        &EXP1_HEADER,
        rows.iter().map(|r| {
            vec![
                r.m.to_string(),
                r.n_rule.clone(),
                r.n.to_string(),
                r.s_max.to_string(),
                opt(r.accuracy),
                r.frr.to_string(),
                r.k.to_string(),
                r.none_passed.to_string(),
            ]
        }),
    )
}

pub fn format_exp2_csv(rows: &[Exp2Row]) -> Result<String> {
    write_csv(
        &EXP2_HEADER,
        rows.iter().map(|r| {
            vec![
                r.n.to_string(),
                opt(r.err_ssdl),
                opt(r.err_refine),
                opt(r.err_average),
                opt(r.err_true_average),
                r.m.to_string(),
                r.k.to_string(),
                r.columns.to_string(),
            ]
        }),
    )
}

fn write_csv(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Numerical(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::Numerical(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Numerical(e.to_string()))
}

/// Write `<dir>/<name>.csv` and its `<name>.meta.json` sidecar.
pub fn write_with_sidecar(dir: &Path, name: &str, csv_text: &str, config: &RunConfig, build: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let csv_path = dir.join(format!("{name}.csv"));
    std::fs::write(&csv_path, csv_text).map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    let sidecar = Sidecar {
        config: config.clone(),
        build: build.to_string(),
        output: format!("{name}.csv"),
    };
    io::write_json(&dir.join(format!("{name}.meta.json")), &sidecar)?;
    Ok(csv_path)
}

/// The leading `count` subspaces as a helper for callers that persist them.
pub fn recover_leading(samples: &SampleSet, s: usize, count: usize, jobs: usize, memory_budget: usize) -> Result<Vec<Subspace>> {
    let mut recovery = SubspaceRecovery::new(samples, s)?;
    recovery.plan(count, memory_budget);
    recovery.recover_range(0..count, jobs)
}

/// Normalized copy of each present column, for angular comparisons.
pub fn normalized_columns(est: &DictionaryEstimate) -> DMatrix<f64> {
    let mut m = est.matrix().clone();
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c /= n;
        }
    }
    m
}
