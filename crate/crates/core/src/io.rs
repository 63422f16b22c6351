//! File formats.
//!
//! Matrices are comma-separated, row-major, one row per line, no header, with
//! every value written in Rust's shortest round-trip decimal form so a write
//! followed by a read is exact. Support lists are one line per sample holding
//! the sorted element indices; an empty line is an empty support.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::oracle::SupportEstimate;
use crate::problem::{CoefficientMatrix, Dictionary, Problem, ProblemConfig, SampleSet};
use crate::spectral::Subspace;

pub const CONFIG_FILE: &str = "config.json";
pub const DICTIONARY_FILE: &str = "D.csv";
pub const COEFFICIENTS_FILE: &str = "X.csv";
pub const SAMPLES_FILE: &str = "Y.csv";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Parse a dense matrix. Blank lines are ignored; every row must have the same width.
pub fn parse_matrix_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut values = Vec::new();
    let mut width = None;
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::parse_at(line, e.to_string())
        })?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::parse_at(line, format!("row has {} fields, expected {w}", record.len())))
            }
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse_at(line, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse_at(line, format!("non-finite value {field:?}")));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    Ok(DMatrix::from_row_iterator(rows, cols, values))
}

pub fn format_matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 20);
    for r in 0..m.nrows() {
        if m.ncols() == 0 {
            continue;
        }
        for c in 0..m.ncols() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&m[(r, c)].to_string());
        }
        out.push('\n');
    }
    out
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    parse_matrix_csv(&read_text(path)?).map_err(|e| e.in_file(path))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_text(path, &format_matrix_csv(m))
}

/// Read a matrix that must have `rows` rows; an empty file reads as `rows × 0`.
pub fn read_matrix_with_rows(path: &Path, rows: usize) -> Result<DMatrix<f64>> {
    let m = read_matrix(path)?;
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(rows, 0));
    }
    if m.nrows() != rows {
        return Err(Error::Dimension {
            context: "matrix rows",
            expected: rows,
            found: m.nrows(),
        });
    }
    Ok(m)
}

/// Parse support lists: one line per sample, comma-separated element indices.
pub fn parse_supports(text: &str) -> Result<Vec<Vec<usize>>> {
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    body.split('\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix('\r').unwrap_or(line).trim();
            if line.is_empty() {
                return Ok(Vec::new());
            }
            line.split(',')
                .map(|f| {
                    f.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::parse_at(i + 1, format!("not an index: {f:?}")))
                })
                .collect()
        })
        .collect()
}

pub fn format_supports(supports: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for sup in supports {
        let line: Vec<String> = sup.iter().map(usize::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_supports(path: &Path, supports: &SupportEstimate) -> Result<()> {
    write_text(path, &format_supports(supports.per_sample()))
}

pub fn read_supports(path: &Path, k: usize) -> Result<SupportEstimate> {
    let lists = parse_supports(&read_text(path)?).map_err(|e| e.in_file(path))?;
    SupportEstimate::from_samples(k, lists)
}

/// Parse a dense `K × N` coefficient matrix with entries in `{-1, 0, 1}`.
pub fn parse_coefficients(text: &str) -> Result<CoefficientMatrix> {
    let dense = parse_matrix_csv(text)?;
    CoefficientMatrix::from_dense(&dense)
}

/// `candidate,block` rows under a header.
pub fn format_provenance(blocks: &[usize]) -> String {
    let mut out = String::from("candidate,block\n");
    for (c, b) in blocks.iter().enumerate() {
        out.push_str(&format!("{c},{b}\n"));
    }
    out
}

pub fn parse_provenance(text: &str) -> Result<Vec<usize>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::parse(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["candidate", "block"] {
        return Err(Error::parse_at(1, "expected header candidate,block"));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse_at(i + 2, e.to_string()))?;
        let field = |n: usize| -> Result<usize> {
            record
                .get(n)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::parse_at(i + 2, "expected two unsigned integers"))
        };
        if field(0)? != i {
            return Err(Error::parse_at(i + 2, "candidates must be numbered 0, 1, 2, ..."));
        }
        out.push(field(1)?);
    }
    Ok(out)
}

pub fn subspace_file(dir: &Path, j: usize) -> PathBuf {
    dir.join(format!("S_{j}.csv"))
}

pub fn write_subspace(dir: &Path, j: usize, s: &Subspace) -> Result<()> {
    write_matrix(&subspace_file(dir, j), s.basis())
}

pub fn read_subspace(dir: &Path, j: usize) -> Result<Subspace> {
    let path = subspace_file(dir, j);
    Subspace::from_orthonormal(read_matrix(&path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConfigFormat {
    Json,
    Toml,
}

impl ConfigFormat {
    /// TOML for a `.toml` extension, JSON otherwise.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("toml") => ConfigFormat::Toml,
            _ => ConfigFormat::Json,
        }
    }
}

pub fn parse_config<T: DeserializeOwned>(text: &str, format: ConfigFormat) -> Result<T> {
    match format {
        ConfigFormat::Json => serde_json::from_str(text).map_err(|e| Error::Parse {
            path: None,
            line: Some(e.line()),
            message: e.to_string(),
        }),
        ConfigFormat::Toml => toml::from_str(text).map_err(|e| Error::parse(e.message().to_string())),
    }
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_config(&read_text(path)?, ConfigFormat::for_path(path)).map_err(|e| e.in_file(path))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Write `config.json`, `D.csv`, dense `X.csv` and `Y.csv`.
pub fn write_problem(dir: &Path, problem: &Problem) -> Result<()> {
    write_json(&dir.join(CONFIG_FILE), &problem.config)?;
    write_matrix(&dir.join(DICTIONARY_FILE), problem.dictionary.matrix())?;
    write_matrix(&dir.join(COEFFICIENTS_FILE), &problem.coefficients.to_dense())?;
    write_matrix(&dir.join(SAMPLES_FILE), problem.samples.matrix())
}

/// Ground truth without the samples: `config.json`, `D.csv`, `X.csv`.
pub struct Truth {
    pub config: ProblemConfig,
    pub dictionary: Dictionary,
    pub coefficients: CoefficientMatrix,
}

pub fn read_truth(dir: &Path) -> Result<Truth> {
    let config: ProblemConfig = load_config(&dir.join(CONFIG_FILE))?;
    let dictionary = Dictionary::new(read_matrix(&dir.join(DICTIONARY_FILE))?)?;
    let x_path = dir.join(COEFFICIENTS_FILE);
    let coefficients = parse_coefficients(&read_text(&x_path)?).map_err(|e| e.in_file(&x_path))?;
    if dictionary.m() != config.m || dictionary.k() != config.k {
        return Err(Error::Dimension {
            context: "dictionary shape against config",
            expected: config.m * config.k,
            found: dictionary.m() * dictionary.k(),
        });
    }
    if coefficients.k() != config.k || coefficients.n() != config.n || coefficients.s() != config.s {
        return Err(Error::Dimension {
            context: "coefficient shape against config",
            expected: config.n,
            found: coefficients.n(),
        });
    }
    Ok(Truth {
        config,
        dictionary,
        coefficients,
    })
}

pub fn read_samples(dir: &Path) -> Result<SampleSet> {
    let y = read_matrix(&dir.join(SAMPLES_FILE))?;
    let mut set = SampleSet::new(y);
    if let Ok(cfg) = load_config::<ProblemConfig>(&dir.join(CONFIG_FILE)) {
        if cfg.m == set.m() && cfg.n == set.n() {
            set.origin = Some(cfg);
        }
    }
    Ok(set)
}

pub fn read_problem(dir: &Path) -> Result<Problem> {
    let truth = read_truth(dir)?;
    let samples = read_samples(dir)?;
    if samples.m() != truth.config.m || samples.n() != truth.config.n {
        return Err(Error::Dimension {
            context: "sample shape against config",
            expected: truth.config.n,
            found: samples.n(),
        });
    }
    Ok(Problem {
        config: truth.config,
        dictionary: truth.dictionary,
        coefficients: truth.coefficients,
        samples,
    })
}
