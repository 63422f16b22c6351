//! Sparse dictionary learning by subspace intersection.
//!
//! Samples `Y = D X` are drawn from a random unit-norm dictionary `D` and
//! sparse `±1` coefficients `X`. Each sample's support span is estimated from a
//! sample-weighted fourth-moment matrix, spans are intersected in small blocks to
//! expose single dictionary columns, and the resulting estimate is refined from
//! per-sample support, sign and averaging oracles.

pub mod error;
pub mod eval;
pub mod harness;
pub mod intersect;
pub mod io;
pub mod linalg;
pub mod oracle;
pub mod problem;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
pub use eval::{match_columns, Matching, MatchMode};
pub use intersect::{choose_ell, ssdl, CandidateSet, IntersectConfig};
pub use oracle::{DictionaryEstimate, RefinedDictionary, SupportEstimate};
pub use problem::{CoefficientMatrix, Dictionary, Problem, ProblemConfig, SampleSet};
pub use spectral::{subspace_distance, Subspace, SubspaceRecovery, SymMatrix};
