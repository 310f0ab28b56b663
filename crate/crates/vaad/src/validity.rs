//! External validity predicates: the pluggable test every init-phase value
//! must pass before a correct node will accept it. With `AlwaysTrue` the
//! protocol degenerates to the traditional unvalidated setting; the other
//! variants express application-level admissibility.

use serde::Deserialize;
use thiserror::Error;

use crate::geometry::{distance, GeometryError, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidityError {
    #[error("predicate dimension mismatch: {0}")]
    Geometry(#[from] GeometryError),
    #[error("box bounds must satisfy lo <= hi coordinate-wise")]
    InvertedBox,
    #[error("box bounds must share one dimension")]
    MismatchedBounds,
    #[error("finite-set predicate needs at least one allowed point")]
    EmptyAllowedSet,
    #[error("finite-set tolerance must be nonnegative and finite")]
    BadTolerance,
}

/// Simplex membership slack on the coordinate sum.
const SIMPLEX_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum ValidityPredicate {
    /// Accept everything (traditional, unvalidated agreement).
    AlwaysTrue,
    /// Axis-aligned box `[lo, hi]`, inclusive.
    Box { lo: Point, hi: Point },
    /// The standard simplex: nonnegative coordinates summing to 1 within
    /// a fixed slack.
    Simplex,
    /// Finite set of admissible points, each matched within `tol`.
    FiniteSet { allowed: Vec<Point>, tol: f64 },
}

impl ValidityPredicate {
    pub fn boxed(lo: Point, hi: Point) -> Result<Self, ValidityError> {
        if lo.dim() != hi.dim() {
            return Err(ValidityError::MismatchedBounds);
        }
        if lo.coords().iter().zip(hi.coords()).any(|(l, h)| l > h) {
            return Err(ValidityError::InvertedBox);
        }
        Ok(ValidityPredicate::Box { lo, hi })
    }

    pub fn finite_set(allowed: Vec<Point>, tol: f64) -> Result<Self, ValidityError> {
        if allowed.is_empty() {
            return Err(ValidityError::EmptyAllowedSet);
        }
        if !(tol.is_finite() && tol >= 0.0) {
            return Err(ValidityError::BadTolerance);
        }
        Ok(ValidityPredicate::FiniteSet { allowed, tol })
    }

    /// Whether `value` is admissible. Pure and deterministic; dimension
    /// mismatches are usage errors rather than rejections.
    pub fn accepts(&self, value: &Point) -> Result<bool, ValidityError> {
        match self {
            ValidityPredicate::AlwaysTrue => Ok(true),
            ValidityPredicate::Box { lo, hi } => {
                if value.dim() != lo.dim() {
                    return Err(GeometryError::DimensionMismatch {
                        expected: lo.dim(),
                        got: value.dim(),
                    }
                    .into());
                }
                Ok(value
                    .coords()
                    .iter()
                    .zip(lo.coords().iter().zip(hi.coords()))
                    .all(|(c, (l, h))| l <= c && c <= h))
            }
            ValidityPredicate::Simplex => {
                let sum: f64 = value.coords().iter().sum();
                Ok(value.coords().iter().all(|&c| c >= 0.0) && (sum - 1.0).abs() <= SIMPLEX_SUM_TOL)
            }
            ValidityPredicate::FiniteSet { allowed, tol } => {
                for candidate in allowed {
                    if distance(candidate, value)? <= *tol {
                        return Ok(true);
                    }
                }
                Ok(false)
            }
        }
    }
}

/// Serialization surface used by scenario files.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredicateSpec {
    #[default]
    AlwaysTrue,
    Box { lo: Point, hi: Point },
    Simplex,
    FiniteSet {
        allowed: Vec<Point>,
        #[serde(default = "default_finite_set_tol")]
        tol: f64,
    },
}

fn default_finite_set_tol() -> f64 {
    1e-9
}


impl PredicateSpec {
    pub fn build(&self) -> Result<ValidityPredicate, ValidityError> {
        match self {
            PredicateSpec::AlwaysTrue => Ok(ValidityPredicate::AlwaysTrue),
            PredicateSpec::Box { lo, hi } => ValidityPredicate::boxed(lo.clone(), hi.clone()),
            PredicateSpec::Simplex => Ok(ValidityPredicate::Simplex),
            PredicateSpec::FiniteSet { allowed, tol } => {
                ValidityPredicate::finite_set(allowed.clone(), *tol)
            }
        }
    }
}
