//! Geometry kernel: points in Euclidean space, sender-attributed point sets,
//! and the handful of operations the agreement protocol is built from —
//! pairwise distance, set diameter, deterministic furthest-pair selection,
//! iterated extreme-pair elimination, coordinate-wise mean votes, and convex
//! hull membership.
//!
//! Everything here is bit-deterministic: ties are broken by fixed lexicographic
//! rules, sums are accumulated in ascending sender-id order, and the hull test
//! uses a finitely terminating active-set solver. Two runs over the same data
//! produce identical bits, which the rest of the crate relies on for
//! reproducible simulation and for exact vote-equality checks.

mod hull;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a protocol participant, in `[0, n)`.
pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point must have at least one coordinate")]
    EmptyPoint,
    #[error("coordinate {index} is not finite")]
    NonFiniteCoordinate { index: usize },
    #[error("operation needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
}

/// A point in `R^m` with finite coordinates.
///
/// Construction rejects NaN and infinities and canonicalizes `-0.0` to `+0.0`,
/// so equality on `Point` is simultaneously numeric and bitwise. That property
/// is load-bearing: the protocol compares received votes against recomputed
/// means for *exact* equality, and distance zero must coincide with equality.
#[derive(Debug, Clone, Serialize)]
#[serde(transparent)]
pub struct Point {
    coords: Vec<f64>,
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self, GeometryError> {
        if coords.is_empty() {
            return Err(GeometryError::EmptyPoint);
        }
        for (index, c) in coords.iter().enumerate() {
            if !c.is_finite() {
                return Err(GeometryError::NonFiniteCoordinate { index });
            }
        }
        let coords = coords.into_iter().map(|c| if c == 0.0 { 0.0 } else { c }).collect();
        Ok(Point { coords })
    }

    /// Convenience constructor for literal coordinates; panics on non-finite
    /// input, so only use it where the coordinates are statically known.
    pub fn from_slice(coords: &[f64]) -> Self {
        Point::new(coords.to_vec()).expect("finite literal coordinates")
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Lexicographic comparison, coordinate by coordinate. Total on finite
    /// points; shorter points order before longer ones on a common prefix.
    pub fn lex_cmp(&self, other: &Point) -> Ordering {
        for (a, b) in self.coords.iter().zip(other.coords.iter()) {
            match a.partial_cmp(b).expect("finite coordinates are totally ordered") {
                Ordering::Equal => continue,
                non_eq => return non_eq,
            }
        }
        self.coords.len().cmp(&other.coords.len())
    }
}

impl PartialEq for Point {
    fn eq(&self, other: &Self) -> bool {
        // No NaN and no -0.0 by construction, so numeric equality on the
        // coordinate vectors is exactly bitwise equality.
        self.coords == other.coords
    }
}

impl Eq for Point {}

impl std::hash::Hash for Point {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        for c in &self.coords {
            c.to_bits().hash(state);
        }
    }
}

impl PartialOrd for Point {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Point {
    fn cmp(&self, other: &Self) -> Ordering {
        self.lex_cmp(other)
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.coords.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl<'de> Deserialize<'de> for Point {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let coords = Vec::<f64>::deserialize(deserializer)?;
        Point::new(coords).map_err(serde::de::Error::custom)
    }
}

/// An unordered pair of points in canonical order: `first <= second`
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointPair {
    first: Point,
    second: Point,
}

impl PointPair {
    pub fn new(a: Point, b: Point) -> Self {
        if a.lex_cmp(&b) == Ordering::Greater {
            PointPair { first: b, second: a }
        } else {
            PointPair { first: a, second: b }
        }
    }

    pub fn first(&self) -> &Point {
        &self.first
    }

    pub fn second(&self) -> &Point {
        &self.second
    }

    fn lex_cmp(&self, other: &PointPair) -> Ordering {
        self.first
            .lex_cmp(&other.first)
            .then_with(|| self.second.lex_cmp(&other.second))
    }
}

/// A set of points keyed by the sender that contributed each one. At most one
/// point per sender; iteration is always in ascending sender order, which is
/// what makes downstream mean computations reproducible.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttributedSet {
    entries: BTreeMap<NodeId, Point>,
}

impl AttributedSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<I: IntoIterator<Item = (NodeId, Point)>>(entries: I) -> Self {
        let mut set = Self::new();
        for (sender, point) in entries {
            set.insert(sender, point);
        }
        set
    }

    /// Adds `point` under `sender` unless the sender already has an entry.
    /// Returns whether the set changed.
    pub fn insert(&mut self, sender: NodeId, point: Point) -> bool {
        match self.entries.entry(sender) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(point);
                true
            }
            std::collections::btree_map::Entry::Occupied(_) => false,
        }
    }

    pub fn remove(&mut self, sender: NodeId) -> Option<Point> {
        self.entries.remove(&sender)
    }

    pub fn get(&self, sender: NodeId) -> Option<&Point> {
        self.entries.get(&sender)
    }

    pub fn contains_entry(&self, sender: NodeId, point: &Point) -> bool {
        self.entries.get(&sender) == Some(point)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Point)> {
        self.entries.iter().map(|(&s, p)| (s, p))
    }

    pub fn senders(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.entries.keys().copied()
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.entries.values()
    }

    /// Subset by matched entry: every `(sender, point)` of `self` must appear
    /// in `other` with an identical point.
    pub fn is_subset_of(&self, other: &AttributedSet) -> bool {
        self.iter().all(|(s, p)| other.contains_entry(s, p))
    }

    /// Number of entries present in both sets with identical sender *and*
    /// point.
    pub fn intersection_len(&self, other: &AttributedSet) -> usize {
        self.iter().filter(|(s, p)| other.contains_entry(*s, p)).count()
    }

    /// Merges `other` into `self`, keeping existing entries on sender clashes.
    pub fn absorb(&mut self, other: &AttributedSet) {
        for (s, p) in other.iter() {
            self.insert(s, p.clone());
        }
    }
}

fn require_same_dim(expected: usize, got: usize) -> Result<(), GeometryError> {
    if expected == got {
        Ok(())
    } else {
        Err(GeometryError::DimensionMismatch { expected, got })
    }
}

fn squared_distance(a: &Point, b: &Point) -> f64 {
    a.coords
        .iter()
        .zip(b.coords.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Euclidean distance between two points of equal dimension.
pub fn distance(a: &Point, b: &Point) -> Result<f64, GeometryError> {
    require_same_dim(a.dim(), b.dim())?;
    Ok(squared_distance(a, b).sqrt())
}

fn check_uniform_dim(set: &AttributedSet) -> Result<usize, GeometryError> {
    let mut points = set.points();
    let first = points.next().ok_or(GeometryError::TooFewPoints { needed: 1, got: 0 })?;
    let dim = first.dim();
    for p in points {
        require_same_dim(dim, p.dim())?;
    }
    Ok(dim)
}

/// Maximum pairwise distance over the set. Zero for a singleton.
pub fn diameter(set: &AttributedSet) -> Result<f64, GeometryError> {
    check_uniform_dim(set)?;
    let entries: Vec<&Point> = set.points().collect();
    let mut best = 0.0f64;
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            let d = squared_distance(entries[i], entries[j]);
            if d > best {
                best = d;
            }
        }
    }
    Ok(best.sqrt())
}

/// Furthest pair by sender, used by `elim` so that exactly one entry per pair
/// member is removed even when several senders contributed identical points.
///
/// Among maximal-distance pairs the winner is the one whose canonically
/// ordered point pair is lexicographically smallest; an exact tie on points
/// (duplicate entries) falls back to the lowest sender pair, which is the
/// first one encountered by the ascending scan.
fn furthest_senders(set: &AttributedSet) -> Result<(NodeId, NodeId), GeometryError> {
    check_uniform_dim(set)?;
    if set.len() < 2 {
        return Err(GeometryError::TooFewPoints { needed: 2, got: set.len() });
    }
    let entries: Vec<(NodeId, &Point)> = set.iter().collect();
    let mut best: Option<(f64, PointPair, (NodeId, NodeId))> = None;
    for i in 0..entries.len() {
        for j in (i + 1)..entries.len() {
            let (si, pi) = entries[i];
            let (sj, pj) = entries[j];
            let d = squared_distance(pi, pj);
            let replace = match &best {
                None => true,
                Some((bd, bpair, _)) => {
                    if d > *bd {
                        true
                    } else if d == *bd {
                        let pair = PointPair::new(pi.clone(), pj.clone());
                        pair.lex_cmp(bpair) == Ordering::Less
                    } else {
                        false
                    }
                }
            };
            if replace {
                best = Some((d, PointPair::new(pi.clone(), pj.clone()), (si, sj)));
            }
        }
    }
    Ok(best.expect("set has at least two entries").2)
}

/// The two most distant points of the set, canonically ordered, with ties
/// broken lexicographically on the ordered pair.
pub fn furthest(set: &AttributedSet) -> Result<PointPair, GeometryError> {
    let (a, b) = furthest_senders(set)?;
    Ok(PointPair::new(
        set.get(a).expect("sender present").clone(),
        set.get(b).expect("sender present").clone(),
    ))
}

/// Removes the furthest pair `pairs` times. Requires `|set| >= 2*pairs + 1` so
/// that at least one point survives.
pub fn elim(pairs: usize, set: &AttributedSet) -> Result<AttributedSet, GeometryError> {
    let needed = 2 * pairs + 1;
    if set.len() < needed {
        return Err(GeometryError::TooFewPoints { needed, got: set.len() });
    }
    let mut work = set.clone();
    for _ in 0..pairs {
        let (a, b) = furthest_senders(&work)?;
        work.remove(a);
        work.remove(b);
    }
    Ok(work)
}

/// Coordinate-wise mean, summed in ascending sender order so the result is
/// bit-identical no matter who computes it.
pub fn vote_mean(set: &AttributedSet) -> Result<Point, GeometryError> {
    let dim = check_uniform_dim(set)?;
    let mut sums = vec![0.0f64; dim];
    for (_, p) in set.iter() {
        for (acc, c) in sums.iter_mut().zip(p.coords()) {
            *acc += c;
        }
    }
    let count = set.len() as f64;
    Point::new(sums.into_iter().map(|s| s / count).collect())
}

/// Distance from `point` to the convex hull of the set, to roughly machine
/// precision. Zero when the point lies inside.
pub fn hull_distance(point: &Point, set: &AttributedSet) -> Result<f64, GeometryError> {
    let dim = check_uniform_dim(set)?;
    require_same_dim(dim, point.dim())?;
    let points: Vec<&Point> = set.points().collect();
    Ok(hull::distance_to_hull(point, &points))
}

/// Approximate convex hull membership with a two-sided guarantee: always true
/// when the point is within `tol` of the hull, always false when it is further
/// than `10 * tol`. Inside the annulus the answer is implementation-defined
/// but deterministic — the computed hull distance is compared against
/// `5 * tol`, the midpoint of the allowed band.
pub fn in_hull(point: &Point, set: &AttributedSet, tol: f64) -> Result<bool, GeometryError> {
    let d = hull_distance(point, set)?;
    Ok(d <= 5.0 * tol)
}
