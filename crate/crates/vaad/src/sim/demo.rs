//! The packaged resilience-boundary demonstration.
//!
//! With n = 3t the protocol's guarantees genuinely fail: one faulty node can
//! show a different face to each half of a partitioned network, and both
//! halves terminate with outputs farther apart than the agreement distance.
//! The same split-brain node and the same partition shape at n = 3t + 1 are
//! absorbed — the channel's uniqueness rule collapses the two faces into one
//! and every monitor passes. Running both back to back demonstrates (without
//! proving) that the resilience bound is tight.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{run, SimConfig, SimError, SimResult};
use crate::adversary::{AdversaryStrategy, SchedulerPolicy};
use crate::geometry::{self, NodeId, Point};
use crate::validity::ValidityPredicate;

pub const DEMO_EPSILON: f64 = 0.5;
pub const DEMO_DIMENSION: usize = 2;
/// Far past both groups' termination; cross-partition traffic sits in the
/// queue until then and is drained into already-terminated nodes.
const RELEASE_TIME: u64 = 10_000;

/// Both runs plus the derived cluster report.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoOutcome {
    /// The two sampled admissible inputs `(v1, v2)`.
    pub inputs: (Point, Point),
    /// The n = 3t run (monitors recorded but not enforced).
    pub demo: SimResult,
    /// Output clusters of the demo run: representative plus members.
    pub clusters: Vec<(Point, Vec<NodeId>)>,
    /// Smallest distance between cluster representatives.
    pub separation: f64,
    /// The n = 3t + 1 run under the same schedule; all monitors enforced.
    pub contrast: SimResult,
}

/// Samples `v1` strictly inside `(0,1)^m` and `v2` strictly inside
/// `(ε+1, ε+2)^m`. Every coordinate gap exceeds ε, so dist(v1, v2) > ε.
pub fn sample_inputs(seed: u64) -> (Point, Point) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut low = Vec::with_capacity(DEMO_DIMENSION);
    let mut high = Vec::with_capacity(DEMO_DIMENSION);
    for _ in 0..DEMO_DIMENSION {
        low.push(0.001 + 0.998 * rng.random::<f64>());
    }
    for _ in 0..DEMO_DIMENSION {
        high.push(DEMO_EPSILON + 1.0 + 0.001 + 0.998 * rng.random::<f64>());
    }
    (Point::new(low).expect("finite"), Point::new(high).expect("finite"))
}

fn mirror(v1: &Point, v2: &Point, group_a: BTreeSet<NodeId>, group_b: BTreeSet<NodeId>) -> AdversaryStrategy {
    AdversaryStrategy::Mirror {
        input_a: v1.clone(),
        input_b: v2.clone(),
        group_a,
        group_b,
    }
}

fn finite_set(v1: &Point, v2: &Point) -> ValidityPredicate {
    ValidityPredicate::finite_set(vec![v1.clone(), v2.clone()], 1e-9).expect("two points")
}

/// The n = 3t configuration: node 0 holds v1, node 1 holds v2, and node 2
/// mirrors each to its own side of the partition.
pub fn demo_config(seed: u64) -> SimConfig {
    let (v1, v2) = sample_inputs(seed);
    let group_a = BTreeSet::from([0, 2]);
    let group_b = BTreeSet::from([1, 2]);
    let mut config = SimConfig::new(
        3,
        1,
        DEMO_DIMENSION,
        DEMO_EPSILON,
        vec![v1.clone(), v2.clone(), v1.clone()],
    );
    config.seed = seed;
    config.adversaries =
        BTreeMap::from([(2, mirror(&v1, &v2, group_a.clone(), group_b.clone()))]);
    config.scheduler =
        SchedulerPolicy::PartitionUntil { groups: vec![group_a, group_b], release_time: RELEASE_TIME };
    config.predicate = finite_set(&v1, &v2);
    config.lower_bound_demo = true;
    config.monitors_enabled = false;
    config
}

/// The same split-brain node and partition shape with one extra correct
/// node: n = 3t + 1, nodes 0 and 1 holding v1 and node 3 holding v2.
pub fn contrast_config(seed: u64) -> SimConfig {
    let (v1, v2) = sample_inputs(seed);
    let group_a = BTreeSet::from([0, 1, 2]);
    let group_b = BTreeSet::from([2, 3]);
    let mut config = SimConfig::new(
        4,
        1,
        DEMO_DIMENSION,
        DEMO_EPSILON,
        vec![v1.clone(), v1.clone(), v1.clone(), v2.clone()],
    );
    config.seed = seed;
    config.adversaries =
        BTreeMap::from([(2, mirror(&v1, &v2, group_a.clone(), group_b.clone()))]);
    config.scheduler =
        SchedulerPolicy::PartitionUntil { groups: vec![group_a, group_b], release_time: RELEASE_TIME };
    config.predicate = finite_set(&v1, &v2);
    config
}

/// Greedy grouping of outputs: a node joins the first cluster whose
/// representative is within `epsilon`, else founds a new one.
pub fn clusters(outputs: &BTreeMap<NodeId, Point>, epsilon: f64) -> Vec<(Point, Vec<NodeId>)> {
    let mut found: Vec<(Point, Vec<NodeId>)> = Vec::new();
    for (id, point) in outputs {
        let near = found.iter_mut().find(|(rep, _)| {
            geometry::distance(rep, point).map(|d| d <= epsilon).unwrap_or(false)
        });
        match near {
            Some((_, members)) => members.push(*id),
            None => found.push((point.clone(), vec![*id])),
        }
    }
    found
}

/// Smallest pairwise distance between cluster representatives; zero when
/// there are fewer than two clusters.
pub fn separation(found: &[(Point, Vec<NodeId>)]) -> f64 {
    let mut min = f64::INFINITY;
    for (i, (a, _)) in found.iter().enumerate() {
        for (b, _) in &found[i + 1..] {
            if let Ok(d) = geometry::distance(a, b) {
                min = min.min(d);
            }
        }
    }
    if min.is_finite() {
        min
    } else {
        0.0
    }
}

/// Runs the demonstration and its contrast. The contrast run enforces its
/// monitors, so a regression there surfaces as an error.
pub fn run_demo(seed: u64) -> Result<DemoOutcome, SimError> {
    let inputs = sample_inputs(seed);
    let demo = run(demo_config(seed))?;
    let found = clusters(&demo.outputs, DEMO_EPSILON);
    let separation = separation(&found);
    let contrast = run(contrast_config(seed))?;
    Ok(DemoOutcome { inputs, demo, clusters: found, separation, contrast })
}
