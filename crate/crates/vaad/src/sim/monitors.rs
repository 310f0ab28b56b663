//! Invariant monitors evaluated over a finished (or aborted) run.
//!
//! Each check re-derives one guarantee of the agreement protocol from the
//! collected node states and logs, independently of the acceptance logic that
//! enforced it during the run. Names describe the property checked; a run
//! "passes" only if every check does.

use std::collections::BTreeMap;

use crate::broadcast::InstanceId;
use crate::geometry::{self, AttributedSet, NodeId, Point};
use crate::messages::PayloadDigest;
use crate::protocol::{self, NodeState, Phase, ProtocolParams};
use crate::validity::ValidityPredicate;

/// Hull tolerance for validity checks against the admissible-input hull.
const VALIDITY_TOL: f64 = 1e-7;
/// Additive slack for diameter comparisons between rounds.
const DIAMETER_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl MonitorCheck {
    fn pass(name: &'static str) -> Self {
        MonitorCheck { name, passed: true, detail: String::new() }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        MonitorCheck { name, passed: false, detail }
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct MonitorReport {
    pub checks: Vec<MonitorCheck>,
}

impl MonitorReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&MonitorCheck> {
        self.checks.iter().find(|c| !c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&MonitorCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Everything the checks read, borrowed from the engine at quiescence.
pub(crate) struct MonitorContext<'a> {
    pub params: &'a ProtocolParams,
    pub predicate: &'a ValidityPredicate,
    /// Correct nodes and their final states.
    pub correct: Vec<(NodeId, &'a NodeState)>,
    /// Configured inputs of the correct nodes.
    pub correct_inputs: Vec<(NodeId, Point)>,
    /// Every initial value actually broadcast, including adversarial ones.
    pub effective_inputs: &'a [(NodeId, Point)],
    /// Per correct node: digest of each delivered broadcast instance.
    pub delivered: &'a BTreeMap<NodeId, BTreeMap<InstanceId, PayloadDigest>>,
    /// Rule-violating votes sent, as `(sender, round, vote)`.
    pub forged: &'a [(NodeId, u64, Point)],
    /// Per correct node: the sequence of halt estimates it adopted.
    pub halts: &'a BTreeMap<NodeId, Vec<u64>>,
}

impl MonitorContext<'_> {
    /// Admissible initial values that were actually broadcast.
    fn valid_inputs(&self) -> AttributedSet {
        AttributedSet::from_entries(
            self.effective_inputs
                .iter()
                .filter(|(_, v)| self.predicate.accepts(v).unwrap_or(false))
                .enumerate()
                .map(|(idx, (_, v))| (idx, v.clone())),
        )
    }

    /// Union of the correct nodes' accepted values for one round.
    fn round_union(&self, round: u64) -> AttributedSet {
        let mut union = AttributedSet::new();
        for (_, state) in &self.correct {
            if let Some(set) = state.values(round) {
                union.absorb(set);
            }
        }
        union
    }

    fn max_round(&self) -> u64 {
        self.correct
            .iter()
            .flat_map(|(_, s)| s.all_values().keys().copied())
            .max()
            .unwrap_or(0)
    }
}

pub(crate) fn evaluate(ctx: &MonitorContext) -> MonitorReport {
    let checks = vec![
        liveness(ctx),
        epsilon_agreement(ctx),
        validity_hull(ctx),
        round_bound(ctx),
        shrinking_diameter(ctx),
        viewpoint_intersection(ctx),
        initial_diameter_bound(ctx),
        halt_monotonicity(ctx),
        delta_validity(ctx),
        broadcast_agreement(ctx),
        vote_rule_recheck(ctx),
        forged_vote_rejection(ctx),
    ];
    MonitorReport { checks }
}

fn liveness(ctx: &MonitorContext) -> MonitorCheck {
    let stuck: Vec<NodeId> = ctx
        .correct
        .iter()
        .filter(|(_, s)| s.phase() != Phase::Terminated)
        .map(|(id, _)| *id)
        .collect();
    if stuck.is_empty() {
        MonitorCheck::pass("liveness")
    } else {
        MonitorCheck::fail("liveness", format!("correct nodes never terminated: {stuck:?}"))
    }
}

fn epsilon_agreement(ctx: &MonitorContext) -> MonitorCheck {
    let name = "epsilon_agreement";
    let outputs: Vec<(NodeId, &Point)> = ctx
        .correct
        .iter()
        .filter_map(|(id, s)| s.output().map(|o| (*id, o)))
        .collect();
    if outputs.len() < ctx.correct.len() {
        return MonitorCheck::fail(name, "not every correct node produced an output".into());
    }
    for (i, (id_a, a)) in outputs.iter().enumerate() {
        for (id_b, b) in &outputs[i + 1..] {
            let d = match geometry::distance(a, b) {
                Ok(d) => d,
                Err(e) => return MonitorCheck::fail(name, e.to_string()),
            };
            if d > ctx.params.epsilon {
                return MonitorCheck::fail(
                    name,
                    format!("outputs of {id_a} and {id_b} are {d} apart (epsilon {})", ctx.params.epsilon),
                );
            }
        }
    }
    MonitorCheck::pass(name)
}

fn validity_hull(ctx: &MonitorContext) -> MonitorCheck {
    let name = "validity_hull";
    let hull = ctx.valid_inputs();
    if hull.is_empty() {
        return MonitorCheck::fail(name, "no admissible initial value was broadcast".into());
    }
    for (id, state) in &ctx.correct {
        for (round, set) in state.all_values() {
            for (sender, value) in set.iter() {
                match geometry::in_hull(value, &hull, VALIDITY_TOL) {
                    Ok(true) => {}
                    Ok(false) => {
                        return MonitorCheck::fail(
                            name,
                            format!(
                                "node {id} round {round} accepted {value} from {sender} outside the admissible hull"
                            ),
                        )
                    }
                    Err(e) => return MonitorCheck::fail(name, e.to_string()),
                }
            }
        }
        if let Some(out) = state.output() {
            if !geometry::in_hull(out, &hull, VALIDITY_TOL).unwrap_or(false) {
                return MonitorCheck::fail(
                    name,
                    format!("node {id} output {out} outside the admissible hull"),
                );
            }
        }
    }
    MonitorCheck::pass(name)
}

fn round_bound(ctx: &MonitorContext) -> MonitorCheck {
    let name = "round_bound";
    let hull = ctx.valid_inputs();
    if hull.is_empty() {
        return MonitorCheck::fail(name, "no admissible initial value was broadcast".into());
    }
    let spread = match geometry::diameter(&hull) {
        Ok(d) => d,
        Err(e) => return MonitorCheck::fail(name, e.to_string()),
    };
    let bound = protocol::round_bound(spread, ctx.params.epsilon);
    for (id, state) in &ctx.correct {
        if state.round() > bound {
            return MonitorCheck::fail(
                name,
                format!(
                    "node {id} finished in round {} but {bound} rounds suffice for spread {spread}",
                    state.round()
                ),
            );
        }
    }
    MonitorCheck::pass(name)
}

fn shrinking_diameter(ctx: &MonitorContext) -> MonitorCheck {
    let name = "shrinking_diameter";
    let max_round = ctx.max_round();
    for r in 1..max_round {
        let this = ctx.round_union(r);
        let next = ctx.round_union(r + 1);
        if this.is_empty() || next.is_empty() {
            continue;
        }
        let (da, db) = match (geometry::diameter(&this), geometry::diameter(&next)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => continue,
        };
        if db > 0.5 * da + DIAMETER_SLACK {
            return MonitorCheck::fail(
                name,
                format!("round {r} union diameter {da} shrank only to {db} in round {}", r + 1),
            );
        }
    }
    MonitorCheck::pass(name)
}

fn viewpoint_intersection(ctx: &MonitorContext) -> MonitorCheck {
    let name = "viewpoint_intersection";
    let quorum = ctx.params.quorum();
    // All accepted vote citations across correct nodes, grouped by round.
    let mut by_round: BTreeMap<u64, Vec<(NodeId, NodeId, &AttributedSet)>> = BTreeMap::new();
    for (id, state) in &ctx.correct {
        for ((round, sender), citation) in state.accepted_citations() {
            by_round.entry(*round).or_default().push((*id, *sender, &citation.values));
        }
    }
    for (round, cited) in &by_round {
        for (i, (node_a, sender_a, set_a)) in cited.iter().enumerate() {
            for (node_b, sender_b, set_b) in &cited[i + 1..] {
                let common = set_a.intersection_len(set_b);
                if common < quorum {
                    return MonitorCheck::fail(
                        name,
                        format!(
                            "round {round}: votes from {sender_a} (at {node_a}) and {sender_b} (at {node_b}) cite only {common} common values"
                        ),
                    );
                }
            }
        }
    }
    MonitorCheck::pass(name)
}

fn initial_diameter_bound(ctx: &MonitorContext) -> MonitorCheck {
    let name = "initial_diameter_bound";
    let min_init = ctx
        .correct
        .iter()
        .filter_map(|(_, s)| s.init_diameter())
        .min_by(f64::total_cmp);
    let Some(min_init) = min_init else {
        return MonitorCheck::pass(name);
    };
    let bound = 3.0 * min_init + DIAMETER_SLACK;
    let round1 = ctx.round_union(1);
    let points: Vec<(NodeId, &Point)> = round1.iter().collect();
    for (i, (sa, a)) in points.iter().enumerate() {
        for (sb, b) in &points[i + 1..] {
            let d = geometry::distance(a, b).unwrap_or(f64::INFINITY);
            if d > bound {
                return MonitorCheck::fail(
                    name,
                    format!(
                        "round-1 votes from {sa} and {sb} are {d} apart; three times the smallest initial spread allows {bound}"
                    ),
                );
            }
        }
    }
    MonitorCheck::pass(name)
}

fn halt_monotonicity(ctx: &MonitorContext) -> MonitorCheck {
    let name = "halt_monotonicity";
    for (id, seq) in ctx.halts {
        if seq.windows(2).any(|w| w[1] > w[0]) {
            return MonitorCheck::fail(name, format!("node {id} raised its halt estimate: {seq:?}"));
        }
    }
    MonitorCheck::pass(name)
}

fn delta_validity(ctx: &MonitorContext) -> MonitorCheck {
    let name = "delta_validity";
    if !matches!(ctx.predicate, ValidityPredicate::AlwaysTrue) {
        return MonitorCheck::pass(name);
    }
    let correct_set = AttributedSet::from_entries(ctx.correct_inputs.iter().cloned());
    if correct_set.is_empty() {
        return MonitorCheck::pass(name);
    }
    let spread = match geometry::diameter(&correct_set) {
        Ok(d) => d,
        Err(e) => return MonitorCheck::fail(name, e.to_string()),
    };
    let bound = spread + DIAMETER_SLACK;
    for (sender, value) in ctx.round_union(1).iter() {
        let nearest = correct_set
            .points()
            .filter_map(|p| geometry::distance(value, p).ok())
            .min_by(f64::total_cmp)
            .unwrap_or(f64::INFINITY);
        if nearest > bound {
            return MonitorCheck::fail(
                name,
                format!(
                    "round-1 vote {value} from {sender} is {nearest} from the nearest correct input; allowed {bound}"
                ),
            );
        }
    }
    MonitorCheck::pass(name)
}

fn broadcast_agreement(ctx: &MonitorContext) -> MonitorCheck {
    let name = "broadcast_agreement";
    let mut seen: BTreeMap<InstanceId, (NodeId, PayloadDigest)> = BTreeMap::new();
    for (node, log) in ctx.delivered {
        for (instance, digest) in log {
            match seen.get(instance) {
                None => {
                    seen.insert(*instance, (*node, *digest));
                }
                Some((first_node, first)) if first != digest => {
                    return MonitorCheck::fail(
                        name,
                        format!(
                            "instance {instance} delivered as {} at node {first_node} but {} at node {node}",
                            first.short_hex(),
                            digest.short_hex()
                        ),
                    );
                }
                Some(_) => {}
            }
        }
    }
    MonitorCheck::pass(name)
}

fn vote_rule_recheck(ctx: &MonitorContext) -> MonitorCheck {
    let name = "vote_rule_recheck";
    for (id, state) in &ctx.correct {
        for ((round, sender), citation) in state.accepted_citations() {
            if *round == 1 {
                let pairs = ctx.params.elim_pairs(citation.values.len());
                let surviving = match geometry::elim(pairs, &citation.values) {
                    Ok(s) => s,
                    Err(e) => return MonitorCheck::fail(name, e.to_string()),
                };
                let spread = geometry::diameter(&citation.values).unwrap_or(0.0);
                let tol = protocol::round1_hull_tol(spread);
                if !geometry::in_hull(&citation.vote, &surviving, tol).unwrap_or(false) {
                    return MonitorCheck::fail(
                        name,
                        format!(
                            "node {id} accepted a round-1 vote from {sender} outside the eliminated hull of its citation"
                        ),
                    );
                }
            } else {
                let mean = match geometry::vote_mean(&citation.values) {
                    Ok(m) => m,
                    Err(e) => return MonitorCheck::fail(name, e.to_string()),
                };
                if mean != citation.vote {
                    return MonitorCheck::fail(
                        name,
                        format!(
                            "node {id} accepted a round-{round} vote from {sender} that is not the mean of its citation"
                        ),
                    );
                }
            }
        }
    }
    MonitorCheck::pass(name)
}

fn forged_vote_rejection(ctx: &MonitorContext) -> MonitorCheck {
    let name = "forged_vote_rejection";
    for (byz, round, vote) in ctx.forged {
        if *round < 2 {
            continue;
        }
        for (id, state) in &ctx.correct {
            if state.values(*round).and_then(|s| s.get(*byz)) == Some(vote) {
                return MonitorCheck::fail(
                    name,
                    format!("node {id} accepted the forged round-{round} vote {vote} from {byz}"),
                );
            }
        }
    }
    MonitorCheck::pass(name)
}
