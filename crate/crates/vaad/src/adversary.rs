//! Byzantine node behaviors and adversarial delivery scheduling.
//!
//! A faulty node is modeled as a wrapper that may run zero, one, or two
//! honest state machines internally and rewrites, suppresses, splits, or
//! fabricates the traffic they produce. The scheduler side independently
//! controls *when* every broadcast arrives; together they cover the failure
//! modes the agreement guarantees are claimed against, from silence through
//! protocol-legal-but-worst-case value selection to equivocation attempts.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use rand::SeedableRng as _;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{self, AttributedSet, NodeId, Point};
use crate::messages::{MessageTag, PayloadDigest, ProtocolMessage, ReportSet};
use crate::protocol::{NodeState, ProtocolError, ProtocolParams};
use crate::validity::ValidityPredicate;

/// What a node hands to the channel layer: either an ordinary broadcast or an
/// attempt to reach only some destinations. Honest nodes only ever broadcast;
/// restricted sends are adversarial and the channel decides how far to honor
/// them (an ideal channel with uniqueness coerces them back to broadcasts).
#[derive(Debug, Clone, PartialEq)]
pub enum Emission {
    Broadcast(ProtocolMessage),
    Restricted { msg: ProtocolMessage, dsts: Vec<NodeId> },
}

impl Emission {
    pub fn message(&self) -> &ProtocolMessage {
        match self {
            Emission::Broadcast(msg) => msg,
            Emission::Restricted { msg, .. } => msg,
        }
    }
}

/// Configured behavior for one faulty node slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdversaryStrategy {
    /// Sends nothing at all.
    Silent,
    /// Behaves honestly for all messages whose round is at most
    /// `after_round`, then stops sending (still receives).
    Crash { after_round: u64 },
    /// Runs the honest protocol seeded with a chosen admissible input
    /// instead of the configured one.
    ExtremeHonest { target: Point },
    /// Broadcasts an inadmissible input, then behaves honestly.
    InvalidInput { value: Point },
    /// Behaves honestly but adds `perturbation` to every vote it sends,
    /// breaking the published vote rule.
    ForgedVote { perturbation: Point },
    /// Protocol-legal worst case: every cited subset is chosen to drag the
    /// vote as far as possible in the `bias` direction.
    SkewedSubset { bias: Point },
    /// Attempts to place two different payloads under one broadcast slot by
    /// sending each to half the nodes. Meaningful only where the channel
    /// does not collapse restricted sends into broadcasts.
    Equivocator { first: Box<ProtocolMessage>, second: Box<ProtocolMessage> },
    /// Runs two honest machines with different inputs, showing each to its
    /// own node group and keeping their traffic separated. This is the
    /// split-brain behavior behind the resilience-boundary demonstration.
    Mirror {
        input_a: Point,
        input_b: Point,
        group_a: BTreeSet<NodeId>,
        group_b: BTreeSet<NodeId>,
    },
}

/// Which internal machines a strategy runs.
#[derive(Debug, Clone)]
enum Machinery {
    None,
    Honest(Box<NodeState>),
    Mirrored {
        side_a: Box<NodeState>,
        side_b: Box<NodeState>,
        /// Which side(s) emitted each of this node's own messages, so
        /// self-deliveries can be routed back to their origin.
        origin: BTreeMap<(MessageTag, PayloadDigest), (bool, bool)>,
    },
}

/// One faulty node: a strategy plus whatever internal state it needs.
#[derive(Debug, Clone)]
pub struct ByzantineNode {
    id: NodeId,
    params: ProtocolParams,
    strategy: AdversaryStrategy,
    machinery: Machinery,
    /// Every `(round, vote)` this node sent in violation of the vote rule.
    forged: Vec<(u64, Point)>,
}

fn dot(a: &Point, b: &Point) -> f64 {
    a.coords().iter().zip(b.coords()).map(|(x, y)| x * y).sum()
}

impl ByzantineNode {
    pub fn new(
        id: NodeId,
        params: ProtocolParams,
        predicate: ValidityPredicate,
        strategy: AdversaryStrategy,
    ) -> Result<Self, ProtocolError> {
        let machinery = match &strategy {
            AdversaryStrategy::Silent | AdversaryStrategy::Equivocator { .. } => Machinery::None,
            AdversaryStrategy::Mirror { .. } => Machinery::Mirrored {
                side_a: Box::new(NodeState::new(id, params.clone(), predicate.clone())?),
                side_b: Box::new(NodeState::new(id, params.clone(), predicate)?),
                origin: BTreeMap::new(),
            },
            _ => Machinery::Honest(Box::new(NodeState::new(id, params.clone(), predicate)?)),
        };
        Ok(ByzantineNode { id, params, strategy, machinery, forged: Vec::new() })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn strategy(&self) -> &AdversaryStrategy {
        &self.strategy
    }

    /// Votes sent in violation of the published vote rule, in send order.
    pub fn forged(&self) -> &[(u64, Point)] {
        &self.forged
    }

    /// The node's startup emissions. `input` is the input the configuration
    /// assigned to this slot; several strategies substitute their own.
    pub fn start(&mut self, input: &Point) -> Vec<Emission> {
        match &self.strategy {
            AdversaryStrategy::Silent => Vec::new(),
            AdversaryStrategy::Crash { .. }
            | AdversaryStrategy::ForgedVote { .. }
            | AdversaryStrategy::SkewedSubset { .. } => {
                vec![Emission::Broadcast(ProtocolMessage::InitValue { value: input.clone() })]
            }
            AdversaryStrategy::ExtremeHonest { target } => {
                vec![Emission::Broadcast(ProtocolMessage::InitValue { value: target.clone() })]
            }
            AdversaryStrategy::InvalidInput { value } => {
                vec![Emission::Broadcast(ProtocolMessage::InitValue { value: value.clone() })]
            }
            AdversaryStrategy::Equivocator { first, second } => {
                let n = self.params.n;
                let lower: Vec<NodeId> = (0..n / 2).collect();
                let upper: Vec<NodeId> = (n / 2..n).collect();
                vec![
                    Emission::Restricted { msg: (**first).clone(), dsts: lower },
                    Emission::Restricted { msg: (**second).clone(), dsts: upper },
                ]
            }
            AdversaryStrategy::Mirror { input_a, input_b, .. } => {
                let a = ProtocolMessage::InitValue { value: input_a.clone() };
                let b = ProtocolMessage::InitValue { value: input_b.clone() };
                let (a_out, b_out) = (vec![a], vec![b]);
                self.emit_mirrored(a_out, b_out)
            }
        }
    }

    /// Feeds one delivered broadcast to the strategy.
    pub fn handle(&mut self, sender: NodeId, msg: &ProtocolMessage) -> Vec<Emission> {
        match &self.strategy {
            AdversaryStrategy::Silent | AdversaryStrategy::Equivocator { .. } => Vec::new(),
            AdversaryStrategy::Crash { after_round } => {
                let after = *after_round;
                self.honest_step(sender, msg)
                    .into_iter()
                    .filter(|m| m.tag().round <= after)
                    .map(Emission::Broadcast)
                    .collect()
            }
            AdversaryStrategy::ExtremeHonest { .. } | AdversaryStrategy::InvalidInput { .. } => self
                .honest_step(sender, msg)
                .into_iter()
                .map(Emission::Broadcast)
                .collect(),
            AdversaryStrategy::ForgedVote { perturbation } => {
                let delta = perturbation.clone();
                let outgoing = self.honest_step(sender, msg);
                let mut emissions = Vec::new();
                for m in outgoing {
                    emissions.push(Emission::Broadcast(self.forge_vote(m, &delta)));
                }
                emissions
            }
            AdversaryStrategy::SkewedSubset { bias } => {
                let bias = bias.clone();
                let outgoing = self.honest_step(sender, msg);
                let mut emissions = Vec::new();
                for m in outgoing {
                    emissions.push(Emission::Broadcast(self.skew_message(m, &bias)));
                }
                emissions
            }
            AdversaryStrategy::Mirror { group_a, group_b, .. } => {
                let (to_a, to_b) = if sender == self.id {
                    match &self.machinery {
                        Machinery::Mirrored { origin, .. } => origin
                            .get(&(msg.tag(), msg.digest()))
                            .copied()
                            .unwrap_or((false, false)),
                        _ => unreachable!("mirror strategy always runs mirrored machinery"),
                    }
                } else {
                    (group_a.contains(&sender), group_b.contains(&sender))
                };
                let (mut a_out, mut b_out) = (Vec::new(), Vec::new());
                if let Machinery::Mirrored { side_a, side_b, .. } = &mut self.machinery {
                    if to_a {
                        a_out = side_a.handle(sender, msg).outgoing;
                    }
                    if to_b {
                        b_out = side_b.handle(sender, msg).outgoing;
                    }
                }
                self.emit_mirrored(a_out, b_out)
            }
        }
    }

    fn honest_step(&mut self, sender: NodeId, msg: &ProtocolMessage) -> Vec<ProtocolMessage> {
        match &mut self.machinery {
            Machinery::Honest(state) => state.handle(sender, msg).outgoing,
            _ => Vec::new(),
        }
    }

    /// Records origins and wraps each side's messages as restricted sends to
    /// its own group.
    fn emit_mirrored(&mut self, a_out: Vec<ProtocolMessage>, b_out: Vec<ProtocolMessage>) -> Vec<Emission> {
        let (group_a, group_b) = match &self.strategy {
            AdversaryStrategy::Mirror { group_a, group_b, .. } => {
                (group_a.iter().copied().collect::<Vec<_>>(), group_b.iter().copied().collect::<Vec<_>>())
            }
            _ => unreachable!("only the mirror strategy emits mirrored"),
        };
        let origin = match &mut self.machinery {
            Machinery::Mirrored { origin, .. } => origin,
            _ => unreachable!("mirror strategy always runs mirrored machinery"),
        };
        let mut emissions = Vec::new();
        for msg in a_out {
            origin.entry((msg.tag(), msg.digest())).or_insert((false, false)).0 = true;
            emissions.push(Emission::Restricted { msg, dsts: group_a.clone() });
        }
        for msg in b_out {
            origin.entry((msg.tag(), msg.digest())).or_insert((false, false)).1 = true;
            emissions.push(Emission::Restricted { msg, dsts: group_b.clone() });
        }
        emissions
    }

    fn forge_vote(&mut self, msg: ProtocolMessage, delta: &Point) -> ProtocolMessage {
        match msg {
            ProtocolMessage::Value { vote, values, reports, round } => {
                let coords: Vec<f64> = vote
                    .coords()
                    .iter()
                    .zip(delta.coords().iter().chain(std::iter::repeat(&0.0)))
                    .map(|(v, d)| v + d)
                    .collect();
                match Point::new(coords) {
                    Ok(forged) if forged != vote => {
                        self.forged.push((round, forged.clone()));
                        ProtocolMessage::Value { vote: forged, values, reports, round }
                    }
                    _ => ProtocolMessage::Value { vote, values, reports, round },
                }
            }
            other => other,
        }
    }

    fn skew_message(&mut self, msg: ProtocolMessage, bias: &Point) -> ProtocolMessage {
        match msg {
            ProtocolMessage::Report { values, round } => {
                ProtocolMessage::Report { values: self.top_quorum(&values, bias), round }
            }
            ProtocolMessage::Value { vote, values, reports, round } => self
                .skewed_value(bias, round)
                .unwrap_or(ProtocolMessage::Value { vote, values, reports, round }),
            other => other,
        }
    }

    /// The `n - t` accepted values best aligned with `bias` (ties to the
    /// lower sender).
    fn top_quorum(&self, values: &AttributedSet, bias: &Point) -> AttributedSet {
        let quorum = self.params.quorum();
        if values.len() <= quorum {
            return values.clone();
        }
        let mut scored: Vec<(NodeId, &Point)> = values.iter().collect();
        scored.sort_by(|(sa, pa), (sb, pb)| {
            dot(pb, bias).total_cmp(&dot(pa, bias)).then(sa.cmp(sb))
        });
        AttributedSet::from_entries(
            scored.into_iter().take(quorum).map(|(s, p)| (s, p.clone())),
        )
    }

    /// Rebuilds a vote message from the most bias-aligned quorum of accepted
    /// reports. The result still passes every admission check — subset
    /// selection and the vote that follows from it are the only freedoms the
    /// vote rule leaves.
    fn skewed_value(&self, bias: &Point, round: u64) -> Option<ProtocolMessage> {
        let state = match &self.machinery {
            Machinery::Honest(state) => state,
            _ => return None,
        };
        let prior = round.checked_sub(1)?;
        let accepted_reports = state.reports(prior)?;
        let accepted_values = state.values(prior)?;
        let quorum = self.params.quorum();
        if accepted_reports.len() < quorum {
            return None;
        }

        // Pick the quorum of reports whose cited means lean furthest along
        // the bias; their union is the smallest value set the message can
        // legally cite.
        let mut scored: Vec<(NodeId, &AttributedSet)> = accepted_reports.iter().collect();
        scored.sort_by(|(ra, va), (rb, vb)| {
            let score_a = geometry::vote_mean(va).map(|m| dot(&m, bias)).unwrap_or(f64::MIN);
            let score_b = geometry::vote_mean(vb).map(|m| dot(&m, bias)).unwrap_or(f64::MIN);
            score_b.total_cmp(&score_a).then(ra.cmp(rb))
        });
        let cited = ReportSet::from_entries(
            scored.into_iter().take(quorum).map(|(r, v)| (r, v.clone())),
        );
        let mut union = AttributedSet::new();
        for (_, content) in cited.iter() {
            union.absorb(content);
        }

        if round == 1 {
            let pairs = self.params.t.min(union.len().saturating_sub(1) / 2);
            let surviving = geometry::elim(pairs, &union).ok()?;
            let vote = surviving
                .points()
                .max_by(|a, b| dot(a, bias).total_cmp(&dot(b, bias)))?
                .clone();
            return Some(ProtocolMessage::Value { vote, values: union, reports: cited, round });
        }

        // Later rounds: the vote must be the exact mean, so the only lever is
        // padding the union with accepted values that pull the mean along the
        // bias, greedily while it improves.
        let mut extras: Vec<(NodeId, &Point)> = accepted_values
            .iter()
            .filter(|(s, _)| union.get(*s).is_none())
            .collect();
        extras.sort_by(|(sa, pa), (sb, pb)| {
            dot(pb, bias).total_cmp(&dot(pa, bias)).then(sa.cmp(sb))
        });
        let mut mean = geometry::vote_mean(&union).ok()?;
        for (sender, point) in extras {
            let mut candidate = union.clone();
            candidate.insert(sender, point.clone());
            let candidate_mean = geometry::vote_mean(&candidate).ok()?;
            if dot(&candidate_mean, bias) > dot(&mean, bias) {
                union = candidate;
                mean = candidate_mean;
            }
        }
        Some(ProtocolMessage::Value { vote: mean, values: union, reports: cited, round })
    }
}

/// Message-delay policy for a run. Every policy yields a finite delivery
/// time, preserving the model's eventual-delivery guarantee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulerPolicy {
    /// Every message arrives one tick after it is sent.
    Fifo,
    /// Uniform per-message extra delay in `0..=max_delay`, derived purely
    /// from the run seed and the message's global sequence number.
    RandomDelay { max_delay: u64 },
    /// Messages *to* any victim arrive `delay_factor` ticks later than
    /// everyone else's.
    TargetedDelay { victims: BTreeSet<NodeId>, delay_factor: u64 },
    /// Messages crossing between nodes that share no group are held until
    /// `release_time`; intra-group traffic and self-delivery flow normally.
    PartitionUntil { groups: Vec<BTreeSet<NodeId>>, release_time: u64 },
}

/// Delivery time for one link-layer message. Deterministic in all arguments;
/// `link_seq` is the message's global sequence number, which makes the random
/// policy reproducible without threading RNG state through the queue.
pub fn schedule(
    policy: &SchedulerPolicy,
    seed: u64,
    link_seq: u64,
    send_time: u64,
    src: NodeId,
    dst: NodeId,
) -> u64 {
    let base = send_time.saturating_add(1);
    match policy {
        SchedulerPolicy::Fifo => base,
        SchedulerPolicy::RandomDelay { max_delay } => {
            let mut bytes = [0u8; 32];
            bytes[0..8].copy_from_slice(&seed.to_le_bytes());
            bytes[8..16].copy_from_slice(&link_seq.to_le_bytes());
            bytes[16..24].copy_from_slice(b"linkdlay");
            let mut rng = ChaCha8Rng::from_seed(bytes);
            base.saturating_add(rng.random_range(0..=*max_delay))
        }
        SchedulerPolicy::TargetedDelay { victims, delay_factor } => {
            if victims.contains(&dst) {
                base.saturating_add(*delay_factor)
            } else {
                base
            }
        }
        SchedulerPolicy::PartitionUntil { groups, release_time } => {
            let joined = src == dst
                || groups.iter().any(|g| g.contains(&src) && g.contains(&dst));
            if joined {
                base
            } else {
                base.max(*release_time)
            }
        }
    }
}
