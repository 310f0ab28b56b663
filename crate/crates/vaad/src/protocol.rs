//! The per-node agreement state machine.
//!
//! Each node starts by broadcasting its input, gathers validated inputs and
//! witness reports for them, and then runs voting rounds: in every round it
//! collects a quorum of justified votes, re-votes with their coordinate-wise
//! mean, and reports what it accepted. Votes are *justified* — a round-1 vote
//! must lie in the convex hull of the sender's cited inputs after extreme-pair
//! elimination, and a later-round vote must equal the mean of the cited votes
//! bit for bit — so a faulty node's only remaining freedom is which quorum it
//! cites and when it speaks.
//!
//! The original formulation busy-waits on thresholds. Here every message
//! handler enqueues work and then drains to a fixpoint: messages whose
//! justification cannot be checked yet (citing values this node has not
//! accepted, or belonging to a future round) wait and are retried after every
//! acceptance, so delivery order cannot change the outcome, only its timing.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::geometry::{self, AttributedSet, GeometryError, NodeId, Point};
use crate::messages::{ProtocolMessage, ReportSet};
use crate::validity::{ValidityError, ValidityPredicate};

/// Tolerance scale for the round-1 hull-membership check.
const HULL_TOL_BASE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("resilience bound violated: need n >= 3t + 1, got n = {n}, t = {t}")]
    Resilience { n: usize, t: usize },
    #[error("need at least one node")]
    NoNodes,
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("epsilon must be positive and finite")]
    BadEpsilon,
    #[error("node id {id} out of range for n = {n}")]
    BadNodeId { id: NodeId, n: usize },
    #[error("node already started")]
    AlreadyStarted,
    #[error("input dimension {got} does not match configured dimension {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("input rejected by the validity predicate")]
    InvalidInput,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Validity(#[from] ValidityError),
}

/// Static protocol parameters shared by every node of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    pub n: usize,
    pub t: usize,
    pub m: usize,
    pub epsilon: f64,
    /// Set only by the resilience-boundary demonstration, where n = 3t makes
    /// the usual elimination precondition |set| >= 2t + 1 unsatisfiable:
    /// elimination rounds are clamped so at least one point survives.
    clamp_elim: bool,
}

impl ProtocolParams {
    pub fn new(n: usize, t: usize, m: usize, epsilon: f64) -> Result<Self, ProtocolError> {
        if n < 3 * t + 1 {
            return Err(ProtocolError::Resilience { n, t });
        }
        Self::validate_shape(n, m, epsilon)?;
        Ok(ProtocolParams { n, t, m, epsilon, clamp_elim: false })
    }

    /// Constructor for runs below the n >= 3t + 1 resilience bound. Only the
    /// packaged lower-bound demonstration should use this.
    pub fn sub_resilient(n: usize, t: usize, m: usize, epsilon: f64) -> Result<Self, ProtocolError> {
        Self::validate_shape(n, m, epsilon)?;
        Ok(ProtocolParams { n, t, m, epsilon, clamp_elim: true })
    }

    fn validate_shape(n: usize, m: usize, epsilon: f64) -> Result<(), ProtocolError> {
        if n == 0 {
            return Err(ProtocolError::NoNodes);
        }
        if m == 0 {
            return Err(ProtocolError::ZeroDimension);
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(ProtocolError::BadEpsilon);
        }
        Ok(())
    }

    /// Acceptance quorum: n - t.
    pub fn quorum(&self) -> usize {
        self.n - self.t
    }

    pub(crate) fn elim_pairs(&self, set_len: usize) -> usize {
        if self.clamp_elim && set_len < 2 * self.t + 1 {
            set_len.saturating_sub(1) / 2
        } else {
            self.t
        }
    }
}

/// Tolerance for the round-1 hull-membership check, scaled to the cited
/// set's spread.
pub(crate) fn round1_hull_tol(spread: f64) -> f64 {
    HULL_TOL_BASE * spread.max(1.0)
}

/// Rounds sufficient to shrink `diameter` below `epsilon` by halving, plus
/// one: `max(1, ceil(log2(3 * diameter / epsilon)) + 1)`. The factor 3 covers
/// how far apart two nodes' initial diameter estimates can be.
pub fn round_bound(diameter: f64, epsilon: f64) -> u64 {
    if diameter <= 0.0 {
        return 1;
    }
    let raw = (3.0 * diameter / epsilon).log2().ceil() + 1.0;
    if raw < 1.0 {
        1
    } else {
        raw as u64
    }
}

/// The `(t + 1)`-th smallest of the collected estimates, or `None` while
/// fewer than `quorum` are known.
fn halt_estimate(times: &BTreeMap<NodeId, u64>, t: usize, quorum: usize) -> Option<u64> {
    if times.len() < quorum {
        return None;
    }
    let mut values: Vec<u64> = times.values().copied().collect();
    values.sort_unstable();
    Some(values[t])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Running,
    Terminated,
}

/// State changes worth tracing, in the order they occurred.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeEvent {
    AcceptValue { round: u64, sender: NodeId },
    AcceptReport { round: u64, reporter: NodeId },
    RoundAdvance { round: u64 },
    HaltUpdate { halt: u64 },
    Terminate { round: u64 },
}

/// Everything a handler call produced: broadcasts to hand to the channel,
/// trace events, and the decision value if the node just terminated.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct StepOutput {
    pub outgoing: Vec<ProtocolMessage>,
    pub events: Vec<NodeEvent>,
    pub decided: Option<Point>,
}

impl StepOutput {
    pub fn state_changed(&self) -> bool {
        !self.events.is_empty() || !self.outgoing.is_empty()
    }
}

/// One vote message's full content: the vote and the value/report sets cited
/// to justify it. Retained for every accepted vote so invariant monitors can
/// re-verify the published vote rule after the fact.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueCitation {
    pub vote: Point,
    pub values: AttributedSet,
    pub reports: ReportSet,
}

/// One node's complete protocol state.
#[derive(Debug, Clone)]
pub struct NodeState {
    id: NodeId,
    params: ProtocolParams,
    predicate: ValidityPredicate,
    phase: Phase,
    started: bool,
    round: u64,
    current_vote: Option<Point>,
    output: Option<Point>,
    /// Accepted values per round; round 0 holds validated inputs.
    values: BTreeMap<u64, AttributedSet>,
    /// Accepted reports per round, keyed by reporter inside.
    reports: BTreeMap<u64, ReportSet>,
    /// Round-count estimates received, one per sender.
    termination_times: BTreeMap<NodeId, u64>,
    halt: Option<u64>,
    /// Rounds whose report this node has already broadcast.
    report_sent: BTreeSet<u64>,
    enough_sent: bool,
    /// Values and reports cited by this node's round-1 vote, frozen at the
    /// moment the vote was computed so the justification always verifies.
    init_values_snapshot: Option<AttributedSet>,
    init_reports_snapshot: Option<ReportSet>,
    /// Diameter of the accepted inputs at the moment the rounds estimate was
    /// computed; monitors compare later values against it.
    init_diameter: Option<f64>,
    waiting_values: BTreeMap<(u64, NodeId), ValueCitation>,
    waiting_reports: BTreeMap<(u64, NodeId), AttributedSet>,
    /// Full content of every accepted vote message, keyed by (round, sender).
    accepted_citations: BTreeMap<(u64, NodeId), ValueCitation>,
}

impl NodeState {
    pub fn new(id: NodeId, params: ProtocolParams, predicate: ValidityPredicate) -> Result<Self, ProtocolError> {
        if id >= params.n {
            return Err(ProtocolError::BadNodeId { id, n: params.n });
        }
        Ok(NodeState {
            id,
            params,
            predicate,
            phase: Phase::Init,
            started: false,
            round: 0,
            current_vote: None,
            output: None,
            values: BTreeMap::new(),
            reports: BTreeMap::new(),
            termination_times: BTreeMap::new(),
            halt: None,
            report_sent: BTreeSet::new(),
            enough_sent: false,
            init_values_snapshot: None,
            init_reports_snapshot: None,
            init_diameter: None,
            waiting_values: BTreeMap::new(),
            waiting_reports: BTreeMap::new(),
            accepted_citations: BTreeMap::new(),
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn halt(&self) -> Option<u64> {
        self.halt
    }

    pub fn output(&self) -> Option<&Point> {
        self.output.as_ref()
    }

    pub fn current_vote(&self) -> Option<&Point> {
        self.current_vote.as_ref()
    }

    pub fn values(&self, round: u64) -> Option<&AttributedSet> {
        self.values.get(&round)
    }

    pub fn reports(&self, round: u64) -> Option<&ReportSet> {
        self.reports.get(&round)
    }

    /// All accepted values, keyed by round.
    pub fn all_values(&self) -> &BTreeMap<u64, AttributedSet> {
        &self.values
    }

    /// All accepted reports, keyed by round.
    pub fn all_reports(&self) -> &BTreeMap<u64, ReportSet> {
        &self.reports
    }

    pub fn init_diameter(&self) -> Option<f64> {
        self.init_diameter
    }

    /// Content of every vote message this node has accepted.
    pub fn accepted_citations(&self) -> &BTreeMap<(u64, NodeId), ValueCitation> {
        &self.accepted_citations
    }

    fn quorum(&self) -> usize {
        self.params.quorum()
    }

    /// Broadcasts this node's input. Call exactly once, before any message
    /// handling; the input must match the configured dimension and pass the
    /// validity predicate (correct nodes never propose inadmissible values).
    pub fn start(&mut self, input: &Point) -> Result<StepOutput, ProtocolError> {
        if self.started {
            return Err(ProtocolError::AlreadyStarted);
        }
        if input.dim() != self.params.m {
            return Err(ProtocolError::InputDimension { expected: self.params.m, got: input.dim() });
        }
        if !self.predicate.accepts(input)? {
            return Err(ProtocolError::InvalidInput);
        }
        self.started = true;
        let mut out = StepOutput::default();
        out.outgoing.push(ProtocolMessage::InitValue { value: input.clone() });
        Ok(out)
    }

    /// Feeds one delivered broadcast through the state machine. `sender` is
    /// the broadcast's originator as vouched for by the channel layer.
    pub fn handle(&mut self, sender: NodeId, msg: &ProtocolMessage) -> StepOutput {
        let mut out = StepOutput::default();
        if self.phase == Phase::Terminated || sender >= self.params.n {
            return out;
        }
        match msg {
            ProtocolMessage::InitValue { value } => self.on_init_value(sender, value, &mut out),
            ProtocolMessage::Enough { estimate } => self.on_enough(sender, *estimate, &mut out),
            ProtocolMessage::Value { vote, values, reports, round } => {
                self.on_value(sender, vote, values, reports, *round)
            }
            ProtocolMessage::Report { values, round } => self.on_report(sender, values, *round),
        }
        self.drain(&mut out);
        out
    }

    fn on_init_value(&mut self, sender: NodeId, value: &Point, out: &mut StepOutput) {
        if value.dim() != self.params.m {
            return;
        }
        if !self.predicate.accepts(value).unwrap_or(false) {
            return;
        }
        if self.values.entry(0).or_default().insert(sender, value.clone()) {
            out.events.push(NodeEvent::AcceptValue { round: 0, sender });
        }
    }

    fn on_enough(&mut self, sender: NodeId, estimate: u64, _out: &mut StepOutput) {
        if estimate == 0 {
            return;
        }
        self.termination_times.entry(sender).or_insert(estimate);
    }

    fn on_value(
        &mut self,
        sender: NodeId,
        vote: &Point,
        values: &AttributedSet,
        reports: &ReportSet,
        round: u64,
    ) {
        if round == 0 || !self.value_shape_ok(vote, values, reports, round) {
            return;
        }
        self.waiting_values.entry((round, sender)).or_insert_with(|| ValueCitation {
            vote: vote.clone(),
            values: values.clone(),
            reports: reports.clone(),
        });
    }

    fn on_report(&mut self, reporter: NodeId, values: &AttributedSet, round: u64) {
        if !self.report_shape_ok(values) {
            return;
        }
        self.waiting_reports.entry((round, reporter)).or_insert_with(|| values.clone());
    }

    /// Content-only admission checks for a vote message. These depend only on
    /// the message itself, so a failure here is permanent and the message is
    /// dropped rather than queued.
    fn value_shape_ok(
        &self,
        vote: &Point,
        values: &AttributedSet,
        reports: &ReportSet,
        round: u64,
    ) -> bool {
        let quorum = self.quorum();
        if vote.dim() != self.params.m {
            return false;
        }
        if values.len() < quorum || reports.len() < quorum {
            return false;
        }
        if values.senders().any(|s| s >= self.params.n)
            || values.points().any(|p| p.dim() != self.params.m)
        {
            return false;
        }
        if reports.iter().any(|(r, _)| r >= self.params.n) {
            return false;
        }
        // Every cited report must itself cite only values present in the
        // message's value set.
        if !reports.iter().all(|(_, cited)| cited.is_subset_of(values)) {
            return false;
        }
        if round == 1 {
            let pairs = self.params.elim_pairs(values.len());
            let surviving = match geometry::elim(pairs, values) {
                Ok(s) => s,
                Err(_) => return false,
            };
            let spread = match geometry::diameter(values) {
                Ok(d) => d,
                Err(_) => return false,
            };
            let tol = round1_hull_tol(spread);
            geometry::in_hull(vote, &surviving, tol).unwrap_or(false)
        } else {
            match geometry::vote_mean(values) {
                Ok(mean) => &mean == vote,
                Err(_) => false,
            }
        }
    }

    fn report_shape_ok(&self, values: &AttributedSet) -> bool {
        values.len() >= self.quorum()
            && values.senders().all(|s| s < self.params.n)
            && values.points().all(|p| p.dim() == self.params.m)
    }

    /// State-dependent admission checks for a queued vote message; these can
    /// flip to true as the node accepts more values and reports.
    fn value_context_ready(&self, pending: &ValueCitation, round: u64) -> bool {
        if self.round < round {
            return false;
        }
        let prior_values = match self.values.get(&(round - 1)) {
            Some(v) => v,
            None => return false,
        };
        if !pending.values.is_subset_of(prior_values) {
            return false;
        }
        let prior_reports = match self.reports.get(&(round - 1)) {
            Some(r) => r,
            None => return false,
        };
        pending.reports.is_subset_of(prior_reports)
    }

    fn report_context_ready(&self, values: &AttributedSet, round: u64) -> bool {
        if self.round < round {
            return false;
        }
        match self.values.get(&round) {
            Some(accepted) => values.is_subset_of(accepted),
            None => false,
        }
    }

    /// Full admission predicate for a vote message against current state;
    /// exposed so tests can probe individual conditions.
    pub fn value_message_ready(
        &self,
        vote: &Point,
        values: &AttributedSet,
        reports: &ReportSet,
        round: u64,
    ) -> bool {
        round >= 1
            && self.value_shape_ok(vote, values, reports, round)
            && self.value_context_ready(
                &ValueCitation { vote: vote.clone(), values: values.clone(), reports: reports.clone() },
                round,
            )
    }

    /// Full admission predicate for a report message against current state.
    pub fn report_message_ready(&self, values: &AttributedSet, round: u64) -> bool {
        self.report_shape_ok(values) && self.report_context_ready(values, round)
    }

    /// Retries queued messages and fires threshold transitions until nothing
    /// changes. Always terminates: every iteration that continues has either
    /// accepted a message (finitely many exist) or advanced the round
    /// (bounded by the halt estimate).
    fn drain(&mut self, out: &mut StepOutput) {
        loop {
            if self.phase == Phase::Terminated {
                return;
            }
            let mut progressed = false;

            // Queued vote messages, in (round, sender) order.
            let value_keys: Vec<(u64, NodeId)> = self.waiting_values.keys().copied().collect();
            for key in value_keys {
                let ready = self.value_context_ready(&self.waiting_values[&key], key.0);
                if !ready {
                    continue;
                }
                let pending = self.waiting_values.remove(&key).expect("key just seen");
                let (round, sender) = key;
                if self.values.entry(round).or_default().insert(sender, pending.vote.clone()) {
                    self.accepted_citations.insert(key, pending);
                    out.events.push(NodeEvent::AcceptValue { round, sender });
                    progressed = true;
                    self.maybe_send_round_report(round, out);
                }
            }

            // Queued reports.
            let report_keys: Vec<(u64, NodeId)> = self.waiting_reports.keys().copied().collect();
            for key in report_keys {
                let ready = self.report_context_ready(&self.waiting_reports[&key], key.0);
                if !ready {
                    continue;
                }
                let values = self.waiting_reports.remove(&key).expect("key just seen");
                let (round, reporter) = key;
                if self.reports.entry(round).or_default().insert(reporter, values) {
                    out.events.push(NodeEvent::AcceptReport { round, reporter });
                    progressed = true;
                }
            }

            // Init round 0: the report goes out as soon as a quorum of
            // validated inputs is in, even if this node is already past init.
            if self.values.get(&0).is_some_and(|v| v.len() >= self.quorum())
                && !self.report_sent.contains(&0)
            {
                self.report_sent.insert(0);
                let snapshot = self.values[&0].clone();
                out.outgoing.push(ProtocolMessage::Report { values: snapshot, round: 0 });
                progressed = true;
            }

            // Init completion, first half: a quorum of round-0 reports fixes
            // this node's first vote and its rounds estimate. The cited sets
            // are frozen here so the round-1 justification always verifies at
            // other nodes, even if more inputs arrive before round 1 starts.
            if self.phase == Phase::Init && !self.enough_sent {
                let report_quorum =
                    self.reports.get(&0).is_some_and(|r| r.len() >= self.quorum());
                if report_quorum {
                    let values = self.values[&0].clone();
                    let pairs = self.params.elim_pairs(values.len());
                    let surviving = geometry::elim(pairs, &values)
                        .expect("quorum-sized input set survives elimination");
                    let vote = geometry::vote_mean(&surviving).expect("nonempty after elimination");
                    let spread = geometry::diameter(&values).expect("nonempty input set");
                    let estimate = round_bound(spread, self.params.epsilon);
                    self.current_vote = Some(vote);
                    self.init_diameter = Some(spread);
                    self.init_values_snapshot = Some(values);
                    self.init_reports_snapshot = Some(self.reports[&0].clone());
                    self.enough_sent = true;
                    out.outgoing.push(ProtocolMessage::Enough { estimate });
                    progressed = true;
                }
            }

            self.refresh_halt(out);

            // Init completion, second half: with the estimate out and a
            // quorum of estimates in, voting rounds begin. As on every round
            // entry, a node whose halt estimate is already satisfied decides
            // silently instead of broadcasting.
            if self.phase == Phase::Init
                && self.enough_sent
                && self.termination_times.len() >= self.quorum()
            {
                self.phase = Phase::Running;
                self.round = 1;
                out.events.push(NodeEvent::RoundAdvance { round: 1 });
                if self.halt.is_none_or(|h| self.round < h) {
                    out.outgoing.push(ProtocolMessage::Value {
                        vote: self.current_vote.clone().expect("vote fixed with the estimate"),
                        values: self.init_values_snapshot.clone().expect("snapshot fixed"),
                        reports: self.init_reports_snapshot.clone().expect("snapshot fixed"),
                        round: 1,
                    });
                }
                progressed = true;
            }

            // Round advance: a quorum of reports for the current round moves
            // the node to the next one with the mean of its accepted votes.
            if self.phase == Phase::Running {
                let report_quorum = self
                    .reports
                    .get(&self.round)
                    .is_some_and(|r| r.len() >= self.quorum());
                if report_quorum {
                    let basis = self.values[&self.round].clone();
                    let cited = self.reports[&self.round].clone();
                    let vote = geometry::vote_mean(&basis).expect("reported rounds have values");
                    self.round += 1;
                    self.current_vote = Some(vote.clone());
                    out.events.push(NodeEvent::RoundAdvance { round: self.round });
                    progressed = true;
                    // When the new round already satisfies the halt estimate
                    // the node terminates below without another broadcast.
                    if self.halt.is_none_or(|h| self.round < h) {
                        out.outgoing.push(ProtocolMessage::Value {
                            vote,
                            values: basis,
                            reports: cited,
                            round: self.round,
                        });
                    }
                }
            }

            // Termination: fires as soon as the round reaches the halt
            // estimate, including when a late estimate drops it.
            if self.phase == Phase::Running {
                if let Some(halt) = self.halt {
                    if self.round >= halt {
                        self.phase = Phase::Terminated;
                        let decision = self.current_vote.clone().expect("running nodes hold a vote");
                        self.output = Some(decision.clone());
                        out.events.push(NodeEvent::Terminate { round: self.round });
                        out.decided = Some(decision);
                        return;
                    }
                }
            }

            if !progressed {
                return;
            }
        }
    }

    /// Broadcasts this node's report for `round` the first time its accepted
    /// votes for the *current* round reach a quorum.
    fn maybe_send_round_report(&mut self, round: u64, out: &mut StepOutput) {
        if round == 0 || round != self.round || self.phase != Phase::Running {
            return;
        }
        if self.report_sent.contains(&round) {
            return;
        }
        if self.values.get(&round).is_some_and(|v| v.len() >= self.quorum()) {
            self.report_sent.insert(round);
            let snapshot = self.values[&round].clone();
            out.outgoing.push(ProtocolMessage::Report { values: snapshot, round });
        }
    }

    fn refresh_halt(&mut self, out: &mut StepOutput) {
        let new = halt_estimate(&self.termination_times, self.params.t, self.quorum());
        if let Some(new) = new {
            // Adding estimates can only move the (t+1)-th smallest down.
            debug_assert!(self.halt.is_none_or(|old| new <= old));
            if self.halt != Some(new) {
                self.halt = Some(new);
                out.events.push(NodeEvent::HaltUpdate { halt: new });
            }
        }
    }
}
