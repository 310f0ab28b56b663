//! Deterministic discrete-event simulator for whole-network runs.
//!
//! Time is a virtual integer clock. Every message in flight sits in a single
//! queue keyed by `(delivery_time, sequence)`, where the sequence number is
//! assigned at send time; popping the smallest key gives a total order, so a
//! run is a pure function of its configuration. The scheduler policy decides
//! delivery times and the run seed feeds the random policy, which makes
//! adversarial schedules reproducible without any shared RNG state.
//!
//! The channel layer comes in two interchangeable modes: an idealized
//! broadcast with built-in sender uniqueness, and the echo/ready protocol
//! that enforces the same interface against equivocating senders. After the
//! queue drains, a set of monitors re-checks the agreement guarantees from
//! the final node states.

pub mod demo;
pub mod metrics;
pub mod monitors;
pub mod trace;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{self, AdversaryStrategy, ByzantineNode, Emission, SchedulerPolicy};
use crate::broadcast::{ChannelVerdict, IdealChannel, InstanceId, LinkMessage, LinkBody, RbcState};
use crate::geometry::{self, AttributedSet, NodeId, Point};
use crate::messages::{MessageTag, PayloadDigest, ProtocolMessage};
use crate::protocol::{NodeEvent, NodeState, ProtocolError, ProtocolParams};
use crate::validity::ValidityPredicate;

use monitors::{MonitorContext, MonitorReport};
use trace::TraceCollector;

pub const DEFAULT_MAX_EVENTS: u64 = 10_000_000;

/// Which channel implementation carries protocol messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroadcastMode {
    /// One queue event per destination, with sender uniqueness enforced
    /// centrally: a second payload for an already-used slot is suppressed.
    Ideal,
    /// The echo/ready broadcast: every payload travels as link messages and
    /// uniqueness is enforced by quorum intersection at the receivers.
    Bracha,
}

/// Full description of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub t: usize,
    pub m: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub broadcast_mode: BroadcastMode,
    /// One input per node id; adversarial slots may ignore theirs.
    pub inputs: Vec<Point>,
    pub adversaries: BTreeMap<NodeId, AdversaryStrategy>,
    pub scheduler: SchedulerPolicy,
    pub predicate: ValidityPredicate,
    /// Abort the run after this many queue deliveries.
    pub max_events: u64,
    /// Allow n <= 3t and honor restricted sends verbatim, for demonstrating
    /// what goes wrong below the resilience bound.
    pub lower_bound_demo: bool,
    /// Retain the full trace line stream, not only its digest.
    pub record_trace: bool,
    /// Turn monitor failures into errors from [`run`].
    pub monitors_enabled: bool,
}

impl SimConfig {
    /// A plain configuration: ideal channel, next-tick delivery, no faults,
    /// every value admissible.
    pub fn new(n: usize, t: usize, m: usize, epsilon: f64, inputs: Vec<Point>) -> Self {
        SimConfig {
            n,
            t,
            m,
            epsilon,
            seed: 0,
            broadcast_mode: BroadcastMode::Ideal,
            inputs,
            adversaries: BTreeMap::new(),
            scheduler: SchedulerPolicy::Fifo,
            predicate: ValidityPredicate::AlwaysTrue,
            max_events: DEFAULT_MAX_EVENTS,
            lower_bound_demo: false,
            record_trace: false,
            monitors_enabled: true,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks the configuration and returns the protocol parameters it
    /// implies. Every reported problem names the field it concerns.
    pub fn validate(&self) -> Result<ProtocolParams, ConfigError> {
        let params = if self.lower_bound_demo {
            if self.broadcast_mode != BroadcastMode::Ideal {
                return Err(ConfigError::DemoNeedsIdealChannel);
            }
            ProtocolParams::sub_resilient(self.n, self.t, self.m, self.epsilon)?
        } else {
            ProtocolParams::new(self.n, self.t, self.m, self.epsilon)?
        };
        if self.max_events == 0 {
            return Err(ConfigError::ZeroEventCap);
        }
        if self.inputs.len() != self.n {
            return Err(ConfigError::InputCount { expected: self.n, got: self.inputs.len() });
        }
        for (node, input) in self.inputs.iter().enumerate() {
            if input.dim() != self.m {
                return Err(ConfigError::InputDimension {
                    node,
                    expected: self.m,
                    got: input.dim(),
                });
            }
            let faulty = self.adversaries.contains_key(&node);
            if !faulty && !self.predicate.accepts(input).unwrap_or(false) {
                return Err(ConfigError::InvalidCorrectInput { node });
            }
        }
        if self.adversaries.len() > self.t {
            return Err(ConfigError::TooManyAdversaries {
                count: self.adversaries.len(),
                t: self.t,
            });
        }
        for (&id, strategy) in &self.adversaries {
            if id >= self.n {
                return Err(ConfigError::AdversaryId { id, n: self.n });
            }
            let payload_dims: &[usize] = match strategy {
                AdversaryStrategy::ExtremeHonest { target } => &[target.dim()],
                AdversaryStrategy::InvalidInput { value } => &[value.dim()],
                AdversaryStrategy::SkewedSubset { bias } => &[bias.dim()],
                AdversaryStrategy::Mirror { input_a, input_b, .. } => {
                    &[input_a.dim(), input_b.dim()]
                }
                _ => &[],
            };
            if payload_dims.iter().any(|&d| d != self.m) {
                return Err(ConfigError::StrategyDimension { id, m: self.m });
            }
        }
        Ok(params)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("params: {0}")]
    Params(#[from] ProtocolError),
    #[error("inputs: expected {expected} entries (one per node), got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("inputs[{node}]: dimension {got} does not match m = {expected}")]
    InputDimension { node: NodeId, expected: usize, got: usize },
    #[error("inputs[{node}]: rejected by the validity predicate")]
    InvalidCorrectInput { node: NodeId },
    #[error("adversaries: node id {id} out of range for n = {n}")]
    AdversaryId { id: NodeId, n: usize },
    #[error("adversaries: {count} faulty nodes configured, but t = {t}")]
    TooManyAdversaries { count: usize, t: usize },
    #[error("adversaries[{id}]: strategy payload dimension does not match m = {m}")]
    StrategyDimension { id: NodeId, m: usize },
    #[error("lower_bound_demo: requires the ideal broadcast mode")]
    DemoNeedsIdealChannel,
    #[error("max_events: must be at least 1")]
    ZeroEventCap,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("event budget exhausted after {events} deliveries (cap {cap})")]
    EventCap { cap: u64, events: u64, result: Box<SimResult> },
    #[error("monitor '{monitor}' failed: {detail}")]
    MonitorViolation { monitor: &'static str, detail: String, result: Box<SimResult> },
}

/// Everything observable about a finished (or aborted) run.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct SimResult {
    /// Final output per correct node that terminated.
    pub outputs: BTreeMap<NodeId, Point>,
    /// Final round per correct node.
    pub rounds: BTreeMap<NodeId, u64>,
    /// Diameter of the per-round value unions in `round_values`.
    pub round_diameters: BTreeMap<u64, f64>,
    /// Union over correct nodes of the values accepted for each round.
    pub round_values: BTreeMap<u64, AttributedSet>,
    pub event_count: u64,
    /// SHA-256 over the newline-joined trace stream, hex encoded.
    pub trace_digest: String,
    /// The stream itself, when the run recorded it.
    pub trace_lines: Option<Vec<String>>,
    pub monitor_report: MonitorReport,
    /// Rule-violating votes sent by faulty nodes, as `(node, round, vote)`.
    pub forged: Vec<(NodeId, u64, Point)>,
    /// Equivocation attempts the ideal channel refused, as `(node, tag)`.
    pub suppressed: Vec<(NodeId, MessageTag)>,
    /// Each correct node's estimate of the initial value spread.
    pub init_diameters: BTreeMap<NodeId, f64>,
    /// Every initial value actually put on the wire, in send order.
    pub effective_inputs: Vec<(NodeId, Point)>,
    /// Diameter of the admissible subset of `effective_inputs`.
    pub valid_input_diameter: f64,
    /// Configured inputs of the correct nodes.
    pub correct_inputs: Vec<(NodeId, Point)>,
    /// Per correct node: digest delivered for each broadcast instance.
    pub delivered: BTreeMap<NodeId, BTreeMap<InstanceId, PayloadDigest>>,
    /// Per correct node: successive halt-round estimates.
    pub halts: BTreeMap<NodeId, Vec<u64>>,
}

impl SimResult {
    /// Largest pairwise distance between final outputs; zero with fewer than
    /// two outputs.
    pub fn max_pairwise_output(&self) -> f64 {
        let outs: Vec<&Point> = self.outputs.values().collect();
        let mut max = 0.0f64;
        for (i, a) in outs.iter().enumerate() {
            for b in &outs[i + 1..] {
                if let Ok(d) = geometry::distance(a, b) {
                    max = max.max(d);
                }
            }
        }
        max
    }

    pub fn final_round_max(&self) -> u64 {
        self.rounds.values().copied().max().unwrap_or(0)
    }
}

// A run holds at most a handful of hosts, so the size gap between the full
// protocol state and a strategy stub is not worth a box.
#[allow(clippy::large_enum_variant)]
enum Host {
    Correct(NodeState),
    Byzantine(ByzantineNode),
}

enum QueueItem {
    /// A payload delivery on the ideal channel.
    Protocol { src: NodeId, dst: NodeId, msg: ProtocolMessage },
    /// A link-layer message of the echo/ready broadcast.
    Link(LinkMessage),
}

struct Engine {
    config: SimConfig,
    params: ProtocolParams,
    hosts: Vec<Host>,
    channel: IdealChannel,
    rbc: Vec<BTreeMap<InstanceId, RbcState>>,
    queue: BTreeMap<(u64, u64), QueueItem>,
    next_seq: u64,
    now: u64,
    events: u64,
    trace: TraceCollector,
    delivered: BTreeMap<NodeId, BTreeMap<InstanceId, PayloadDigest>>,
    suppressed: Vec<(NodeId, MessageTag)>,
    halts: BTreeMap<NodeId, Vec<u64>>,
    effective_inputs: Vec<(NodeId, Point)>,
}

impl Engine {
    fn new(config: SimConfig) -> Result<Self, SimError> {
        let params = config.validate()?;
        let mut hosts = Vec::with_capacity(config.n);
        for id in 0..config.n {
            let host = match config.adversaries.get(&id) {
                Some(strategy) => Host::Byzantine(
                    ByzantineNode::new(
                        id,
                        params.clone(),
                        config.predicate.clone(),
                        strategy.clone(),
                    )
                    .map_err(ConfigError::Params)?,
                ),
                None => Host::Correct(
                    NodeState::new(id, params.clone(), config.predicate.clone())
                        .map_err(ConfigError::Params)?,
                ),
            };
            hosts.push(host);
        }
        let rbc = (0..config.n).map(|_| BTreeMap::new()).collect();
        let trace = TraceCollector::new(config.record_trace);
        Ok(Engine {
            params,
            hosts,
            channel: IdealChannel::new(),
            rbc,
            queue: BTreeMap::new(),
            next_seq: 0,
            now: 0,
            events: 0,
            trace,
            delivered: BTreeMap::new(),
            suppressed: Vec::new(),
            halts: BTreeMap::new(),
            effective_inputs: Vec::new(),
            config,
        })
    }

    fn start(&mut self) {
        for id in 0..self.config.n {
            let input = self.config.inputs[id].clone();
            let emissions = match &mut self.hosts[id] {
                Host::Correct(state) => {
                    let out = state.start(&input).expect("inputs were validated");
                    out.outgoing.into_iter().map(Emission::Broadcast).collect()
                }
                Host::Byzantine(node) => node.start(&input),
            };
            self.process_emissions(id, emissions);
        }
    }

    fn enqueue(&mut self, send_time: u64, src: NodeId, dst: NodeId, item: QueueItem) {
        let seq = self.next_seq;
        self.next_seq += 1;
        let at = adversary::schedule(&self.config.scheduler, self.config.seed, seq, send_time, src, dst);
        self.queue.insert((at, seq), item);
    }

    /// Puts a node's outgoing messages on the wire, honoring the channel
    /// mode's uniqueness rules.
    fn process_emissions(&mut self, src: NodeId, emissions: Vec<Emission>) {
        for emission in emissions {
            match self.config.broadcast_mode {
                BroadcastMode::Ideal => self.dispatch_ideal(src, emission),
                BroadcastMode::Bracha => self.dispatch_bracha(src, emission),
            }
        }
    }

    fn dispatch_ideal(&mut self, src: NodeId, emission: Emission) {
        // Outside the demo, the ideal channel turns every send into a
        // registered broadcast: restricted destination lists are a capability
        // this channel simply does not offer.
        let (msg, dsts) = match emission {
            Emission::Broadcast(msg) => (msg, None),
            Emission::Restricted { msg, dsts } => {
                if self.config.lower_bound_demo {
                    (msg, Some(dsts))
                } else {
                    (msg, None)
                }
            }
        };
        if dsts.is_none() {
            match self.channel.register(src, &msg) {
                ChannelVerdict::Accepted => {}
                ChannelVerdict::Duplicate => return,
                ChannelVerdict::Suppressed => {
                    self.suppressed.push((src, msg.tag()));
                    return;
                }
            }
        }
        self.note_send(src, &msg);
        let targets: Vec<NodeId> = dsts.unwrap_or_else(|| (0..self.config.n).collect());
        for dst in targets {
            self.enqueue(self.now, src, dst, QueueItem::Protocol { src, dst, msg: msg.clone() });
        }
    }

    fn dispatch_bracha(&mut self, src: NodeId, emission: Emission) {
        let (msg, dsts) = match emission {
            Emission::Broadcast(msg) => (msg, (0..self.config.n).collect::<Vec<_>>()),
            Emission::Restricted { msg, dsts } => (msg, dsts),
        };
        self.note_send(src, &msg);
        let instance = InstanceId { sender: src, tag: msg.tag() };
        for dst in dsts {
            let link = LinkMessage {
                src,
                dst,
                instance,
                body: LinkBody::Send { payload: msg.clone() },
            };
            self.enqueue(self.now, src, dst, QueueItem::Link(link));
        }
    }

    fn note_send(&mut self, src: NodeId, msg: &ProtocolMessage) {
        if let ProtocolMessage::InitValue { value } = msg {
            self.effective_inputs.push((src, value.clone()));
        }
        self.trace.push(trace::send_line(self.now, src, msg));
    }

    fn send_links(&mut self, links: Vec<LinkMessage>) {
        for link in links {
            self.enqueue(self.now, link.src, link.dst, QueueItem::Link(link));
        }
    }

    fn drive(mut self) -> Result<SimResult, SimError> {
        while let Some(((time, _seq), item)) = self.queue.pop_first() {
            if self.events >= self.config.max_events {
                let cap = self.config.max_events;
                let events = self.events;
                return Err(SimError::EventCap {
                    cap,
                    events,
                    result: Box::new(self.finish()),
                });
            }
            self.events += 1;
            self.now = time;
            match item {
                QueueItem::Protocol { src, dst, msg } => {
                    self.trace.push(trace::delivery_line(self.now, src, dst, &msg));
                    if matches!(self.hosts[dst], Host::Correct(_)) {
                        let instance = InstanceId { sender: src, tag: msg.tag() };
                        self.delivered
                            .entry(dst)
                            .or_default()
                            .entry(instance)
                            .or_insert_with(|| msg.digest());
                    }
                    self.deliver_protocol(src, dst, &msg);
                }
                QueueItem::Link(link) => {
                    self.trace.push(trace::link_line(self.now, &link));
                    let dst = link.dst;
                    let (n, t) = (self.params.n, self.params.t);
                    let state = self.rbc[dst]
                        .entry(link.instance)
                        .or_insert_with(|| RbcState::new(dst, n, t, link.instance));
                    let step = state.step(&link);
                    self.send_links(step.outgoing);
                    if let Some(payload) = step.delivered {
                        if matches!(self.hosts[dst], Host::Correct(_)) {
                            self.delivered
                                .entry(dst)
                                .or_default()
                                .entry(link.instance)
                                .or_insert_with(|| payload.digest());
                        }
                        self.deliver_protocol(link.instance.sender, dst, &payload);
                    }
                }
            }
        }
        Ok(self.finish())
    }

    fn deliver_protocol(&mut self, src: NodeId, dst: NodeId, msg: &ProtocolMessage) {
        let now = self.now;
        let emissions: Vec<Emission> = match &mut self.hosts[dst] {
            Host::Correct(state) => {
                let out = state.handle(src, msg);
                for event in &out.events {
                    let line = match event {
                        NodeEvent::AcceptValue { round, .. } => {
                            let diameter =
                                state.values(*round).and_then(|s| geometry::diameter(s).ok());
                            trace::protocol_line(now, dst, "accept_value", Some(*round), None, diameter, None)
                        }
                        NodeEvent::AcceptReport { round, .. } => {
                            trace::protocol_line(now, dst, "accept_report", Some(*round), None, None, None)
                        }
                        NodeEvent::RoundAdvance { round } => {
                            trace::protocol_line(now, dst, "round_advance", Some(*round), None, None, None)
                        }
                        NodeEvent::HaltUpdate { halt } => {
                            self.halts.entry(dst).or_default().push(*halt);
                            trace::protocol_line(now, dst, "halt_update", Some(*halt), None, None, None)
                        }
                        NodeEvent::Terminate { round } => {
                            trace::protocol_line(now, dst, "terminate", Some(*round), None, None, None)
                        }
                    };
                    self.trace.push(line);
                }
                out.outgoing.into_iter().map(Emission::Broadcast).collect()
            }
            Host::Byzantine(node) => node.handle(src, msg),
        };
        self.process_emissions(dst, emissions);
    }

    fn finish(self) -> SimResult {
        let Engine {
            config,
            params,
            hosts,
            trace,
            delivered,
            suppressed,
            halts,
            effective_inputs,
            events,
            ..
        } = self;

        let mut forged = Vec::new();
        for host in &hosts {
            if let Host::Byzantine(node) = host {
                for (round, vote) in node.forged() {
                    forged.push((node.id(), *round, vote.clone()));
                }
            }
        }

        let correct: Vec<(NodeId, &NodeState)> = hosts
            .iter()
            .filter_map(|h| match h {
                Host::Correct(state) => Some((state.id(), state)),
                Host::Byzantine(_) => None,
            })
            .collect();
        let correct_inputs: Vec<(NodeId, Point)> =
            correct.iter().map(|(id, _)| (*id, config.inputs[*id].clone())).collect();

        let ctx = MonitorContext {
            params: &params,
            predicate: &config.predicate,
            correct: correct.clone(),
            correct_inputs: correct_inputs.clone(),
            effective_inputs: &effective_inputs,
            delivered: &delivered,
            forged: &forged,
            halts: &halts,
        };
        let monitor_report = monitors::evaluate(&ctx);
        drop(ctx);

        let mut outputs = BTreeMap::new();
        let mut rounds = BTreeMap::new();
        let mut init_diameters = BTreeMap::new();
        let mut round_values: BTreeMap<u64, AttributedSet> = BTreeMap::new();
        for (id, state) in &correct {
            if let Some(out) = state.output() {
                outputs.insert(*id, out.clone());
            }
            rounds.insert(*id, state.round());
            if let Some(d) = state.init_diameter() {
                init_diameters.insert(*id, d);
            }
            for (round, set) in state.all_values() {
                round_values.entry(*round).or_default().absorb(set);
            }
        }
        let round_diameters = round_values
            .iter()
            .filter_map(|(r, s)| geometry::diameter(s).ok().map(|d| (*r, d)))
            .collect();
        let valid_points = AttributedSet::from_entries(
            effective_inputs
                .iter()
                .filter(|(_, v)| config.predicate.accepts(v).unwrap_or(false))
                .enumerate()
                .map(|(idx, (_, v))| (idx, v.clone())),
        );
        let valid_input_diameter = geometry::diameter(&valid_points).unwrap_or(0.0);
        drop(correct);

        let (trace_digest, trace_lines) = trace.finish();
        SimResult {
            outputs,
            rounds,
            round_diameters,
            round_values,
            event_count: events,
            trace_digest,
            trace_lines,
            monitor_report,
            forged,
            suppressed,
            init_diameters,
            effective_inputs,
            valid_input_diameter,
            correct_inputs,
            delivered,
            halts,
        }
    }
}

/// Runs a configuration to quiescence. With monitors enabled, any failed
/// check is promoted to an error carrying the full result.
pub fn run(config: SimConfig) -> Result<SimResult, SimError> {
    let monitors_enabled = config.monitors_enabled;
    let result = run_inner(&config)?;
    if monitors_enabled {
        if let Some(failure) = result.monitor_report.first_failure() {
            let monitor = failure.name;
            let detail = failure.detail.clone();
            return Err(SimError::MonitorViolation { monitor, detail, result: Box::new(result) });
        }
    }
    Ok(result)
}

/// Runs a configuration and reports monitor outcomes in the result instead of
/// as errors, so sweeps can tally failures.
fn run_inner(config: &SimConfig) -> Result<SimResult, SimError> {
    let mut engine = Engine::new(config.clone())?;
    engine.start();
    engine.drive()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub seed: u64,
    pub result: SimResult,
}

/// Per-seed runs of one configuration, in ascending seed order. Monitor
/// failures land in the rows; only configuration problems and event-cap
/// overruns abort the sweep.
pub fn run_sweep_sequential(config: &SimConfig, seeds: &[u64]) -> Result<Vec<SweepRow>, SimError> {
    seeds
        .iter()
        .map(|&seed| {
            run_inner(&config.clone().with_seed(seed)).map(|result| SweepRow { seed, result })
        })
        .collect()
}

/// Same contract as [`run_sweep_sequential`], fanned out across threads when
/// the `parallel` feature is enabled. Row order still follows `seeds`.
#[cfg(feature = "parallel")]
pub fn run_sweep(config: &SimConfig, seeds: &[u64]) -> Result<Vec<SweepRow>, SimError> {
    use rayon::prelude::*;
    seeds
        .par_iter()
        .map(|&seed| {
            run_inner(&config.clone().with_seed(seed)).map(|result| SweepRow { seed, result })
        })
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_sweep(config: &SimConfig, seeds: &[u64]) -> Result<Vec<SweepRow>, SimError> {
    run_sweep_sequential(config, seeds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAggregate {
    pub runs: usize,
    pub passes: usize,
    /// Mean per-round value-union diameter over the rows that reached the round.
    pub mean_round_diameters: BTreeMap<u64, f64>,
    /// How many rows finished in each final round.
    pub final_round_histogram: BTreeMap<u64, usize>,
}

pub fn aggregate(rows: &[SweepRow]) -> SweepAggregate {
    let mut passes = 0;
    let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    let mut final_round_histogram: BTreeMap<u64, usize> = BTreeMap::new();
    for row in rows {
        if row.result.monitor_report.all_passed() {
            passes += 1;
        }
        for (round, diameter) in &row.result.round_diameters {
            let entry = sums.entry(*round).or_insert((0.0, 0));
            entry.0 += diameter;
            entry.1 += 1;
        }
        *final_round_histogram.entry(row.result.final_round_max()).or_insert(0) += 1;
    }
    let mean_round_diameters =
        sums.into_iter().map(|(r, (sum, count))| (r, sum / count as f64)).collect();
    SweepAggregate { runs: rows.len(), passes, mean_round_diameters, final_round_histogram }
}
