//! Broadcast channel layer. Two interchangeable realizations feed the
//! protocol: an ideal channel whose uniqueness guarantee (one payload per
//! sender and tag) is enforced by the simulator, and an echo/ready
//! reliable-broadcast state machine that earns the same guarantee from
//! quorum intersection when more than two thirds of the nodes are correct.
//!
//! Echo messages carry the full payload alongside its digest so a node that
//! first hears of a payload second-hand can still deliver it; ready messages
//! carry the digest alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::geometry::NodeId;
use crate::messages::{MessageTag, PayloadDigest, ProtocolMessage};

/// One broadcast slot: the sender plus the message tag it is exercising.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId {
    pub sender: NodeId,
    pub tag: MessageTag,
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.sender, self.tag)
    }
}

/// Point-to-point traffic of the reliable-broadcast realization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkMessage {
    pub src: NodeId,
    pub dst: NodeId,
    pub instance: InstanceId,
    pub body: LinkBody,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkBody {
    Send { payload: ProtocolMessage },
    Echo { digest: PayloadDigest, payload: ProtocolMessage },
    Ready { digest: PayloadDigest },
}

impl LinkBody {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LinkBody::Send { .. } => "send",
            LinkBody::Echo { .. } => "echo",
            LinkBody::Ready { .. } => "ready",
        }
    }

    pub fn digest(&self) -> PayloadDigest {
        match self {
            LinkBody::Send { payload } => payload.digest(),
            LinkBody::Echo { digest, .. } => *digest,
            LinkBody::Ready { digest } => *digest,
        }
    }
}

/// Outcome of feeding one link message to an instance state machine.
#[derive(Debug, Default)]
pub struct RbcStep {
    /// Messages this node now sends, one per destination.
    pub outgoing: Vec<LinkMessage>,
    /// Set when the instance delivers; at most once over its lifetime.
    pub delivered: Option<ProtocolMessage>,
}

/// Per-node, per-instance state of the echo/ready broadcast.
///
/// A correct node echoes at most once and sends ready at most once per
/// instance, no matter how many digests it observes; delivery happens exactly
/// once, when a delivery quorum of readys is matched by a known payload.
#[derive(Debug, Clone)]
pub struct RbcState {
    owner: NodeId,
    n: usize,
    t: usize,
    instance: InstanceId,
    echoed: bool,
    readied: bool,
    delivered: bool,
    /// Distinct peers seen echoing each digest.
    echoes: BTreeMap<PayloadDigest, BTreeSet<NodeId>>,
    /// Distinct peers seen ready for each digest.
    readys: BTreeMap<PayloadDigest, BTreeSet<NodeId>>,
    /// Payload bodies learned from send or echo traffic.
    payloads: BTreeMap<PayloadDigest, ProtocolMessage>,
}

impl RbcState {
    pub fn new(owner: NodeId, n: usize, t: usize, instance: InstanceId) -> Self {
        RbcState {
            owner,
            n,
            t,
            instance,
            echoed: false,
            readied: false,
            delivered: false,
            echoes: BTreeMap::new(),
            readys: BTreeMap::new(),
            payloads: BTreeMap::new(),
        }
    }

    pub fn has_delivered(&self) -> bool {
        self.delivered
    }

    fn echo_quorum(&self) -> usize {
        self.n - self.t
    }

    fn ready_amplify(&self) -> usize {
        self.t + 1
    }

    fn delivery_quorum(&self) -> usize {
        2 * self.t + 1
    }

    fn to_all(&self, body: LinkBody) -> Vec<LinkMessage> {
        (0..self.n)
            .map(|dst| LinkMessage { src: self.owner, dst, instance: self.instance, body: body.clone() })
            .collect()
    }

    /// Feeds one incoming link message through the state machine.
    pub fn step(&mut self, msg: &LinkMessage) -> RbcStep {
        debug_assert_eq!(msg.dst, self.owner);
        debug_assert_eq!(msg.instance, self.instance);
        let mut out = RbcStep::default();
        match &msg.body {
            LinkBody::Send { payload } => {
                // Only the instance's sender may originate a send.
                if msg.src != self.instance.sender {
                    return out;
                }
                let digest = payload.digest();
                self.payloads.entry(digest).or_insert_with(|| payload.clone());
                if !self.echoed {
                    self.echoed = true;
                    out.outgoing =
                        self.to_all(LinkBody::Echo { digest, payload: payload.clone() });
                }
            }
            LinkBody::Echo { digest, payload } => {
                if payload.digest() == *digest {
                    self.payloads.entry(*digest).or_insert_with(|| payload.clone());
                }
                self.echoes.entry(*digest).or_default().insert(msg.src);
            }
            LinkBody::Ready { digest } => {
                self.readys.entry(*digest).or_default().insert(msg.src);
            }
        }
        self.advance(&mut out);
        out
    }

    /// Fires any threshold-crossing transitions enabled by current counts.
    fn advance(&mut self, out: &mut RbcStep) {
        if !self.readied {
            let ready_for = self
                .echoes
                .iter()
                .find(|(_, peers)| peers.len() >= self.echo_quorum())
                .map(|(d, _)| *d)
                .or_else(|| {
                    self.readys
                        .iter()
                        .find(|(_, peers)| peers.len() >= self.ready_amplify())
                        .map(|(d, _)| *d)
                });
            if let Some(digest) = ready_for {
                self.readied = true;
                out.outgoing.extend(self.to_all(LinkBody::Ready { digest }));
            }
        }
        if !self.delivered {
            let deliverable = self
                .readys
                .iter()
                .find(|(d, peers)| {
                    peers.len() >= self.delivery_quorum() && self.payloads.contains_key(d)
                })
                .map(|(d, _)| *d);
            if let Some(digest) = deliverable {
                self.delivered = true;
                out.delivered = Some(self.payloads[&digest].clone());
            }
        }
    }
}

/// Bookkeeping for the ideal broadcast channel: the simulator consults it to
/// enforce one payload per `(sender, tag)` slot.
#[derive(Debug, Default)]
pub struct IdealChannel {
    used: BTreeMap<InstanceId, PayloadDigest>,
}

/// Verdict on an attempted ideal broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelVerdict {
    /// Fresh slot: deliver to everyone.
    Accepted,
    /// The slot was already used with a different payload; the attempt is
    /// dropped on the floor.
    Suppressed,
    /// The slot was already used with the identical payload (a retransmit);
    /// also dropped, since delivery already happened.
    Duplicate,
}

impl IdealChannel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, sender: NodeId, msg: &ProtocolMessage) -> ChannelVerdict {
        let id = InstanceId { sender, tag: msg.tag() };
        let digest = msg.digest();
        match self.used.entry(id) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(digest);
                ChannelVerdict::Accepted
            }
            std::collections::btree_map::Entry::Occupied(e) => {
                if *e.get() == digest {
                    ChannelVerdict::Duplicate
                } else {
                    ChannelVerdict::Suppressed
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;

    fn payload(x: f64) -> ProtocolMessage {
        ProtocolMessage::InitValue { value: Point::from_slice(&[x]) }
    }

    fn instance(sender: NodeId) -> InstanceId {
        InstanceId { sender, tag: payload(0.0).tag() }
    }

    fn link(src: NodeId, dst: NodeId, inst: InstanceId, body: LinkBody) -> LinkMessage {
        LinkMessage { src, dst, instance: inst, body }
    }

    /// Hand trace for four nodes, one of which may be faulty: node 1 walks
    /// through the full send -> echo -> ready -> deliver ladder.
    #[test]
    fn four_node_happy_path() {
        let inst = instance(0);
        let msg = payload(7.0);
        let digest = msg.digest();
        let mut node1 = RbcState::new(1, 4, 1, inst);

        // Send arrives: node 1 echoes to everyone, exactly once.
        let step = node1.step(&link(0, 1, inst, LinkBody::Send { payload: msg.clone() }));
        assert_eq!(step.outgoing.len(), 4);
        assert!(step.outgoing.iter().all(|m| matches!(m.body, LinkBody::Echo { .. })));
        assert!(step.delivered.is_none());

        // A duplicate send changes nothing.
        let step = node1.step(&link(0, 1, inst, LinkBody::Send { payload: msg.clone() }));
        assert!(step.outgoing.is_empty());

        // Three echoes (n - t) trigger the ready.
        for (i, src) in [0usize, 2, 3].iter().enumerate() {
            let step = node1.step(&link(
                *src,
                1,
                inst,
                LinkBody::Echo { digest, payload: msg.clone() },
            ));
            if i < 2 {
                assert!(step.outgoing.is_empty());
            } else {
                assert_eq!(step.outgoing.len(), 4);
                assert!(step.outgoing.iter().all(|m| matches!(m.body, LinkBody::Ready { .. })));
            }
        }

        // Three readys (2t + 1) deliver exactly once.
        for (i, src) in [0usize, 2, 3].iter().enumerate() {
            let step = node1.step(&link(*src, 1, inst, LinkBody::Ready { digest }));
            if i < 2 {
                assert!(step.delivered.is_none());
            } else {
                assert_eq!(step.delivered, Some(msg.clone()));
            }
        }
        assert!(node1.has_delivered());

        // Further readys cannot deliver again.
        let step = node1.step(&link(1, 1, inst, LinkBody::Ready { digest }));
        assert!(step.delivered.is_none());
    }

    /// Ready amplification: t + 1 readys provoke a node's own ready even
    /// before it saw an echo quorum, and delivery still waits for a payload.
    #[test]
    fn ready_amplification_and_payload_wait() {
        let inst = instance(0);
        let msg = payload(3.0);
        let digest = msg.digest();
        let mut node2 = RbcState::new(2, 4, 1, inst);

        let step = node2.step(&link(1, 2, inst, LinkBody::Ready { digest }));
        assert!(step.outgoing.is_empty());
        let step = node2.step(&link(3, 2, inst, LinkBody::Ready { digest }));
        assert_eq!(step.outgoing.len(), 4, "t + 1 readys amplify");
        assert!(step.outgoing.iter().all(|m| matches!(m.body, LinkBody::Ready { .. })));

        // Third ready reaches the delivery quorum but the payload is unknown.
        let step = node2.step(&link(0, 2, inst, LinkBody::Ready { digest }));
        assert!(step.delivered.is_none());

        // The payload arriving by echo completes the delivery.
        let step = node2.step(&link(1, 2, inst, LinkBody::Echo { digest, payload: msg.clone() }));
        assert_eq!(step.delivered, Some(msg));
    }

    /// A node echoes only the first send of an instance; a conflicting second
    /// send from an equivocating sender gets no echo.
    #[test]
    fn single_echo_per_instance() {
        let inst = instance(0);
        let mut node1 = RbcState::new(1, 4, 1, inst);
        let step = node1.step(&link(0, 1, inst, LinkBody::Send { payload: payload(1.0) }));
        assert_eq!(step.outgoing.len(), 4);
        let step = node1.step(&link(0, 1, inst, LinkBody::Send { payload: payload(2.0) }));
        assert!(step.outgoing.is_empty(), "second send must not be echoed");
    }

    /// Sends claiming an instance but arriving from a different node than the
    /// instance's sender are ignored outright.
    #[test]
    fn send_must_come_from_the_instance_sender() {
        let inst = instance(0);
        let mut node1 = RbcState::new(1, 4, 1, inst);
        let step = node1.step(&link(2, 1, inst, LinkBody::Send { payload: payload(1.0) }));
        assert!(step.outgoing.is_empty());
    }

    #[test]
    fn ideal_channel_suppresses_tag_reuse() {
        let mut channel = IdealChannel::new();
        let first = payload(1.0);
        let second = payload(2.0);
        assert_eq!(channel.register(0, &first), ChannelVerdict::Accepted);
        assert_eq!(channel.register(0, &second), ChannelVerdict::Suppressed);
        assert_eq!(channel.register(0, &first), ChannelVerdict::Duplicate);
        // A different sender's slot is independent.
        assert_eq!(channel.register(1, &second), ChannelVerdict::Accepted);
    }
}
