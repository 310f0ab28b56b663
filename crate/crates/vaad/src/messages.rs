//! Wire messages exchanged by protocol nodes, and their canonical binary
//! encoding.
//!
//! The encoding is deterministic and injective: map entries are serialized in
//! ascending key order, floats as 8-byte IEEE-754 big-endian, and every
//! variable-length section is length-prefixed. Equal messages therefore
//! encode to equal bytes, distinct messages to distinct bytes, and a SHA-256
//! digest of the bytes identifies a payload for the broadcast layer and the
//! trace log (where payloads appear hex-encoded).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::geometry::{AttributedSet, NodeId, Point};

/// Discriminator for the four protocol message families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    InitValue,
    Value,
    Report,
    Enough,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::InitValue => "init_value",
            MessageKind::Value => "value",
            MessageKind::Report => "report",
            MessageKind::Enough => "enough",
        }
    }
}

/// Broadcast slot identifier: one broadcast per `(sender, tag)` is the
/// uniqueness contract enforced by the channel layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MessageTag {
    pub round: u64,
    pub kind: MessageKind,
}

impl fmt::Display for MessageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.round)
    }
}

/// Round-indexed collection of value reports: for each reporting node, the
/// attributed value set it claimed to hold.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReportSet {
    entries: BTreeMap<NodeId, AttributedSet>,
}

impl ReportSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<I: IntoIterator<Item = (NodeId, AttributedSet)>>(entries: I) -> Self {
        let mut set = Self::new();
        for (reporter, values) in entries {
            set.insert(reporter, values);
        }
        set
    }

    /// Keeps the first report per reporter; returns whether the set changed.
    pub fn insert(&mut self, reporter: NodeId, values: AttributedSet) -> bool {
        match self.entries.entry(reporter) {
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(values);
                true
            }
            std::collections::btree_map::Entry::Occupied(_) => false,
        }
    }

    pub fn get(&self, reporter: NodeId) -> Option<&AttributedSet> {
        self.entries.get(&reporter)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &AttributedSet)> {
        self.entries.iter().map(|(&r, v)| (r, v))
    }

    /// Subset by matched reporter and identical report content.
    pub fn is_subset_of(&self, other: &ReportSet) -> bool {
        self.iter().all(|(r, v)| other.get(r) == Some(v))
    }
}

/// The protocol's wire messages.
///
/// `InitValue` and `Enough` belong to the init phase and always carry tag
/// round 0; `Value` rounds start at 1; `Report` rounds start at 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolMessage {
    /// A node's input value, broadcast once at startup.
    InitValue { value: Point },
    /// A round vote together with the value set and report set justifying it.
    Value {
        vote: Point,
        values: AttributedSet,
        reports: ReportSet,
        round: u64,
    },
    /// The sender's accepted value set for `round`.
    Report { values: AttributedSet, round: u64 },
    /// The sender's estimate of how many rounds suffice; always at least 1.
    Enough { estimate: u64 },
}

impl ProtocolMessage {
    pub fn tag(&self) -> MessageTag {
        match self {
            ProtocolMessage::InitValue { .. } => MessageTag { round: 0, kind: MessageKind::InitValue },
            ProtocolMessage::Value { round, .. } => MessageTag { round: *round, kind: MessageKind::Value },
            ProtocolMessage::Report { round, .. } => MessageTag { round: *round, kind: MessageKind::Report },
            ProtocolMessage::Enough { .. } => MessageTag { round: 0, kind: MessageKind::Enough },
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            ProtocolMessage::InitValue { value } => {
                out.push(0);
                encode_point(&mut out, value);
            }
            ProtocolMessage::Value { vote, values, reports, round } => {
                out.push(1);
                out.extend_from_slice(&round.to_be_bytes());
                encode_point(&mut out, vote);
                encode_attributed_set(&mut out, values);
                encode_report_set(&mut out, reports);
            }
            ProtocolMessage::Report { values, round } => {
                out.push(2);
                out.extend_from_slice(&round.to_be_bytes());
                encode_attributed_set(&mut out, values);
            }
            ProtocolMessage::Enough { estimate } => {
                out.push(3);
                out.extend_from_slice(&estimate.to_be_bytes());
            }
        }
        out
    }

    pub fn digest(&self) -> PayloadDigest {
        PayloadDigest::of(&self.encode())
    }
}

/// SHA-256 of a message's canonical encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PayloadDigest([u8; 32]);

impl PayloadDigest {
    pub fn of(bytes: &[u8]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        PayloadDigest(hasher.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Short hex form used in trace lines.
    pub fn short_hex(&self) -> String {
        self.0[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for PayloadDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short_hex())
    }
}

fn encode_point(out: &mut Vec<u8>, point: &Point) {
    out.extend_from_slice(&(point.dim() as u32).to_be_bytes());
    for c in point.coords() {
        out.extend_from_slice(&c.to_bits().to_be_bytes());
    }
}

fn encode_attributed_set(out: &mut Vec<u8>, set: &AttributedSet) {
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    for (sender, point) in set.iter() {
        out.extend_from_slice(&(sender as u32).to_be_bytes());
        encode_point(out, point);
    }
}

fn encode_report_set(out: &mut Vec<u8>, reports: &ReportSet) {
    out.extend_from_slice(&(reports.len() as u32).to_be_bytes());
    for (reporter, values) in reports.iter() {
        out.extend_from_slice(&(reporter as u32).to_be_bytes());
        encode_attributed_set(out, values);
    }
}

/// Decoding failure with the byte offset at which it was detected.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed message at byte {offset}: {reason}")]
pub struct DecodeError {
    pub offset: usize,
    pub reason: DecodeReason,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeReason {
    #[error("truncated input, needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("unknown message kind {kind}")]
    UnknownKind { kind: u8 },
    #[error("point has zero coordinates")]
    EmptyPoint,
    #[error("non-finite coordinate")]
    NonFiniteCoordinate,
    #[error("point dimension {got} does not match the message dimension {expected}")]
    MixedDimensions { expected: usize, got: usize },
    #[error("map keys not strictly ascending")]
    UnsortedKeys,
    #[error("value round must be at least 1")]
    ZeroValueRound,
    #[error("rounds estimate must be at least 1")]
    ZeroEstimate,
    #[error("{extra} trailing bytes after message end")]
    TrailingBytes { extra: usize },
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Dimension of the first point seen, enforced on all later points.
    dim: Option<usize>,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: DecodeReason) -> DecodeError {
        DecodeError { offset: self.pos, reason }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], DecodeError> {
        if self.bytes.len() - self.pos < len {
            let needed = len - (self.bytes.len() - self.pos);
            return Err(self.fail(DecodeReason::Truncated { needed }));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn point(&mut self) -> Result<Point, DecodeError> {
        let start = self.pos;
        let dim = self.u32()? as usize;
        if dim == 0 {
            return Err(DecodeError { offset: start, reason: DecodeReason::EmptyPoint });
        }
        if let Some(expected) = self.dim {
            if dim != expected {
                return Err(DecodeError {
                    offset: start,
                    reason: DecodeReason::MixedDimensions { expected, got: dim },
                });
            }
        } else {
            self.dim = Some(dim);
        }
        let mut coords = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = self.pos;
            let bits = self.u64()?;
            let c = f64::from_bits(bits);
            if !c.is_finite() {
                return Err(DecodeError { offset: at, reason: DecodeReason::NonFiniteCoordinate });
            }
            coords.push(c);
        }
        Ok(Point::new(coords).expect("validated coordinates"))
    }

    fn attributed_set(&mut self) -> Result<AttributedSet, DecodeError> {
        let count = self.u32()? as usize;
        let mut set = AttributedSet::new();
        let mut last: Option<u32> = None;
        for _ in 0..count {
            let at = self.pos;
            let sender = self.u32()?;
            if let Some(prev) = last {
                if sender <= prev {
                    return Err(DecodeError { offset: at, reason: DecodeReason::UnsortedKeys });
                }
            }
            last = Some(sender);
            let point = self.point()?;
            set.insert(sender as NodeId, point);
        }
        Ok(set)
    }

    fn report_set(&mut self) -> Result<ReportSet, DecodeError> {
        let count = self.u32()? as usize;
        let mut reports = ReportSet::new();
        let mut last: Option<u32> = None;
        for _ in 0..count {
            let at = self.pos;
            let reporter = self.u32()?;
            if let Some(prev) = last {
                if reporter <= prev {
                    return Err(DecodeError { offset: at, reason: DecodeReason::UnsortedKeys });
                }
            }
            last = Some(reporter);
            let values = self.attributed_set()?;
            reports.insert(reporter as NodeId, values);
        }
        Ok(reports)
    }
}

/// Decodes one message and requires the input to contain nothing else.
pub fn decode(bytes: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    let mut r = Reader { bytes, pos: 0, dim: None };
    let kind = r.u8()?;
    let msg = match kind {
        0 => ProtocolMessage::InitValue { value: r.point()? },
        1 => {
            let at = r.pos;
            let round = r.u64()?;
            if round == 0 {
                return Err(DecodeError { offset: at, reason: DecodeReason::ZeroValueRound });
            }
            let vote = r.point()?;
            let values = r.attributed_set()?;
            let reports = r.report_set()?;
            ProtocolMessage::Value { vote, values, reports, round }
        }
        2 => {
            let round = r.u64()?;
            let values = r.attributed_set()?;
            ProtocolMessage::Report { values, round }
        }
        3 => {
            let at = r.pos;
            let estimate = r.u64()?;
            if estimate == 0 {
                return Err(DecodeError { offset: at, reason: DecodeReason::ZeroEstimate });
            }
            ProtocolMessage::Enough { estimate }
        }
        other => {
            return Err(DecodeError { offset: 0, reason: DecodeReason::UnknownKind { kind: other } })
        }
    };
    if r.pos != bytes.len() {
        return Err(DecodeError {
            offset: r.pos,
            reason: DecodeReason::TrailingBytes { extra: bytes.len() - r.pos },
        });
    }
    Ok(msg)
}
