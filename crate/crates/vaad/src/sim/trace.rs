//! Run traces: line-oriented JSON event records and a digest over the whole
//! stream. The digest is computed unconditionally so determinism can be
//! asserted cheaply; the lines themselves are retained only on request.

use serde_json::json;
use sha2::{Digest as _, Sha256};

use crate::broadcast::LinkMessage;
use crate::geometry::NodeId;
use crate::messages::ProtocolMessage;

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct TraceCollector {
    keep_lines: bool,
    lines: Vec<String>,
    hasher: Sha256,
}

impl TraceCollector {
    pub fn new(keep_lines: bool) -> Self {
        TraceCollector { keep_lines, lines: Vec::new(), hasher: Sha256::new() }
    }

    pub fn push(&mut self, line: String) {
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        if self.keep_lines {
            self.lines.push(line);
        }
    }

    /// Hex digest of the full stream plus the retained lines, if any.
    pub fn finish(self) -> (String, Option<Vec<String>>) {
        let digest = to_hex(&self.hasher.finalize());
        (digest, self.keep_lines.then_some(self.lines))
    }
}

/// A node-level protocol event line.
#[allow(clippy::too_many_arguments)]
pub fn protocol_line(
    time: u64,
    node: NodeId,
    event: &str,
    round: Option<u64>,
    digest: Option<String>,
    diameter: Option<f64>,
    payload_hex: Option<String>,
) -> String {
    json!({
        "time": time,
        "node": node,
        "event": event,
        "round": round,
        "digest": digest,
        "diameter": diameter,
        "payload": payload_hex,
    })
    .to_string()
}

/// A send line for a message leaving `src` toward the channel layer.
pub fn send_line(time: u64, src: NodeId, msg: &ProtocolMessage) -> String {
    let encoded = msg.encode();
    protocol_line(
        time,
        src,
        "send",
        Some(msg.tag().round),
        Some(to_hex(msg.digest().as_bytes())),
        None,
        Some(to_hex(&encoded)),
    )
}

/// A link-layer event line (echo/ready traffic and deliveries).
pub fn link_line(time: u64, link: &LinkMessage) -> String {
    json!({
        "time": time,
        "src": link.src,
        "dst": link.dst,
        "instance": link.instance.to_string(),
        "kind": link.body.kind_name(),
        "digest": to_hex(link.body.digest().as_bytes()),
    })
    .to_string()
}

/// A direct-channel delivery line, mirroring the link format.
pub fn delivery_line(time: u64, src: NodeId, dst: NodeId, msg: &ProtocolMessage) -> String {
    json!({
        "time": time,
        "src": src,
        "dst": dst,
        "instance": format!("{}:{}", src, msg.tag()),
        "kind": "deliver",
        "digest": to_hex(msg.digest().as_bytes()),
    })
    .to_string()
}
