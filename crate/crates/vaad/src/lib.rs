//! Validated Byzantine asynchronous multidimensional approximate agreement.
//!
//! This crate packages three layers:
//!
//! * the protocol core — geometry kernel, wire messages, reliable-broadcast
//!   state machine, and the per-node agreement state machine;
//! * a deterministic discrete-event network simulator with configurable
//!   Byzantine adversaries, delivery schedulers, and online invariant
//!   monitors;
//! * scenario loading, metrics emission, and the packaged resilience-boundary
//!   demonstration used by the command-line driver.
//!
//! Runs are bit-reproducible: identical configurations produce identical
//! traces, outputs, and CSV artifacts.

pub mod adversary;
pub mod broadcast;
pub mod geometry;
pub mod messages;
pub mod protocol;
pub mod scenario;
pub mod sim;
pub mod validity;

pub use geometry::{AttributedSet, GeometryError, NodeId, Point, PointPair};
