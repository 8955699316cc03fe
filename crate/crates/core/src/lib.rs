//! Timing channel over OS mutual-exclusion primitives.
//!
//! Two cooperating processes that share nothing but a synchronization
//! object (a file lock, a named semaphore, or their simulated stand-ins)
//! can still exchange data: the sender modulates how long the object stays
//! occupied, and the receiver recovers symbols by timing its own blocking
//! operations. This crate provides the pieces end to end — bit/symbol
//! framing ([`codec`]), the primitive backends and a deterministic
//! simulator ([`primitives`]), the send/receive protocols ([`protocol`]),
//! and measurement drivers ([`harness`]).

pub mod codec;
pub mod harness;
pub mod primitives;
pub mod protocol;
