//! Computation/communication overlap passes for mixture-of-experts training
//! graphs.
//!
//! The crate works over a flat instruction-sequence IR ([`ir`]) describing one
//! training iteration. Two passes rewrite it:
//!
//! * [`sched_dw`] moves weight-gradient instructions right behind the
//!   backward all-to-alls they can hide, and
//! * [`partition`] splits forward ranges around each MoE layer into pipelined
//!   micro-batches chosen by dynamic programming.
//!
//! [`sim`] predicts iteration time on a two-lane (compute + network) timeline
//! and [`moe`] holds executable routing semantics used to check that
//! partitioned programs compute exactly what the original did.

pub mod cost;
pub mod driver;
pub mod graphgen;
pub mod ir;
pub mod moe;
pub mod par;
pub mod partition;
pub mod pipeline;
pub mod sched_dw;
pub mod sim;
pub mod time;
mod timeline;

pub use time::Time;
