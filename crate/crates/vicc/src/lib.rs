//! A shared-nothing, multi-version transactional key-value engine whose
//! schedulers negotiate logical timestamps instead of drawing them from a
//! central clock, plus the tooling to validate and measure them.
//!
//! # Layout
//!
//! * [`core`] — transaction ids, logical-time bounds, commit stamps.
//! * [`mvstore`] — per-node version chains, visitor/writer lists, write locks.
//! * [`antidep`] — the distributed anti-dependency (rw) table.
//! * [`scheduler`] — the CV / PostSI / SV negotiation rules as pure functions.
//! * [`baselines`] — central snapshot-isolation coordinator and the
//!   correctness-free "optimal" scheduler.
//! * [`cluster`] — nodes, partitioning, the message protocol, the
//!   deterministic simulator and the threaded runtime.
//! * [`oracle`] — history checkers for consistent visibility, snapshot
//!   feasibility and serializability.
//! * [`bench`] — SmallBank / TPC-C-lite / microbenchmark generators, the
//!   experiment driver and CSV reporting.
//!
//! The engine supports three isolation levels sharing one mechanism:
//! consistent visibility (CV) tracks rw anti-dependencies so that each pair
//! of transactions is either fully visible or fully invisible to each other;
//! PostSI layers snapshot isolation on top by negotiating a (start, commit)
//! interval per transaction after the fact; SV layers serializability by
//! negotiating a single order. Every run can emit a history log that the
//! oracle validates independently of the engine.

pub mod antidep;
pub mod baselines;
pub mod bench;
pub mod cluster;
pub mod core;
pub mod mvstore;
pub mod oracle;
pub mod scheduler;
