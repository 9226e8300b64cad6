//! Message types on the cluster transport plus the run-wide counters.
//!
//! Every cross-node interaction is an `Envelope` carrying one `Payload`.
//! The simulated transport delivers envelopes in timestamp order with
//! per-link FIFO (constant per-link latency, monotone sequence numbers);
//! the threaded runtime executes the same payloads as direct calls. Both
//! count cross-node traffic per payload kind, which is what the message
//! accounting assertions read.

use crate::core::{SessionId, Stamp, Tid, Ts};
use crate::mvstore::Key;
use std::sync::atomic::{AtomicU64, Ordering};

#[derive(Clone, Debug)]
pub struct ReadReq {
    pub tid: Tid,
    pub keys: Vec<Key>,
    /// Delegated copy of the reader's lower bound; updated remotely and
    /// merged back by max.
    pub lower: Ts,
    /// Reader's current upper bound, for CID visibility.
    pub upper: Ts,
    /// CV: writers the reader must not see.
    pub invisible: Vec<Tid>,
    /// Baselines: snapshot visibility inputs.
    pub snapshot_start: Ts,
    pub snapshot_active: Vec<Tid>,
    pub register_visitor: bool,
}

/// One hit in a read reply.
#[derive(Clone, Debug)]
pub struct ReadHitWire {
    pub key: Key,
    pub value: Vec<u8>,
    pub seq: u32,
    pub cid: Ts,
    pub creator: Tid,
}

#[derive(Clone, Debug)]
pub struct ReadRet {
    pub tid: Tid,
    pub node: u32,
    /// Per requested key, request order.
    pub hits: Vec<ReadHitWire>,
    pub new_lower: Ts,
    pub max_cid: Ts,
    /// In-flight writers whose unpublished versions were stepped over.
    pub skipped: Vec<Tid>,
    /// A key with no visible version, if any; aborts the transaction.
    pub novis: Option<Key>,
}

#[derive(Clone, Debug)]
pub struct PrepareReq {
    pub tid: Tid,
    pub writes: Vec<(Key, Vec<u8>)>,
    pub read_versions: Vec<(Key, u32)>,
    pub invisible: Vec<Tid>,
    pub snapshot_start: Ts,
    pub snapshot_active: Vec<Tid>,
}

#[derive(Clone, Debug)]
pub enum PrepareResult {
    Ok {
        max_overwritten_cid: Ts,
        max_sid: Ts,
        ongoing: Vec<Tid>,
        /// Committed creators already in the touched chains. The host
        /// re-validates them against its current edge set: the prepare
        /// request's snapshot can be stale, and appending after a writer
        /// that has since become invisible would force its visibility.
        chain_creators: Vec<Tid>,
    },
    WouldBlock,
    Conflict,
}

#[derive(Clone, Debug)]
pub enum RegisterReply {
    Ongoing { lower: Ts },
    Final { sid: Ts },
    AbortedReader,
}

#[derive(Clone, Debug)]
pub enum CapReply {
    Applied,
    Final { sid: Ts },
    AbortedReader,
}

#[derive(Clone, Debug)]
pub enum ResolveReply {
    /// The writer's stamp is fixed; the reader must stay strictly below it.
    Decided { below: Ts },
    Registered,
    AbortedWriter,
}

#[derive(Clone, Debug)]
pub enum Payload {
    Read(ReadReq),
    ReadRet(ReadRet),
    Prepare(PrepareReq),
    PrepareRet { tid: Tid, node: u32, result: PrepareResult },
    /// Record reader --rw--> writer at the reader's host and sample its
    /// bound (commit round 1, contention only).
    Register { reader: Tid, writer: Tid },
    RegisterRet { reader: Tid, writer: Tid, reply: RegisterReply },
    /// Round 2: force an ongoing reader's upper bound strictly below the
    /// writer's stamp.
    Cap { reader: Tid, writer: Tid, below: Ts },
    CapRet { reader: Tid, writer: Tid, reply: CapReply },
    /// Reader-side resolution of a writer-list constraint at commit entry.
    Resolve { writer: Tid, reader: Tid, reader_lower: Ts },
    ResolveRet { reader: Tid, writer: Tid, reply: ResolveReply },
    /// Duplicate a read-time rw edge onto the writer's host (CV).
    RecordRw { reader: Tid, writer: Tid },
    /// Round 2: raise the commit lower bound of an ongoing writer the
    /// committing transaction anti-depends on.
    Raise { writer: Tid, value: Ts },
    /// Round 3: publish CIDs, clear writer lists, release locks.
    Publish { tid: Tid, cid: Ts, keys: Vec<Key> },
    PublishRet { tid: Tid, node: u32 },
    Rollback { tid: Tid, keys: Vec<Key> },
    RollbackRet { tid: Tid, node: u32 },
    /// Terminated transaction: drop its table entries.
    Purge { tid: Tid, writer_side: bool },
    /// Periodic TID-counter watermarks plus recently terminated stamps.
    Gossip { from: u32, watermarks: Vec<(SessionId, u32)>, stamps: Vec<(Tid, Option<Stamp>)> },
    CoordBegin { tid: Tid },
    CoordBeginRet { tid: Tid, start: Ts, active: Vec<Tid> },
    CoordEnd { tid: Tid },
    CoordEndRet { tid: Tid, commit: Ts },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub enum MsgKind {
    Read,
    ReadRet,
    Prepare,
    PrepareRet,
    Register,
    RegisterRet,
    Cap,
    CapRet,
    Resolve,
    ResolveRet,
    RecordRw,
    Raise,
    Publish,
    PublishRet,
    Rollback,
    RollbackRet,
    Purge,
    Gossip,
    CoordBegin,
    CoordBeginRet,
    CoordEnd,
    CoordEndRet,
}

pub const MSG_KIND_COUNT: usize = 22;

pub const ALL_MSG_KINDS: [MsgKind; MSG_KIND_COUNT] = [
    MsgKind::Read,
    MsgKind::ReadRet,
    MsgKind::Prepare,
    MsgKind::PrepareRet,
    MsgKind::Register,
    MsgKind::RegisterRet,
    MsgKind::Cap,
    MsgKind::CapRet,
    MsgKind::Resolve,
    MsgKind::ResolveRet,
    MsgKind::RecordRw,
    MsgKind::Raise,
    MsgKind::Publish,
    MsgKind::PublishRet,
    MsgKind::Rollback,
    MsgKind::RollbackRet,
    MsgKind::Purge,
    MsgKind::Gossip,
    MsgKind::CoordBegin,
    MsgKind::CoordBeginRet,
    MsgKind::CoordEnd,
    MsgKind::CoordEndRet,
];

impl MsgKind {
    pub fn name(self) -> &'static str {
        match self {
            MsgKind::Read => "read",
            MsgKind::ReadRet => "read-ret",
            MsgKind::Prepare => "prepare",
            MsgKind::PrepareRet => "prepare-ret",
            MsgKind::Register => "register",
            MsgKind::RegisterRet => "register-ret",
            MsgKind::Cap => "cap",
            MsgKind::CapRet => "cap-ret",
            MsgKind::Resolve => "resolve",
            MsgKind::ResolveRet => "resolve-ret",
            MsgKind::RecordRw => "record-rw",
            MsgKind::Raise => "raise",
            MsgKind::Publish => "publish",
            MsgKind::PublishRet => "publish-ret",
            MsgKind::Rollback => "rollback",
            MsgKind::RollbackRet => "rollback-ret",
            MsgKind::Purge => "purge",
            MsgKind::Gossip => "gossip",
            MsgKind::CoordBegin => "coord-begin",
            MsgKind::CoordBeginRet => "coord-begin-ret",
            MsgKind::CoordEnd => "coord-end",
            MsgKind::CoordEndRet => "coord-end-ret",
        }
    }
}

impl Payload {
    pub fn kind(&self) -> MsgKind {
        match self {
            Payload::Read(_) => MsgKind::Read,
            Payload::ReadRet(_) => MsgKind::ReadRet,
            Payload::Prepare(_) => MsgKind::Prepare,
            Payload::PrepareRet { .. } => MsgKind::PrepareRet,
            Payload::Register { .. } => MsgKind::Register,
            Payload::RegisterRet { .. } => MsgKind::RegisterRet,
            Payload::Cap { .. } => MsgKind::Cap,
            Payload::CapRet { .. } => MsgKind::CapRet,
            Payload::Resolve { .. } => MsgKind::Resolve,
            Payload::ResolveRet { .. } => MsgKind::ResolveRet,
            Payload::RecordRw { .. } => MsgKind::RecordRw,
            Payload::Raise { .. } => MsgKind::Raise,
            Payload::Publish { .. } => MsgKind::Publish,
            Payload::PublishRet { .. } => MsgKind::PublishRet,
            Payload::Rollback { .. } => MsgKind::Rollback,
            Payload::RollbackRet { .. } => MsgKind::RollbackRet,
            Payload::Purge { .. } => MsgKind::Purge,
            Payload::Gossip { .. } => MsgKind::Gossip,
            Payload::CoordBegin { .. } => MsgKind::CoordBegin,
            Payload::CoordBeginRet { .. } => MsgKind::CoordBeginRet,
            Payload::CoordEnd { .. } => MsgKind::CoordEnd,
            Payload::CoordEndRet { .. } => MsgKind::CoordEndRet,
        }
    }
}

#[derive(Debug)]
pub struct Envelope {
    pub src: u32,
    pub dst: u32,
    /// Per-link sequence number; FIFO per (src, dst).
    pub seq: u64,
    pub payload: Payload,
}

/// Shared run counters. Message counts cover cross-node envelopes only;
/// node-local work is free by construction.
#[derive(Debug, Default)]
pub struct Metrics {
    cross: [AtomicU64; MSG_KIND_COUNT],
    pub committed: AtomicU64,
    pub aborted_bound: AtomicU64,
    pub aborted_conflict: AtomicU64,
    pub aborted_novis: AtomicU64,
    pub aborted_lock_timeout: AtomicU64,
    pub attempts: AtomicU64,
    pub coord_requests: AtomicU64,
    pub collect_misses: AtomicU64,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count_cross(&self, kind: MsgKind) {
        self.cross[kind as usize].fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let mut cross = [0u64; MSG_KIND_COUNT];
        for (i, c) in self.cross.iter().enumerate() {
            cross[i] = c.load(Ordering::Relaxed);
        }
        MetricsSnapshot {
            cross,
            committed: self.committed.load(Ordering::Relaxed),
            aborted_bound: self.aborted_bound.load(Ordering::Relaxed),
            aborted_conflict: self.aborted_conflict.load(Ordering::Relaxed),
            aborted_novis: self.aborted_novis.load(Ordering::Relaxed),
            aborted_lock_timeout: self.aborted_lock_timeout.load(Ordering::Relaxed),
            attempts: self.attempts.load(Ordering::Relaxed),
            coord_requests: self.coord_requests.load(Ordering::Relaxed),
            collect_misses: self.collect_misses.load(Ordering::Relaxed),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricsSnapshot {
    pub cross: [u64; MSG_KIND_COUNT],
    pub committed: u64,
    pub aborted_bound: u64,
    pub aborted_conflict: u64,
    pub aborted_novis: u64,
    pub aborted_lock_timeout: u64,
    pub attempts: u64,
    pub coord_requests: u64,
    pub collect_misses: u64,
}

impl MetricsSnapshot {
    pub fn cross_of(&self, kind: MsgKind) -> u64 {
        self.cross[kind as usize]
    }

    pub fn cross_total(&self) -> u64 {
        self.cross.iter().sum()
    }

    pub fn aborted_total(&self) -> u64 {
        self.aborted_bound + self.aborted_conflict + self.aborted_novis + self.aborted_lock_timeout
    }
}
