//! Deterministic discrete-event runtime.
//!
//! Every cross-node interaction is an envelope delivered in (time, sequence)
//! order; links have constant latency, so delivery is FIFO per link and
//! lossless. Transactions are state machines owned by their host node's
//! workers; a worker runs one transaction at a time and draws the next
//! program from its pre-generated queue, so the whole run is a pure function
//! of (setup, seed) and replays byte-identically.
//!
//! The commit path for the visibility schedulers:
//!
//!   resolve  — settle writer-list constraints picked up on reads
//!   prepare  — round 1 / 2PC prepare: lock, validate, install, gather
//!   register — record rw edges at each ongoing reader's host, sample bounds
//!   decide   — fix the stamp from the gathered inputs
//!   cap      — round 2: bound updates to conflicting readers, acknowledged;
//!              an ack that reports an already-final reader raises a PostSI
//!              commit time (safe: starts never move) and aborts an SV
//!              transaction (its single order is already pinned into caps)
//!   raise    — round 2: lower-bound pushes to ongoing writers it missed
//!   publish  — round 3 / 2PC commit: set cids, unlock, then purge edges
//!
//! Rounds register..raise only happen under contention; a conflict-free
//! transaction goes resolve(empty) -> prepare -> decide -> publish with zero
//! extra traffic, and an entirely local one touches no link at all.

use crate::cluster::config::ClusterConfig;
use crate::cluster::history::HistorySink;
use crate::cluster::message::*;
use crate::cluster::node::{CoordService, NodeState};
use crate::cluster::program::{decode_i64, Program};
use crate::cluster::topology::Topology;
use crate::cluster::RunArtifacts;
use crate::core::{AbortReason, Level, Phase, Session, Stamp, Tid, Ts, TS_INF};
use crate::mvstore::Key;
use crate::oracle::EventKind;
use crate::scheduler::{conflict_bound_updates, decide_stamp_postsi, decide_stamp_sv, TxnCtx};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::{Arc, Mutex};

const PREPARE_RETRY_TICKS: u64 = 3;
const MAX_READ_REDOS: u32 = 32;

#[derive(Debug)]
enum Event {
    Deliver(Envelope),
    Worker { node: u32, worker: u32 },
    PrepareRetry { tid: Tid, node: u32 },
}

#[derive(Debug)]
struct Scheduled {
    at: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PrepState {
    Waiting,
    Blocked,
    Ok,
    Failed,
}

#[derive(Debug, PartialEq, Eq)]
enum MState {
    CoordBegin,
    Reading,
    Resolving,
    Preparing,
    Registering,
    Capping,
    CoordEnd,
    Publishing,
    RollingBack,
}

#[derive(Debug)]
struct QueuedProgram {
    program: Program,
    attempt: u32,
    pin: Ts,
}

struct Machine {
    tid: Tid,
    node: u32,
    worker: u32,
    ctx: Arc<Mutex<TxnCtx>>,
    program: Program,
    attempt: u32,
    state: MState,
    // reads
    read_groups: Vec<(u32, Vec<Key>)>,
    group_idx: usize,
    redos: u32,
    read_vals: BTreeMap<Key, i64>,
    /// Accepted hits: key -> (seq, data node, creator). Logged once the
    /// read set is stable; creators feed the CV consistency restart.
    read_hits: BTreeMap<Key, (u32, u32, Tid)>,
    // commit
    writes_by_node: BTreeMap<u32, Vec<(Key, Vec<u8>)>>,
    prep: BTreeMap<u32, PrepState>,
    outstanding: usize,
    gathered_sids: Vec<Ts>,
    gathered_readers: BTreeSet<Tid>,
    cap_targets: BTreeSet<Tid>,
    stamp: Option<Stamp>,
    abort_reason: Option<AbortReason>,
    commit_deadline: u64,
    coord_done: bool,
}

pub fn run_sim(
    cfg: &ClusterConfig,
    level: Level,
    data: &[(Key, i64)],
    programs: Vec<Vec<VecDeque<Program>>>,
) -> RunArtifacts {
    SimRun::new(cfg, level, data, programs).run()
}

struct SimRun {
    cfg: ClusterConfig,
    level: Level,
    topo: Topology,
    nodes: Vec<NodeState>,
    coord: CoordService,
    history: Arc<HistorySink>,
    metrics: Arc<Metrics>,
    heap: BinaryHeap<Reverse<Scheduled>>,
    now: u64,
    emit_seq: u64,
    link_seq: BTreeMap<(u32, u32), u64>,
    sessions: Vec<Vec<Session>>,
    queues: Vec<Vec<VecDeque<QueuedProgram>>>,
    machines: BTreeMap<Tid, Machine>,
    stamps: BTreeMap<Tid, Stamp>,
    committed_delta: i64,
}

impl SimRun {
    fn new(cfg: &ClusterConfig, level: Level, data: &[(Key, i64)], programs: Vec<Vec<VecDeque<Program>>>) -> Self {
        let topo = Topology::new(cfg.nodes, cfg.workers_per_node);
        let history = Arc::new(HistorySink::new());
        let metrics = Arc::new(Metrics::new());
        let mut nodes: Vec<NodeState> = (0..cfg.nodes)
            .map(|id| NodeState::new(id, level, topo, history.clone(), metrics.clone()))
            .collect();
        for (key, v) in data {
            let node = topo.node_of_key(*key) as usize;
            nodes[node].part.load(*key, crate::cluster::program::encode_i64(*v));
        }
        let sessions: Vec<Vec<Session>> = (0..cfg.nodes)
            .map(|n| (0..cfg.workers_per_node).map(|w| Session::new(topo.session_for(n, w))).collect())
            .collect();
        let queues: Vec<Vec<VecDeque<QueuedProgram>>> = programs
            .into_iter()
            .map(|per_node| {
                per_node
                    .into_iter()
                    .map(|q| q.into_iter().map(|program| QueuedProgram { program, attempt: 0, pin: TS_INF }).collect())
                    .collect()
            })
            .collect();
        let mut run = SimRun {
            cfg: *cfg,
            level,
            topo,
            nodes,
            coord: CoordService::new(),
            history,
            metrics,
            heap: BinaryHeap::new(),
            now: 0,
            emit_seq: 0,
            link_seq: BTreeMap::new(),
            sessions,
            queues,
            machines: BTreeMap::new(),
            stamps: BTreeMap::new(),
            committed_delta: 0,
        };
        for n in 0..cfg.nodes {
            for w in 0..cfg.workers_per_node {
                run.schedule(0, Event::Worker { node: n, worker: w });
            }
        }
        run
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.emit_seq += 1;
        self.heap.push(Reverse(Scheduled { at, seq: self.emit_seq, event }));
    }

    fn send(&mut self, src: u32, dst: u32, payload: Payload) {
        if src != dst {
            self.metrics.count_cross(payload.kind());
            if dst == self.topo.master()
                && matches!(payload.kind(), MsgKind::CoordBegin | MsgKind::CoordEnd)
            {
                self.metrics.coord_requests.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            }
        }
        let seq = self.link_seq.entry((src, dst)).or_insert(0);
        *seq += 1;
        let env = Envelope { src, dst, seq: *seq, payload };
        let latency = if src == dst { 0 } else { self.cfg.latency_ticks };
        let at = self.now + latency;
        self.schedule(at, Event::Deliver(env));
    }

    fn run(mut self) -> RunArtifacts {
        while let Some(Reverse(s)) = self.heap.pop() {
            self.now = s.at;
            match s.event {
                Event::Deliver(env) => self.deliver(env),
                Event::Worker { node, worker } => self.worker_start(node, worker),
                Event::PrepareRetry { tid, node } => self.prepare_retry(tid, node),
            }
        }
        assert!(self.machines.is_empty(), "drained run left live machines");
        let mut final_values = BTreeMap::new();
        let mut leftover = 0;
        for node in &self.nodes {
            for (k, v) in node.part.committed_values() {
                final_values.insert(k, decode_i64(&v));
            }
            leftover += node.table.lock().unwrap().len();
        }
        RunArtifacts {
            history: self.history.take(),
            stamps: self.stamps,
            metrics: self.metrics.snapshot(),
            committed_delta: self.committed_delta,
            final_values,
            ticks: self.now,
            leftover_antidep_entries: leftover,
        }
    }

    // ---- request dispatch --------------------------------------------------

    fn deliver(&mut self, env: Envelope) {
        let Envelope { src, dst, payload, .. } = env;
        if dst == self.topo.master() {
            match payload {
                Payload::CoordBegin { tid } => {
                    let (start, active) = self.coord.begin(tid);
                    self.send(dst, src, Payload::CoordBeginRet { tid, start, active });
                }
                Payload::CoordEnd { tid } => {
                    let commit = self.coord.end(tid);
                    self.send(dst, src, Payload::CoordEndRet { tid, commit });
                }
                other => panic!("master received {:?}", other.kind()),
            }
            return;
        }
        match payload {
            Payload::Read(req) => {
                let ret = self.nodes[dst as usize].serve_read(&req);
                self.send(dst, src, Payload::ReadRet(ret));
            }
            Payload::Prepare(req) => {
                let tid = req.tid;
                let result = self.nodes[dst as usize].serve_prepare(&req);
                self.send(dst, src, Payload::PrepareRet { tid, node: dst, result });
            }
            Payload::Register { reader, writer } => {
                let reply = self.nodes[dst as usize].serve_register(reader, writer);
                self.send(dst, src, Payload::RegisterRet { reader, writer, reply });
            }
            Payload::Cap { reader, writer, below } => {
                let reply = self.nodes[dst as usize].serve_cap(reader, below);
                self.send(dst, src, Payload::CapRet { reader, writer, reply });
            }
            Payload::Resolve { writer, reader, reader_lower } => {
                let reply = self.nodes[dst as usize].serve_resolve(writer, reader, reader_lower);
                self.send(dst, src, Payload::ResolveRet { reader, writer, reply });
            }
            Payload::RecordRw { reader, writer } => {
                self.nodes[dst as usize].serve_record(reader, writer);
            }
            Payload::Raise { writer, value } => {
                self.nodes[dst as usize].serve_raise(writer, value);
            }
            Payload::Publish { tid, cid, keys } => {
                self.nodes[dst as usize].serve_publish(tid, cid, &keys);
                self.send(dst, src, Payload::PublishRet { tid, node: dst });
            }
            Payload::Rollback { tid, keys } => {
                self.nodes[dst as usize].serve_rollback(tid, &keys);
                self.send(dst, src, Payload::RollbackRet { tid, node: dst });
            }
            Payload::Purge { tid, writer_side } => {
                self.nodes[dst as usize].serve_purge(tid, writer_side);
            }
            Payload::Gossip { from: _, watermarks, stamps } => {
                self.nodes[dst as usize].apply_gossip(&watermarks, &stamps);
            }
            reply => self.machine_reply_entry(reply),
        }
    }

    fn machine_reply_entry(&mut self, payload: Payload) {
        let tid = match &payload {
            Payload::ReadRet(r) => r.tid,
            Payload::PrepareRet { tid, .. } => *tid,
            Payload::RegisterRet { writer, .. } => *writer,
            Payload::CapRet { writer, .. } => *writer,
            Payload::ResolveRet { reader, .. } => *reader,
            Payload::PublishRet { tid, .. } => *tid,
            Payload::RollbackRet { tid, .. } => *tid,
            Payload::CoordBeginRet { tid, .. } => *tid,
            Payload::CoordEndRet { tid, .. } => *tid,
            other => panic!("unroutable payload {:?}", other.kind()),
        };
        let Some(mut m) = self.machines.remove(&tid) else {
            // Late replies to terminated transactions (e.g. the coordinator
            // end of an aborted baseline txn) are dropped.
            return;
        };
        self.on_reply(&mut m, payload);
        self.settle(m);
    }

    fn settle(&mut self, mut m: Machine) {
        match m.state {
            MState::Publishing if m.outstanding == 0 => {
                if self.level == Level::CentralSi {
                    // The TID leaves the coordinator snapshot only after the
                    // writes are visible everywhere.
                    m.state = MState::CoordEnd;
                    self.send(m.node, self.topo.master(), Payload::CoordEnd { tid: m.tid });
                    self.machines.insert(m.tid, m);
                } else {
                    self.finalize_commit(m);
                }
            }
            MState::CoordEnd if m.coord_done => self.finalize_commit(m),
            MState::RollingBack if m.outstanding == 0 => self.finalize_abort(m),
            _ => {
                self.machines.insert(m.tid, m);
            }
        }
    }

    // ---- worker lifecycle --------------------------------------------------

    fn worker_start(&mut self, node: u32, worker: u32) {
        let Some(q) = self.queues[node as usize][worker as usize].pop_front() else {
            return;
        };
        let tid = self.sessions[node as usize][worker as usize].next_tid();
        let mut ctx = TxnCtx::begin_pinned(tid, self.level, q.pin);
        if self.level == Level::Optimal {
            ctx.snapshot_start = self.nodes[node as usize].optimal_ts();
        }
        let ctx = Arc::new(Mutex::new(ctx));
        self.nodes[node as usize].register_live(tid, ctx.clone());

        let mut groups: BTreeMap<u32, Vec<Key>> = BTreeMap::new();
        for k in &q.program.reads {
            groups.entry(self.topo.node_of_key(*k)).or_default().push(*k);
        }
        let mut m = Machine {
            tid,
            node,
            worker,
            ctx,
            program: q.program,
            attempt: q.attempt,
            state: MState::Reading,
            read_groups: groups.into_iter().collect(),
            group_idx: 0,
            redos: 0,
            read_vals: BTreeMap::new(),
            read_hits: BTreeMap::new(),
            writes_by_node: BTreeMap::new(),
            prep: BTreeMap::new(),
            outstanding: 0,
            gathered_sids: Vec::new(),
            gathered_readers: BTreeSet::new(),
            cap_targets: BTreeSet::new(),
            stamp: None,
            abort_reason: None,
            commit_deadline: 0,
            coord_done: false,
        };
        if self.level == Level::CentralSi {
            m.state = MState::CoordBegin;
            self.send(node, self.topo.master(), Payload::CoordBegin { tid });
        } else {
            self.next_read_group(&mut m);
        }
        self.settle(m);
    }

    fn requeue_or_drop(&mut self, m: &Machine, reason: AbortReason) {
        let pin = if reason == AbortReason::BoundViolation {
            self.machine_pin(m)
        } else {
            TS_INF
        };
        if m.attempt + 1 < self.cfg.max_retries {
            self.queues[m.node as usize][m.worker as usize].push_front(QueuedProgram {
                program: m.program.clone(),
                attempt: m.attempt + 1,
                pin,
            });
        }
    }

    fn machine_pin(&self, m: &Machine) -> Ts {
        m.ctx.lock().unwrap().pin_for_retry()
    }

    // ---- reads ---------------------------------------------------------

    fn next_read_group(&mut self, m: &mut Machine) {
        if m.group_idx >= m.read_groups.len() {
            self.enter_commit(m);
            return;
        }
        let (node, keys) = m.read_groups[m.group_idx].clone();
        let req = {
            let ctx = m.ctx.lock().unwrap();
            ReadReq {
                tid: m.tid,
                keys,
                lower: match self.level {
                    Level::PostSi => ctx.start.lower,
                    Level::Sv => ctx.order.lower,
                    _ => 0,
                },
                upper: ctx.read_upper(),
                invisible: if self.level == Level::Cv {
                    self.nodes[m.node as usize].table.lock().unwrap().writers_invisible_to(m.tid)
                } else {
                    Vec::new()
                },
                snapshot_start: ctx.snapshot_start,
                snapshot_active: ctx.snapshot_active.iter().copied().collect(),
                register_visitor: matches!(self.level, Level::Cv | Level::PostSi | Level::Sv),
            }
        };
        m.state = MState::Reading;
        self.send(m.node, node, Payload::Read(req));
    }

    fn on_read_ret(&mut self, m: &mut Machine, ret: ReadRet) {
        if let Some(key) = ret.novis {
            let _ = key;
            self.start_abort(m, AbortReason::NoVisibleVersion);
            return;
        }
        self.record_read_skips(m, &ret.skipped);
        // CV atomicity: a writer this transaction now depends on (because a
        // version of it was stepped over, here or on an earlier batch) must
        // not appear among the accepted hits. Restart the read phase against
        // the fresh edge set when it does; edges only grow, so this settles.
        if self.level == Level::Cv {
            let stale = {
                let table = self.nodes[m.node as usize].table.lock().unwrap();
                ret.hits.iter().any(|h| table.contains(m.tid, h.creator))
                    || m.read_hits.values().any(|(_, _, c)| table.contains(m.tid, *c))
            };
            if stale {
                m.redos += 1;
                if m.redos > MAX_READ_REDOS {
                    self.start_abort(m, AbortReason::WriteConflict);
                    return;
                }
                m.group_idx = 0;
                m.read_vals.clear();
                m.read_hits.clear();
                self.next_read_group(m);
                return;
            }
        }
        {
            let mut ctx = m.ctx.lock().unwrap();
            ctx.merge_remote_lower(ret.new_lower);
            if self.level == Level::PostSi {
                ctx.commit_lower = ctx.commit_lower.max(ret.max_cid);
            }
            ctx.max_cid_seen = ctx.max_cid_seen.max(ret.max_cid);
            for h in &ret.hits {
                ctx.read_versions.insert(h.key, h.seq);
            }
        }
        for h in &ret.hits {
            m.read_vals.insert(h.key, decode_i64(&h.value));
            m.read_hits.insert(h.key, (h.seq, ret.node, h.creator));
        }
        if !m.ctx.lock().unwrap().bounds_ok() {
            self.start_abort(m, AbortReason::BoundViolation);
            return;
        }
        m.group_idx += 1;
        self.next_read_group(m);
    }

    fn record_read_skips(&mut self, m: &mut Machine, skipped: &[Tid]) {
        if skipped.is_empty() {
            return;
        }
        let mut ctx = m.ctx.lock().unwrap();
        let new: Vec<Tid> = skipped.iter().copied().filter(|w| ctx.pending_writers.insert(*w)).collect();
        drop(ctx);
        for w in new {
            if self.level == Level::Cv {
                // CV resolves invisibility through the table; record the edge
                // now so later reads skip this writer everywhere.
                self.nodes[m.node as usize].table.lock().unwrap().record(m.tid, w);
                let host = self.topo.node_of_tid(w);
                self.send(m.node, host, Payload::RecordRw { reader: m.tid, writer: w });
            }
        }
    }

    // ---- commit pipeline -------------------------------------------------

    fn enter_commit(&mut self, m: &mut Machine) {
        // The read set is final; log it.
        for (key, (seq, node, _)) in &m.read_hits {
            self.history.log(EventKind::Read, m.tid, Some(*key), *seq, *node);
        }
        {
            let mut ctx = m.ctx.lock().unwrap();
            ctx.phase = Phase::Preparing;
            let writes = m.program.apply(&m.read_vals);
            for (k, v) in writes {
                ctx.buffer_write(k, v);
            }
            for (k, v) in ctx.write_set.iter() {
                m.writes_by_node.entry(self.topo.node_of_key(*k)).or_default().push((*k, v.clone()));
            }
        }
        m.commit_deadline = self.now + self.cfg.lock_timeout_ticks;
        self.start_resolving(m);
    }

    fn start_resolving(&mut self, m: &mut Machine) {
        m.state = MState::Resolving;
        m.outstanding = 0;
        if !matches!(self.level, Level::PostSi | Level::Sv) {
            self.after_resolving(m);
            return;
        }
        let (pendings, lower) = {
            let ctx = m.ctx.lock().unwrap();
            let lower = match self.level {
                Level::PostSi => ctx.start.lower,
                Level::Sv => ctx.order.lower,
                _ => 0,
            };
            (ctx.pending_writers.iter().copied().collect::<Vec<_>>(), lower)
        };
        for w in pendings {
            let host = self.topo.node_of_tid(w);
            m.outstanding += 1;
            self.send(m.node, host, Payload::Resolve { writer: w, reader: m.tid, reader_lower: lower });
        }
        if m.outstanding == 0 {
            self.after_resolving(m);
        }
    }

    fn on_resolve_ret(&mut self, m: &mut Machine, writer: Tid, reply: ResolveReply) {
        m.outstanding -= 1;
        match reply {
            ResolveReply::Decided { below } => {
                m.ctx.lock().unwrap().apply_upper_below(below);
            }
            ResolveReply::Registered => {
                // Duplicate of the edge on this (the reader's) host.
                self.nodes[m.node as usize].table.lock().unwrap().record(m.tid, writer);
            }
            ResolveReply::AbortedWriter => {}
        }
        if m.outstanding == 0 {
            self.after_resolving(m);
        }
    }

    fn after_resolving(&mut self, m: &mut Machine) {
        if !m.ctx.lock().unwrap().bounds_ok() {
            self.start_abort(m, AbortReason::BoundViolation);
            return;
        }
        if m.writes_by_node.is_empty() {
            // Read-only: decide and finish, no participants to publish.
            if self.decide(m).is_err() {
                self.start_abort(m, AbortReason::BoundViolation);
                return;
            }
            m.state = MState::Publishing;
            m.outstanding = 0;
            return;
        }
        self.start_preparing(m);
    }

    fn start_preparing(&mut self, m: &mut Machine) {
        m.state = MState::Preparing;
        m.prep = m.writes_by_node.keys().map(|n| (*n, PrepState::Waiting)).collect();
        let nodes: Vec<u32> = m.writes_by_node.keys().copied().collect();
        for n in nodes {
            self.send_prepare(m, n);
        }
    }

    fn send_prepare(&mut self, m: &Machine, node: u32) {
        let ctx = m.ctx.lock().unwrap();
        let writes = m.writes_by_node[&node].clone();
        let read_versions = writes
            .iter()
            .filter_map(|(k, _)| ctx.read_versions.get(k).map(|s| (*k, *s)))
            .collect();
        let invisible = if matches!(self.level, Level::Cv | Level::PostSi | Level::Sv) {
            self.nodes[m.node as usize].table.lock().unwrap().writers_invisible_to(m.tid)
        } else {
            Vec::new()
        };
        let req = PrepareReq {
            tid: m.tid,
            writes,
            read_versions,
            invisible,
            snapshot_start: ctx.snapshot_start,
            snapshot_active: ctx.snapshot_active.iter().copied().collect(),
        };
        drop(ctx);
        self.send(m.node, node, Payload::Prepare(req));
    }

    fn prepare_retry(&mut self, tid: Tid, node: u32) {
        let Some(mut m) = self.machines.remove(&tid) else { return };
        if m.state == MState::Preparing && m.prep.get(&node) == Some(&PrepState::Blocked) {
            m.prep.insert(node, PrepState::Waiting);
            self.send_prepare(&m, node);
        }
        self.machines.insert(tid, m);
    }

    fn on_prepare_ret(&mut self, m: &mut Machine, node: u32, result: PrepareResult) {
        if m.state != MState::Preparing {
            // Conflict elsewhere already aborted this txn while a prepare was
            // in flight; undo a successful straggler.
            if matches!(result, PrepareResult::Ok { .. }) {
                let keys: Vec<Key> = m.writes_by_node[&node].iter().map(|(k, _)| *k).collect();
                self.send(m.node, node, Payload::Rollback { tid: m.tid, keys });
                m.outstanding += 1;
            }
            return;
        }
        match result {
            PrepareResult::Ok { max_overwritten_cid, max_sid, ongoing, chain_creators } => {
                // Re-validate the touched chains against the current edge
                // set: the request's invisible snapshot may predate edges
                // recorded while the prepare was in flight, and every such
                // edge is guaranteed to be here before the writer's versions
                // became readable.
                let stale = self.level == Level::Cv && {
                    let table = self.nodes[m.node as usize].table.lock().unwrap();
                    chain_creators.iter().any(|w| table.contains(m.tid, *w))
                };
                if stale {
                    m.prep.insert(node, PrepState::Ok);
                    m.abort_reason = Some(AbortReason::WriteConflict);
                } else {
                    m.prep.insert(node, PrepState::Ok);
                    m.gathered_sids.push(max_sid);
                    m.gathered_readers.extend(ongoing);
                    let mut ctx = m.ctx.lock().unwrap();
                    ctx.fold_access(max_overwritten_cid);
                }
            }
            PrepareResult::WouldBlock => {
                if self.now >= m.commit_deadline {
                    m.prep.insert(node, PrepState::Failed);
                    m.abort_reason = Some(AbortReason::LockTimeout);
                } else {
                    m.prep.insert(node, PrepState::Blocked);
                    self.schedule(
                        self.now + PREPARE_RETRY_TICKS,
                        Event::PrepareRetry { tid: m.tid, node },
                    );
                }
            }
            PrepareResult::Conflict => {
                m.prep.insert(node, PrepState::Failed);
                m.abort_reason = Some(AbortReason::WriteConflict);
            }
        }
        if m.abort_reason.is_some() {
            // Stop retrying blocked participants (they hold nothing) and
            // abort once no prepare is in flight.
            for st in m.prep.values_mut() {
                if *st == PrepState::Blocked {
                    *st = PrepState::Failed;
                }
            }
            if !m.prep.values().any(|s| *s == PrepState::Waiting) {
                self.start_abort(m, m.abort_reason.unwrap());
            }
            return;
        }
        if m.prep.values().all(|s| *s == PrepState::Ok) {
            {
                let ctx = m.ctx.lock().unwrap();
                if !ctx.bounds_ok() {
                    drop(ctx);
                    self.start_abort(m, AbortReason::BoundViolation);
                    return;
                }
            }
            self.start_registering(m);
        }
    }

    fn start_registering(&mut self, m: &mut Machine) {
        m.state = MState::Registering;
        m.outstanding = 0;
        if matches!(self.level, Level::Cv | Level::PostSi | Level::Sv) {
            let targets: Vec<Tid> = m.gathered_readers.iter().copied().filter(|r| *r != m.tid).collect();
            for r in targets {
                let host = self.topo.node_of_tid(r);
                m.outstanding += 1;
                self.send(m.node, host, Payload::Register { reader: r, writer: m.tid });
            }
        }
        if m.outstanding == 0 {
            self.after_registering(m);
        }
    }

    fn on_register_ret(&mut self, m: &mut Machine, reader: Tid, reply: RegisterReply) {
        m.outstanding -= 1;
        match reply {
            RegisterReply::Ongoing { lower } => {
                // Writer-host duplicate of the edge, plus the sampled bound.
                self.nodes[m.node as usize].table.lock().unwrap().record(reader, m.tid);
                m.ctx.lock().unwrap().incoming_lowers.push(lower);
                m.cap_targets.insert(reader);
            }
            RegisterReply::Final { sid } => {
                m.ctx.lock().unwrap().incoming_lowers.push(sid);
            }
            RegisterReply::AbortedReader => {}
        }
        if m.outstanding == 0 {
            self.after_registering(m);
        }
    }

    fn after_registering(&mut self, m: &mut Machine) {
        if self.decide(m).is_err() {
            self.start_abort(m, AbortReason::BoundViolation);
            return;
        }
        self.start_capping(m);
    }

    /// Fix the commit stamp from the accumulated inputs (Rule 4(a)).
    fn decide(&mut self, m: &mut Machine) -> Result<(), AbortReason> {
        let mut ctx = m.ctx.lock().unwrap();
        let stamp = match self.level {
            Level::PostSi => {
                decide_stamp_postsi(ctx.start, ctx.commit_lower, &m.gathered_sids, &ctx.incoming_lowers)?
            }
            Level::Sv => decide_stamp_sv(ctx.order, &m.gathered_sids, &ctx.incoming_lowers)?,
            Level::Cv => Stamp::Marker(self.nodes[m.node as usize].next_marker()),
            // Baselines stamp versions with the creator's start timestamp;
            // snapshot visibility then treats each transaction atomically.
            Level::CentralSi | Level::Optimal => Stamp::Marker(ctx.snapshot_start),
        };
        ctx.decided = Some(stamp);
        m.stamp = Some(stamp);
        for t in ctx.extra_cap_targets.iter() {
            m.cap_targets.insert(*t);
        }
        Ok(())
    }

    fn start_capping(&mut self, m: &mut Machine) {
        m.state = MState::Capping;
        m.outstanding = 0;
        if matches!(self.level, Level::PostSi | Level::Sv) {
            let below = m.stamp.unwrap().cid();
            let targets: Vec<Tid> = m.cap_targets.iter().copied().filter(|r| *r != m.tid).collect();
            for r in targets {
                let host = self.topo.node_of_tid(r);
                m.outstanding += 1;
                self.send(m.node, host, Payload::Cap { reader: r, writer: m.tid, below });
            }
        }
        if m.outstanding == 0 {
            self.after_capping(m);
        }
    }

    fn on_cap_ret(&mut self, m: &mut Machine, reply: CapReply) {
        m.outstanding -= 1;
        if let CapReply::Final { sid } = reply {
            // The reader finalized before the cap landed; adapt to its stamp.
            match m.stamp.unwrap() {
                Stamp::Interval { start, commit } => {
                    if sid >= commit {
                        let raised = Stamp::Interval { start, commit: sid + 1 };
                        m.stamp = Some(raised);
                        m.ctx.lock().unwrap().decided = Some(raised);
                    }
                }
                Stamp::Order(o) => {
                    // The reader finalized at or above this order and must
                    // stay strictly below it; the order cannot be raised
                    // (it is already pinned into caps and CIDs), so give up.
                    if sid >= o {
                        m.abort_reason = Some(AbortReason::BoundViolation);
                    }
                }
                Stamp::Marker(_) => {}
            }
        }
        if m.outstanding == 0 {
            if let Some(reason) = m.abort_reason {
                self.start_abort(m, reason);
            } else {
                self.after_capping(m);
            }
        }
    }

    fn after_capping(&mut self, m: &mut Machine) {
        // Round 2, writer side: push up the commit lower bounds of ongoing
        // writers that overwrote this transaction's reads.
        if matches!(self.level, Level::PostSi | Level::Sv) {
            let raise = conflict_bound_updates(m.stamp.unwrap()).1;
            let targets = self.nodes[m.node as usize].table.lock().unwrap().writers_invisible_to(m.tid);
            for w in targets {
                let host = self.topo.node_of_tid(w);
                self.send(m.node, host, Payload::Raise { writer: w, value: raise });
            }
        }
        self.start_publishing(m);
    }

    fn start_publishing(&mut self, m: &mut Machine) {
        m.state = MState::Publishing;
        m.outstanding = 0;
        let cid = m.stamp.unwrap().cid();
        let nodes: Vec<u32> = m.writes_by_node.keys().copied().collect();
        for n in nodes {
            let keys: Vec<Key> = m.writes_by_node[&n].iter().map(|(k, _)| *k).collect();
            m.outstanding += 1;
            self.send(m.node, n, Payload::Publish { tid: m.tid, cid, keys });
        }
    }

    fn on_coord_end_ret(&mut self, m: &mut Machine, _commit: Ts) {
        m.coord_done = true;
    }

    // ---- abort path --------------------------------------------------------

    fn start_abort(&mut self, m: &mut Machine, reason: AbortReason) {
        m.abort_reason = Some(reason);
        m.state = MState::RollingBack;
        m.outstanding = 0;
        let prepared: Vec<u32> =
            m.prep.iter().filter(|(_, s)| **s == PrepState::Ok).map(|(n, _)| *n).collect();
        for n in prepared {
            let keys: Vec<Key> = m.writes_by_node[&n].iter().map(|(k, _)| *k).collect();
            m.outstanding += 1;
            self.send(m.node, n, Payload::Rollback { tid: m.tid, keys });
        }
        if self.level == Level::CentralSi && m.stamp.is_none() {
            // Drop the TID from the coordinator snapshot; the reply is
            // discarded.
            self.send(m.node, self.topo.master(), Payload::CoordEnd { tid: m.tid });
        }
    }

    // ---- completion ----------------------------------------------------

    fn finalize_commit(&mut self, m: Machine) {
        let stamp = m.stamp.expect("committed without stamp");
        {
            let mut ctx = m.ctx.lock().unwrap();
            ctx.phase = Phase::Committed;
        }
        self.history.log(EventKind::Commit, m.tid, None, 0, m.node);
        self.nodes[m.node as usize].note_terminated(m.tid, Some(stamp));
        self.nodes[m.node as usize].drop_live(m.tid);
        self.purge_after_terminate(&m, self.level != Level::Cv);
        self.stamps.insert(m.tid, stamp);
        self.committed_delta += m.program.delta;
        self.metrics.committed.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.metrics.attempts.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.gossip_after_commit(m.node);
        self.schedule(self.now + self.cfg.think_ticks, Event::Worker { node: m.node, worker: m.worker });
    }

    fn finalize_abort(&mut self, m: Machine) {
        let reason = m.abort_reason.unwrap_or(AbortReason::WriteConflict);
        {
            let mut ctx = m.ctx.lock().unwrap();
            ctx.phase = Phase::Aborted;
        }
        self.history.log(EventKind::Abort, m.tid, None, 0, m.node);
        self.nodes[m.node as usize].note_terminated(m.tid, None);
        self.nodes[m.node as usize].drop_live(m.tid);
        self.purge_after_terminate(&m, true);
        let counter = match reason {
            AbortReason::BoundViolation => &self.metrics.aborted_bound,
            AbortReason::WriteConflict => &self.metrics.aborted_conflict,
            AbortReason::NoVisibleVersion => &self.metrics.aborted_novis,
            AbortReason::LockTimeout => &self.metrics.aborted_lock_timeout,
        };
        counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.metrics.attempts.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.requeue_or_drop(&m, reason);
        self.schedule(self.now + self.cfg.think_ticks, Event::Worker { node: m.node, worker: m.worker });
    }

    fn purge_after_terminate(&mut self, m: &Machine, writer_side: bool) {
        let hosts = self.nodes[m.node as usize].purge_local(m.tid, writer_side);
        for h in hosts {
            self.send(m.node, h, Payload::Purge { tid: m.tid, writer_side });
        }
    }

    fn gossip_after_commit(&mut self, node: u32) {
        if !matches!(self.level, Level::Cv | Level::PostSi | Level::Sv) {
            return;
        }
        if let Some((watermarks, stamps)) = self.nodes[node as usize].gossip_tick(self.cfg.watermark_interval) {
            for other in 0..self.cfg.nodes {
                if other != node {
                    self.send(
                        node,
                        other,
                        Payload::Gossip { from: node, watermarks: watermarks.clone(), stamps: stamps.clone() },
                    );
                }
            }
        }
    }

    // ---- reply routing ---------------------------------------------------

    fn on_reply(&mut self, m: &mut Machine, payload: Payload) {
        match payload {
            Payload::ReadRet(ret) => {
                if m.state == MState::Reading {
                    self.on_read_ret(m, ret);
                }
            }
            Payload::PrepareRet { node, result, .. } => self.on_prepare_ret(m, node, result),
            Payload::RegisterRet { reader, reply, .. } => {
                if m.state == MState::Registering {
                    self.on_register_ret(m, reader, reply);
                }
            }
            Payload::CapRet { reply, .. } => {
                if m.state == MState::Capping {
                    self.on_cap_ret(m, reply);
                }
            }
            Payload::ResolveRet { writer, reply, .. } => {
                if m.state == MState::Resolving {
                    self.on_resolve_ret(m, writer, reply);
                }
            }
            Payload::PublishRet { .. } => {
                if m.state == MState::Publishing {
                    m.outstanding -= 1;
                }
            }
            Payload::RollbackRet { .. } => {
                if m.state == MState::RollingBack {
                    m.outstanding -= 1;
                }
            }
            Payload::CoordBeginRet { start, active, .. } => {
                if m.state == MState::CoordBegin {
                    {
                        let mut ctx = m.ctx.lock().unwrap();
                        ctx.snapshot_start = start;
                        ctx.snapshot_active = active.into_iter().collect();
                    }
                    self.next_read_group(m);
                }
            }
            Payload::CoordEndRet { commit, .. } => {
                if m.state == MState::CoordEnd {
                    self.on_coord_end_ret(m, commit);
                }
            }
            other => panic!("machine got {:?}", other.kind()),
        }
    }
}
