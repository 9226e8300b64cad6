//! Threaded runtime for real throughput measurements. Every node's state is
//! shared behind fine-grained locks and each (node, worker) pair is an OS
//! thread running the same protocol as the simulator, with cross-node
//! message counters bumped at each remote interaction. One tick of the
//! configured lock timeout is one microsecond here.
//!
//! The coordinator carries a configurable per-request service delay and a
//! single service gate, which is precisely the serialization point the
//! central-SI baseline is meant to exhibit.

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
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

const LOCK_POLL: Duration = Duration::from_micros(50);
const MAX_READ_REDOS: u32 = 32;

struct World {
    cfg: ClusterConfig,
    level: Level,
    topo: Topology,
    nodes: Vec<NodeState>,
    coord: CoordService,
    coord_gate: Mutex<()>,
    history: Arc<HistorySink>,
    metrics: Arc<Metrics>,
    stamps: Mutex<BTreeMap<Tid, Stamp>>,
    delta: AtomicI64,
    stop: AtomicBool,
    gossip_gates: Vec<Mutex<()>>,
}

impl World {
    fn msg(&self, src: u32, dst: u32, kind: MsgKind) {
        if src != dst {
            self.metrics.count_cross(kind);
            if dst == self.topo.master() && matches!(kind, MsgKind::CoordBegin | MsgKind::CoordEnd) {
                self.metrics.coord_requests.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    fn roundtrip(&self, src: u32, dst: u32, req: MsgKind, ret: MsgKind) {
        self.msg(src, dst, req);
        self.msg(dst, src, ret);
    }

    fn coord_call(&self, src: u32, begin: bool, tid: Tid) -> (Ts, Vec<Tid>) {
        let kind = if begin { MsgKind::CoordBegin } else { MsgKind::CoordEnd };
        let ret = if begin { MsgKind::CoordBeginRet } else { MsgKind::CoordEndRet };
        self.msg(src, self.topo.master(), kind);
        let out = {
            let _gate = self.coord_gate.lock().unwrap();
            if self.cfg.coord_delay_us > 0 {
                thread::sleep(Duration::from_micros(self.cfg.coord_delay_us));
            }
            if begin {
                self.coord.begin(tid)
            } else {
                (self.coord.end(tid), Vec::new())
            }
        };
        self.msg(self.topo.master(), src, ret);
        out
    }
}

/// Run every worker's program queue to completion, or keep cycling the
/// queues until `duration` elapses when one is given.
pub fn run_concurrent(
    cfg: &ClusterConfig,
    level: Level,
    data: &[(Key, i64)],
    programs: Vec<Vec<VecDeque<Program>>>,
    duration: Option<Duration>,
) -> RunArtifacts {
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
    let world = Arc::new(World {
        cfg: *cfg,
        level,
        topo,
        nodes,
        coord: CoordService::new(),
        coord_gate: Mutex::new(()),
        history: history.clone(),
        metrics: metrics.clone(),
        stamps: Mutex::new(BTreeMap::new()),
        delta: AtomicI64::new(0),
        stop: AtomicBool::new(false),
        gossip_gates: (0..cfg.nodes).map(|_| Mutex::new(())).collect(),
    });

    let started = Instant::now();
    let mut handles = Vec::new();
    for (n, per_node) in programs.into_iter().enumerate() {
        for (w, queue) in per_node.into_iter().enumerate() {
            let world = world.clone();
            let session = Session::new(topo.session_for(n as u32, w as u32));
            handles.push(thread::spawn(move || {
                worker_loop(&world, n as u32, session, queue, duration);
            }));
        }
    }
    if let Some(d) = duration {
        thread::sleep(d);
        world.stop.store(true, Ordering::Relaxed);
    }
    for h in handles {
        h.join().unwrap();
    }
    let elapsed_us = started.elapsed().as_micros() as u64;

    let mut final_values = BTreeMap::new();
    let mut leftover = 0;
    for node in &world.nodes {
        for (k, v) in node.part.committed_values() {
            final_values.insert(k, decode_i64(&v));
        }
        leftover += node.table.lock().unwrap().len();
    }
    let stamps = std::mem::take(&mut *world.stamps.lock().unwrap());
    RunArtifacts {
        history: history.take(),
        stamps,
        metrics: metrics.snapshot(),
        committed_delta: world.delta.load(Ordering::Relaxed),
        final_values,
        ticks: elapsed_us.max(1),
        leftover_antidep_entries: leftover,
    }
}

fn worker_loop(
    world: &World,
    node: u32,
    mut session: Session,
    mut queue: VecDeque<Program>,
    cycle: Option<Duration>,
) {
    while let Some(program) = queue.pop_front() {
        if world.stop.load(Ordering::Relaxed) {
            break;
        }
        let mut attempt = 0u32;
        let mut pin = TS_INF;
        loop {
            let tid = session.next_tid();
            match run_txn(world, node, tid, &program, pin) {
                Ok(stamp) => {
                    world.stamps.lock().unwrap().insert(tid, stamp);
                    world.delta.fetch_add(program.delta, Ordering::Relaxed);
                    break;
                }
                Err((reason, retry_pin)) => {
                    attempt += 1;
                    if attempt >= world.cfg.max_retries || world.stop.load(Ordering::Relaxed) {
                        break;
                    }
                    pin = if reason == AbortReason::BoundViolation { retry_pin } else { TS_INF };
                }
            }
        }
        if world.cfg.think_us > 0 {
            thread::sleep(Duration::from_micros(world.cfg.think_us));
        }
        if cycle.is_some() {
            queue.push_back(program);
        }
    }
}

struct Abort(AbortReason, Ts);

fn run_txn(world: &World, node: u32, tid: Tid, program: &Program, pin: Ts) -> Result<Stamp, (AbortReason, Ts)> {
    let level = world.level;
    let host = &world.nodes[node as usize];
    let mut ctx = TxnCtx::begin_pinned(tid, level, pin);
    if level == Level::Optimal {
        ctx.snapshot_start = host.optimal_ts();
    }
    let ctx = Arc::new(Mutex::new(ctx));
    host.register_live(tid, ctx.clone());

    let out = execute(world, node, tid, program, &ctx);
    match out {
        Ok((stamp, delta_unused)) => {
            let _ = delta_unused;
            world.history.log(EventKind::Commit, tid, None, 0, node);
            host.note_terminated(tid, Some(stamp));
            host.drop_live(tid);
            purge_remote(world, node, tid, level != Level::Cv);
            gossip(world, node);
            world.metrics.committed.fetch_add(1, Ordering::Relaxed);
            world.metrics.attempts.fetch_add(1, Ordering::Relaxed);
            Ok(stamp)
        }
        Err(Abort(reason, retry_pin)) => {
            if level == Level::CentralSi {
                // Drop the TID from the coordinator's snapshot.
                world.coord_call(node, false, tid);
            }
            world.history.log(EventKind::Abort, tid, None, 0, node);
            host.note_terminated(tid, None);
            host.drop_live(tid);
            purge_remote(world, node, tid, true);
            let counter = match reason {
                AbortReason::BoundViolation => &world.metrics.aborted_bound,
                AbortReason::WriteConflict => &world.metrics.aborted_conflict,
                AbortReason::NoVisibleVersion => &world.metrics.aborted_novis,
                AbortReason::LockTimeout => &world.metrics.aborted_lock_timeout,
            };
            counter.fetch_add(1, Ordering::Relaxed);
            world.metrics.attempts.fetch_add(1, Ordering::Relaxed);
            Err((reason, retry_pin))
        }
    }
}

fn execute(world: &World, node: u32, tid: Tid, program: &Program, ctx: &Arc<Mutex<TxnCtx>>) -> Result<(Stamp, i64), Abort> {
    let level = world.level;
    let host = &world.nodes[node as usize];

    if level == Level::CentralSi {
        let (start, active) = world.coord_call(node, true, tid);
        let mut c = ctx.lock().unwrap();
        c.snapshot_start = start;
        c.snapshot_active = active.into_iter().collect();
    }

    // Reads, one data node at a time. Under CV, a writer the transaction
    // comes to depend on (a version of it stepped over on any batch) must
    // not appear among the accepted hits; the whole read phase restarts
    // against the grown edge set until it settles.
    let mut groups: BTreeMap<u32, Vec<Key>> = BTreeMap::new();
    for k in &program.reads {
        groups.entry(world.topo.node_of_key(*k)).or_default().push(*k);
    }
    let mut read_vals: BTreeMap<Key, i64> = BTreeMap::new();
    let mut read_hits: BTreeMap<Key, (u32, u32, Tid)> = BTreeMap::new();
    let mut redos = 0u32;
    'reads: loop {
        read_vals.clear();
        read_hits.clear();
        for (&target, keys) in &groups {
            let req = {
                let c = ctx.lock().unwrap();
                ReadReq {
                    tid,
                    keys: keys.clone(),
                    lower: match level {
                        Level::PostSi => c.start.lower,
                        Level::Sv => c.order.lower,
                        _ => 0,
                    },
                    upper: c.read_upper(),
                    invisible: if level == Level::Cv {
                        host.table.lock().unwrap().writers_invisible_to(tid)
                    } else {
                        Vec::new()
                    },
                    snapshot_start: c.snapshot_start,
                    snapshot_active: c.snapshot_active.iter().copied().collect(),
                    register_visitor: matches!(level, Level::Cv | Level::PostSi | Level::Sv),
                }
            };
            let ret = world.nodes[target as usize].serve_read(&req);
            world.roundtrip(node, target, MsgKind::Read, MsgKind::ReadRet);
            if ret.novis.is_some() {
                return Err(abort_with_pin(ctx, AbortReason::NoVisibleVersion));
            }
            record_skips(world, node, tid, ctx, &ret.skipped);
            if level == Level::Cv {
                let stale = {
                    let table = host.table.lock().unwrap();
                    ret.hits.iter().any(|h| table.contains(tid, h.creator))
                        || read_hits.values().any(|(_, _, c)| table.contains(tid, *c))
                };
                if stale {
                    redos += 1;
                    if redos > MAX_READ_REDOS {
                        return Err(abort_with_pin(ctx, AbortReason::WriteConflict));
                    }
                    continue 'reads;
                }
            }
            {
                let mut c = ctx.lock().unwrap();
                c.merge_remote_lower(ret.new_lower);
                if level == Level::PostSi {
                    c.commit_lower = c.commit_lower.max(ret.max_cid);
                }
                c.max_cid_seen = c.max_cid_seen.max(ret.max_cid);
                for h in &ret.hits {
                    c.read_versions.insert(h.key, h.seq);
                }
                if !c.bounds_ok() {
                    let p = c.pin_for_retry();
                    return Err(Abort(AbortReason::BoundViolation, p));
                }
            }
            for h in &ret.hits {
                read_vals.insert(h.key, decode_i64(&h.value));
                read_hits.insert(h.key, (h.seq, target, h.creator));
            }
        }
        break;
    }
    // The read set is final; log it.
    for (key, (seq, dnode, _)) in &read_hits {
        world.history.log(EventKind::Read, tid, Some(*key), *seq, *dnode);
    }

    // Commit entry: materialize the write set, settle writer-list constraints.
    let writes_by_node: BTreeMap<u32, Vec<(Key, Vec<u8>)>> = {
        let mut c = ctx.lock().unwrap();
        c.phase = Phase::Preparing;
        for (k, v) in program.apply(&read_vals) {
            c.buffer_write(k, v);
        }
        let mut by_node: BTreeMap<u32, Vec<(Key, Vec<u8>)>> = BTreeMap::new();
        for (k, v) in c.write_set.iter() {
            by_node.entry(world.topo.node_of_key(*k)).or_default().push((*k, v.clone()));
        }
        by_node
    };
    let deadline = Instant::now() + Duration::from_micros(world.cfg.lock_timeout_ticks);

    if matches!(level, Level::PostSi | Level::Sv) {
        let (pendings, lower) = {
            let c = ctx.lock().unwrap();
            let lower = match level {
                Level::PostSi => c.start.lower,
                Level::Sv => c.order.lower,
                _ => 0,
            };
            (c.pending_writers.iter().copied().collect::<Vec<_>>(), lower)
        };
        for w in pendings {
            let wh = world.topo.node_of_tid(w);
            let reply = world.nodes[wh as usize].serve_resolve(w, tid, lower);
            world.roundtrip(node, wh, MsgKind::Resolve, MsgKind::ResolveRet);
            match reply {
                ResolveReply::Decided { below } => ctx.lock().unwrap().apply_upper_below(below),
                ResolveReply::Registered => host.table.lock().unwrap().record(tid, w),
                ResolveReply::AbortedWriter => {}
            }
        }
        if !ctx.lock().unwrap().bounds_ok() {
            return Err(abort_with_pin(ctx, AbortReason::BoundViolation));
        }
    }

    if writes_by_node.is_empty() {
        let stamp = decide(world, node, tid, ctx, &[], level).map_err(|r| abort_with_pin(ctx, r))?;
        if level == Level::CentralSi {
            world.coord_call(node, false, tid);
        }
        ctx.lock().unwrap().phase = Phase::Committed;
        return Ok((stamp, program.delta));
    }

    // Round 1: prepare on each participant, re-polling held locks until the
    // bounded wait expires.
    let mut prepared: Vec<u32> = Vec::new();
    let mut gathered_sids: Vec<Ts> = Vec::new();
    let mut gathered_readers: BTreeSet<Tid> = BTreeSet::new();
    for (&target, writes) in &writes_by_node {
        let req = {
            let c = ctx.lock().unwrap();
            PrepareReq {
                tid,
                writes: writes.clone(),
                read_versions: writes.iter().filter_map(|(k, _)| c.read_versions.get(k).map(|s| (*k, *s))).collect(),
                invisible: if matches!(level, Level::Cv | Level::PostSi | Level::Sv) {
                    host.table.lock().unwrap().writers_invisible_to(tid)
                } else {
                    Vec::new()
                },
                snapshot_start: c.snapshot_start,
                snapshot_active: c.snapshot_active.iter().copied().collect(),
            }
        };
        loop {
            let result = world.nodes[target as usize].serve_prepare(&req);
            world.roundtrip(node, target, MsgKind::Prepare, MsgKind::PrepareRet);
            match result {
                PrepareResult::Ok { max_overwritten_cid, max_sid, ongoing, chain_creators } => {
                    prepared.push(target);
                    // Same chain re-validation as the simulator: edges
                    // recorded while this prepare ran are authoritative.
                    if level == Level::Cv {
                        let table = host.table.lock().unwrap();
                        if chain_creators.iter().any(|w| table.contains(tid, *w)) {
                            drop(table);
                            rollback(world, node, tid, &writes_by_node, &prepared);
                            return Err(abort_with_pin(ctx, AbortReason::WriteConflict));
                        }
                    }
                    gathered_sids.push(max_sid);
                    gathered_readers.extend(ongoing);
                    ctx.lock().unwrap().fold_access(max_overwritten_cid);
                    break;
                }
                PrepareResult::WouldBlock => {
                    if Instant::now() >= deadline {
                        rollback(world, node, tid, &writes_by_node, &prepared);
                        return Err(abort_with_pin(ctx, AbortReason::LockTimeout));
                    }
                    thread::sleep(LOCK_POLL);
                }
                PrepareResult::Conflict => {
                    rollback(world, node, tid, &writes_by_node, &prepared);
                    return Err(abort_with_pin(ctx, AbortReason::WriteConflict));
                }
            }
        }
    }
    if !ctx.lock().unwrap().bounds_ok() {
        rollback(world, node, tid, &writes_by_node, &prepared);
        return Err(abort_with_pin(ctx, AbortReason::BoundViolation));
    }

    // Round 1, contention leg: record rw edges at reader hosts and sample
    // their bounds.
    let mut cap_targets: BTreeSet<Tid> = BTreeSet::new();
    if matches!(level, Level::Cv | Level::PostSi | Level::Sv) {
        for r in gathered_readers.iter().copied().filter(|r| *r != tid) {
            let rh = world.topo.node_of_tid(r);
            let reply = world.nodes[rh as usize].serve_register(r, tid);
            world.roundtrip(node, rh, MsgKind::Register, MsgKind::RegisterRet);
            match reply {
                RegisterReply::Ongoing { lower } => {
                    host.table.lock().unwrap().record(r, tid);
                    ctx.lock().unwrap().incoming_lowers.push(lower);
                    cap_targets.insert(r);
                }
                RegisterReply::Final { sid } => ctx.lock().unwrap().incoming_lowers.push(sid),
                RegisterReply::AbortedReader => {}
            }
        }
    }

    // Decide the stamp.
    let mut stamp = match decide(world, node, tid, ctx, &gathered_sids, level) {
        Ok(st) => st,
        Err(r) => {
            rollback(world, node, tid, &writes_by_node, &prepared);
            return Err(abort_with_pin(ctx, r));
        }
    };
    cap_targets.extend(ctx.lock().unwrap().extra_cap_targets.iter().copied());

    // Round 2: cap conflicting readers; adapt to ones that beat us to it.
    if matches!(level, Level::PostSi | Level::Sv) {
        let below = stamp.cid();
        for r in cap_targets.iter().copied().filter(|r| *r != tid) {
            let rh = world.topo.node_of_tid(r);
            let reply = world.nodes[rh as usize].serve_cap(r, below);
            world.roundtrip(node, rh, MsgKind::Cap, MsgKind::CapRet);
            if let CapReply::Final { sid } = reply {
                match stamp {
                    Stamp::Interval { start, commit } if sid >= commit => {
                        stamp = Stamp::Interval { start, commit: sid + 1 };
                        ctx.lock().unwrap().decided = Some(stamp);
                    }
                    Stamp::Order(o) if sid >= o => {
                        rollback(world, node, tid, &writes_by_node, &prepared);
                        return Err(abort_with_pin(ctx, AbortReason::BoundViolation));
                    }
                    _ => {}
                }
            }
        }
        let raise = conflict_bound_updates(stamp).1;
        for w in host.table.lock().unwrap().writers_invisible_to(tid) {
            let wh = world.topo.node_of_tid(w);
            world.nodes[wh as usize].serve_raise(w, raise);
            world.msg(node, wh, MsgKind::Raise);
        }
    }

    // Round 3: publish and unlock, then (central only) leave the
    // coordinator's snapshot.
    for (&target, writes) in &writes_by_node {
        let keys: Vec<Key> = writes.iter().map(|(k, _)| *k).collect();
        world.nodes[target as usize].serve_publish(tid, stamp.cid(), &keys);
        world.roundtrip(node, target, MsgKind::Publish, MsgKind::PublishRet);
    }
    if level == Level::CentralSi {
        world.coord_call(node, false, tid);
    }
    ctx.lock().unwrap().phase = Phase::Committed;
    Ok((stamp, program.delta))
}

fn decide(
    world: &World,
    node: u32,
    _tid: Tid,
    ctx: &Arc<Mutex<TxnCtx>>,
    sids: &[Ts],
    level: Level,
) -> Result<Stamp, AbortReason> {
    let mut c = ctx.lock().unwrap();
    let stamp = match level {
        Level::PostSi => decide_stamp_postsi(c.start, c.commit_lower, sids, &c.incoming_lowers)?,
        Level::Sv => decide_stamp_sv(c.order, sids, &c.incoming_lowers)?,
        Level::Cv => Stamp::Marker(world.nodes[node as usize].next_marker()),
        // Baselines stamp versions with the creator's start timestamp.
        Level::CentralSi | Level::Optimal => Stamp::Marker(c.snapshot_start),
    };
    c.decided = Some(stamp);
    Ok(stamp)
}

fn record_skips(world: &World, node: u32, tid: Tid, ctx: &Arc<Mutex<TxnCtx>>, skipped: &[Tid]) {
    if skipped.is_empty() {
        return;
    }
    let new: Vec<Tid> = {
        let mut c = ctx.lock().unwrap();
        skipped.iter().copied().filter(|w| c.pending_writers.insert(*w)).collect()
    };
    if world.level == Level::Cv {
        for w in new {
            world.nodes[node as usize].table.lock().unwrap().record(tid, w);
            let wh = world.topo.node_of_tid(w);
            world.nodes[wh as usize].serve_record(tid, w);
            world.msg(node, wh, MsgKind::RecordRw);
        }
    }
}

fn rollback(world: &World, node: u32, tid: Tid, writes_by_node: &BTreeMap<u32, Vec<(Key, Vec<u8>)>>, prepared: &[u32]) {
    for target in prepared {
        let keys: Vec<Key> = writes_by_node[target].iter().map(|(k, _)| *k).collect();
        world.nodes[*target as usize].serve_rollback(tid, &keys);
        world.roundtrip(node, *target, MsgKind::Rollback, MsgKind::RollbackRet);
    }
}

fn abort_with_pin(ctx: &Arc<Mutex<TxnCtx>>, reason: AbortReason) -> Abort {
    let pin = ctx.lock().unwrap().pin_for_retry();
    Abort(reason, pin)
}

fn purge_remote(world: &World, node: u32, tid: Tid, writer_side: bool) {
    let hosts = world.nodes[node as usize].purge_local(tid, writer_side);
    for h in hosts {
        world.nodes[h as usize].serve_purge(tid, writer_side);
        world.msg(node, h, MsgKind::Purge);
    }
}

fn gossip(world: &World, node: u32) {
    if !matches!(world.level, Level::Cv | Level::PostSi | Level::Sv) {
        return;
    }
    // One bundle at a time per node: concurrent finalizers must not deliver
    // a later watermark ahead of an earlier bundle's stamps.
    let _gate = world.gossip_gates[node as usize].lock().unwrap();
    if let Some((watermarks, stamps)) = world.nodes[node as usize].gossip_tick(world.cfg.watermark_interval) {
        for other in 0..world.cfg.nodes {
            if other != node {
                world.nodes[other as usize].apply_gossip(&watermarks, &stamps);
                world.msg(node, other, MsgKind::Gossip);
            }
        }
    }
}
