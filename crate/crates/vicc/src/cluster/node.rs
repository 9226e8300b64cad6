//! Per-node engine state and the synchronous service primitives both
//! runtimes share. The simulator wraps these in message handlers; the
//! threaded runtime calls them directly.
//!
//! Lock order: an item mutex may be held while taking the live map, stamp
//! cache, watermark or table mutexes; never the reverse. Transaction
//! contexts are locked only while no item mutex is held.

use crate::antidep::AntiDepTable;
use crate::baselines::Coordinator;
use crate::cluster::history::HistorySink;
use crate::cluster::message::*;
use crate::cluster::topology::Topology;
use crate::core::{Level, Phase, SessionId, Stamp, Tid, Ts, LOADER_TID};
use crate::mvstore::{Key, Partition, ReadRule, VisitorFate};
use crate::scheduler::TxnCtx;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};

/// Committed/aborted stamps of recently terminated transactions, kept long
/// enough for lazy visitor collection. Evictions fall back to a conservative
/// high-water stamp and bump a miss counter.
#[derive(Debug)]
pub struct StampCache {
    map: BTreeMap<Tid, Option<Stamp>>,
    fifo: VecDeque<Tid>,
    cap: usize,
}

pub const STAMP_CACHE_CAP: usize = 1 << 16;

impl StampCache {
    fn new() -> Self {
        StampCache { map: BTreeMap::new(), fifo: VecDeque::new(), cap: STAMP_CACHE_CAP }
    }

    fn insert(&mut self, tid: Tid, stamp: Option<Stamp>) {
        if self.map.insert(tid, stamp).is_none() {
            self.fifo.push_back(tid);
            if self.fifo.len() > self.cap {
                if let Some(old) = self.fifo.pop_front() {
                    self.map.remove(&old);
                }
            }
        }
    }

    fn get(&self, tid: Tid) -> Option<Option<Stamp>> {
        self.map.get(&tid).copied()
    }
}

#[derive(Debug)]
pub struct NodeState {
    pub id: u32,
    pub level: Level,
    pub topo: Topology,
    pub part: Partition,
    pub table: Mutex<AntiDepTable>,
    live: Mutex<BTreeMap<Tid, Arc<Mutex<TxnCtx>>>>,
    cache: Mutex<StampCache>,
    watermarks: Mutex<BTreeMap<SessionId, u32>>,
    marker_clock: Mutex<Ts>,
    optimal_clock: Mutex<Ts>,
    high_water: Mutex<Ts>,
    commits_since_gossip: Mutex<u32>,
    terminated_log: Mutex<Vec<(Tid, Option<Stamp>)>>,
    pub history: Arc<HistorySink>,
    pub metrics: Arc<Metrics>,
}

impl NodeState {
    pub fn new(id: u32, level: Level, topo: Topology, history: Arc<HistorySink>, metrics: Arc<Metrics>) -> Self {
        NodeState {
            id,
            level,
            topo,
            part: Partition::new(),
            table: Mutex::new(AntiDepTable::new()),
            live: Mutex::new(BTreeMap::new()),
            cache: Mutex::new(StampCache::new()),
            watermarks: Mutex::new(BTreeMap::new()),
            marker_clock: Mutex::new(0),
            optimal_clock: Mutex::new(0),
            high_water: Mutex::new(0),
            commits_since_gossip: Mutex::new(0),
            terminated_log: Mutex::new(Vec::new()),
            history,
            metrics,
        }
    }

    pub fn register_live(&self, tid: Tid, ctx: Arc<Mutex<TxnCtx>>) {
        self.live.lock().unwrap().insert(tid, ctx);
    }

    pub fn drop_live(&self, tid: Tid) {
        self.live.lock().unwrap().remove(&tid);
    }

    pub fn live_ctx(&self, tid: Tid) -> Option<Arc<Mutex<TxnCtx>>> {
        self.live.lock().unwrap().get(&tid).cloned()
    }

    fn high_water(&self) -> Ts {
        *self.high_water.lock().unwrap()
    }

    fn raise_high_water(&self, v: Ts) {
        let mut hw = self.high_water.lock().unwrap();
        *hw = (*hw).max(v);
    }

    /// CV commit markers: opaque, roughly monotone across the cluster.
    pub fn next_marker(&self) -> Ts {
        let mut m = self.marker_clock.lock().unwrap();
        *m = (*m).max(self.high_water()) + 1;
        *m
    }

    /// Optimal baseline: arbitrary local timestamps, no coordination. The
    /// local clock trails the highest cid seen so reads stay fresh; nothing
    /// makes it consistent across nodes, by design.
    pub fn optimal_ts(&self) -> Ts {
        let mut c = self.optimal_clock.lock().unwrap();
        *c = (*c).max(self.high_water()) + 1;
        *c
    }

    fn cache_get(&self, tid: Tid) -> Option<Option<Stamp>> {
        self.cache.lock().unwrap().get(tid)
    }

    /// What this node knows about a visitor: its own transactions resolve
    /// through the live map and cache; remote ones through gossiped TID
    /// watermarks plus the stamp cache.
    pub fn resolve_visitor(&self, t: Tid) -> VisitorFate {
        if t == LOADER_TID {
            return VisitorFate::Gone;
        }
        if self.topo.node_of_tid(t) == self.id {
            if self.live.lock().unwrap().contains_key(&t) {
                return VisitorFate::Ongoing;
            }
        } else {
            let wm = self.watermarks.lock().unwrap().get(&t.session()).copied().unwrap_or(0);
            if t.seq() > wm {
                return VisitorFate::Ongoing;
            }
        }
        match self.cache_get(t) {
            Some(Some(stamp)) => VisitorFate::Committed(stamp.sid()),
            Some(None) => VisitorFate::Gone,
            None => {
                self.metrics.collect_misses.fetch_add(1, Ordering::Relaxed);
                VisitorFate::Committed(self.high_water())
            }
        }
    }

    /// Serve a read batch. Visibility and visitor registration are atomic
    /// per item; the host logs the reads once it accepts the results.
    pub fn serve_read(&self, req: &ReadReq) -> ReadRet {
        let invisible: BTreeSet<Tid> = req.invisible.iter().copied().collect();
        let active: BTreeSet<Tid> = req.snapshot_active.iter().copied().collect();
        let mut ret = ReadRet {
            tid: req.tid,
            node: self.id,
            hits: Vec::new(),
            new_lower: req.lower,
            max_cid: 0,
            skipped: Vec::new(),
            novis: None,
        };
        let mut skipped = BTreeSet::new();
        for key in &req.keys {
            let mut item = self.part.item(*key).lock().unwrap();
            item.lazy_collect(&mut |t| self.resolve_visitor(t));
            let rule = match self.level {
                Level::Cv => ReadRule::Cv { invisible: &invisible },
                Level::PostSi | Level::Sv => ReadRule::UpperBound(req.upper),
                Level::CentralSi | Level::Optimal => {
                    ReadRule::Snapshot { start: req.snapshot_start, active: &active }
                }
            };
            let out = item.read_visible(req.register_visitor.then_some(req.tid), &rule);
            let (hit, creator) = match out.hit {
                Some(h) => {
                    let creator = item.chain()[h.seq as usize].creator;
                    (h, creator)
                }
                None => {
                    skipped.extend(out.inflight_skipped);
                    ret.novis = Some(*key);
                    break;
                }
            };
            skipped.extend(out.inflight_skipped);
            ret.new_lower = ret.new_lower.max(hit.cid);
            ret.max_cid = ret.max_cid.max(hit.cid);
            ret.hits.push(ReadHitWire { key: *key, value: hit.value, seq: hit.seq, cid: hit.cid, creator });
        }
        ret.skipped = skipped.into_iter().collect();
        ret
    }

    /// Participant side of commit round 1: lock in key order, validate,
    /// gather negotiation inputs and install the new versions. Everything is
    /// undone before returning on conflict or contention.
    pub fn serve_prepare(&self, req: &PrepareReq) -> PrepareResult {
        let tid = req.tid;
        let mut acquired: Vec<Key> = Vec::new();
        let unlock_all = |keys: &[Key]| {
            for k in keys {
                self.part.item(*k).lock().unwrap().unlock(tid);
            }
        };
        for (key, _) in &req.writes {
            let locked = self.part.item(*key).lock().unwrap().try_lock(tid);
            match locked {
                Ok(()) => acquired.push(*key),
                Err(_) => {
                    unlock_all(&acquired);
                    return PrepareResult::WouldBlock;
                }
            }
        }

        let invisible: BTreeSet<Tid> = req.invisible.iter().copied().collect();
        let snapshot_active: BTreeSet<Tid> = req.snapshot_active.iter().copied().collect();
        let read_versions: BTreeMap<Key, u32> = req.read_versions.iter().copied().collect();
        for (key, _) in &req.writes {
            let mut item = self.part.item(*key).lock().unwrap();
            item.lazy_collect(&mut |t| self.resolve_visitor(t));
            let verdict = match self.level {
                Level::CentralSi | Level::Optimal => {
                    item.validate_baseline(read_versions.get(key).copied(), req.snapshot_start, &snapshot_active)
                }
                _ => item.validate(read_versions.get(key).copied(), &invisible),
            };
            if verdict.is_err() {
                drop(item);
                unlock_all(&acquired);
                return PrepareResult::Conflict;
            }
        }

        let mut max_overwritten_cid = 0;
        let mut max_sid = 0;
        let mut ongoing = BTreeSet::new();
        let mut chain_creators = BTreeSet::new();
        let vicc = matches!(self.level, Level::Cv | Level::PostSi | Level::Sv);
        for (key, value) in &req.writes {
            let mut item = self.part.item(*key).lock().unwrap();
            if vicc {
                let g = item.gather(self.level == Level::Cv, tid);
                max_overwritten_cid = max_overwritten_cid.max(g.overwritten_cid);
                max_sid = max_sid.max(g.max_sid);
                ongoing.extend(g.ongoing_visitors);
                for v in item.chain() {
                    if v.creator != tid && v.creator != LOADER_TID {
                        chain_creators.insert(v.creator);
                    }
                }
            }
            item.install(tid, value.clone()).expect("write lock held");
        }
        PrepareResult::Ok {
            max_overwritten_cid,
            max_sid,
            ongoing: ongoing.into_iter().collect(),
            chain_creators: chain_creators.into_iter().collect(),
        }
    }

    /// Commit round 3 on a participant: publish cids, clear writer-list
    /// entries, release locks, log the installs.
    pub fn serve_publish(&self, tid: Tid, cid: Ts, keys: &[Key]) {
        for key in keys {
            let seq = self.part.item(*key).lock().unwrap().publish(tid, cid);
            self.history.log(crate::oracle::EventKind::Write, tid, Some(*key), seq, self.id);
        }
        self.raise_high_water(cid);
    }

    pub fn serve_rollback(&self, tid: Tid, keys: &[Key]) {
        for key in keys {
            self.part.item(*key).lock().unwrap().rollback(tid);
        }
    }

    /// Reader-host side of the round-1 gather: record the rw edge and sample
    /// the reader's bound, or report its final stamp.
    pub fn serve_register(&self, reader: Tid, writer: Tid) -> RegisterReply {
        if let Some(arc) = self.live_ctx(reader) {
            let ctx = arc.lock().unwrap();
            if ctx.phase == Phase::Aborted {
                return RegisterReply::AbortedReader;
            }
            // A decided stamp's start/order cannot move anymore; report it
            // instead of registering, exactly as for a terminated reader.
            if let Some(stamp) = ctx.decided {
                return RegisterReply::Final { sid: stamp.sid() };
            }
            let lower = match ctx.level {
                Level::PostSi => ctx.start.lower,
                Level::Sv => ctx.order.lower,
                _ => 0,
            };
            drop(ctx);
            self.table.lock().unwrap().record(reader, writer);
            return RegisterReply::Ongoing { lower };
        }
        match self.cache_get(reader) {
            Some(Some(stamp)) => RegisterReply::Final { sid: stamp.sid() },
            Some(None) => RegisterReply::AbortedReader,
            None => {
                self.metrics.collect_misses.fetch_add(1, Ordering::Relaxed);
                RegisterReply::Final { sid: self.high_water() }
            }
        }
    }

    /// Round-2 cap at the reader's host. An undecided reader is tightened in
    /// place (strictly below the writer's stamp); a decided or terminated one
    /// reports its stamp so the writer can adapt.
    pub fn serve_cap(&self, reader: Tid, below: Ts) -> CapReply {
        if let Some(arc) = self.live_ctx(reader) {
            let mut ctx = arc.lock().unwrap();
            if ctx.phase == Phase::Aborted {
                return CapReply::AbortedReader;
            }
            if let Some(stamp) = ctx.decided {
                return CapReply::Final { sid: stamp.sid() };
            }
            ctx.apply_upper_below(below);
            return CapReply::Applied;
        }
        match self.cache_get(reader) {
            Some(Some(stamp)) => CapReply::Final { sid: stamp.sid() },
            Some(None) => CapReply::AbortedReader,
            None => {
                self.metrics.collect_misses.fetch_add(1, Ordering::Relaxed);
                CapReply::Final { sid: self.high_water() }
            }
        }
    }

    /// Writer-host side of a reader's commit-entry resolution of a
    /// writer-list constraint. A decided writer caps the reader; an
    /// undecided one absorbs the reader's (frozen) bound as an incoming rw
    /// edge and will cap it in round 2.
    pub fn serve_resolve(&self, writer: Tid, reader: Tid, reader_lower: Ts) -> ResolveReply {
        if let Some(arc) = self.live_ctx(writer) {
            let mut ctx = arc.lock().unwrap();
            if ctx.phase == Phase::Aborted {
                return ResolveReply::AbortedWriter;
            }
            if let Some(stamp) = ctx.decided {
                return ResolveReply::Decided { below: stamp.cid() };
            }
            ctx.incoming_lowers.push(reader_lower);
            ctx.extra_cap_targets.insert(reader);
            drop(ctx);
            self.table.lock().unwrap().record(reader, writer);
            return ResolveReply::Registered;
        }
        match self.cache_get(writer) {
            Some(Some(stamp)) => ResolveReply::Decided { below: stamp.cid() },
            Some(None) => ResolveReply::AbortedWriter,
            None => {
                self.metrics.collect_misses.fetch_add(1, Ordering::Relaxed);
                ResolveReply::Decided { below: 0 }
            }
        }
    }

    /// Round-2 raise at an ongoing writer's host; dropped when the writer
    /// already decided (the symmetric path has the constraint).
    pub fn serve_raise(&self, writer: Tid, value: Ts) {
        if let Some(arc) = self.live_ctx(writer) {
            let mut ctx = arc.lock().unwrap();
            if ctx.phase != Phase::Aborted && ctx.decided.is_none() {
                ctx.apply_lower_raise(value);
            }
        }
    }

    /// Duplicate of a read-time rw edge on the writer's host. Dropped when
    /// the writer already terminated.
    pub fn serve_record(&self, reader: Tid, writer: Tid) {
        let writer_live = self.live.lock().unwrap().contains_key(&writer);
        if writer_live {
            self.table.lock().unwrap().record(reader, writer);
        }
    }

    pub fn serve_purge(&self, tid: Tid, writer_side: bool) {
        let mut table = self.table.lock().unwrap();
        table.purge_reader(tid);
        if writer_side {
            table.purge_writer(tid);
        }
    }

    /// Host-side bookkeeping when one of this node's transactions
    /// terminates. The cache entry lands before the live entry goes away so
    /// visitor resolution never sees a gap; the watermark advance and the
    /// gossip-log append happen under one lock so a broadcast never carries
    /// a watermark ahead of its stamps.
    pub fn note_terminated(&self, tid: Tid, stamp: Option<Stamp>) {
        self.cache.lock().unwrap().insert(tid, stamp);
        if let Some(st) = stamp {
            self.raise_high_water(st.cid());
        }
        let mut wm = self.watermarks.lock().unwrap();
        let e = wm.entry(tid.session()).or_insert(0);
        *e = (*e).max(tid.seq());
        self.terminated_log.lock().unwrap().push((tid, stamp));
        drop(wm);
    }

    /// Purge this node's table for a terminated transaction and report which
    /// remote nodes hold duplicates. `writer_side` drops edges into the
    /// transaction too (always on abort; on commit only when bounds carry
    /// the constraint onward, i.e. not under CV).
    pub fn purge_local(&self, tid: Tid, writer_side: bool) -> Vec<u32> {
        let mut table = self.table.lock().unwrap();
        let mut hosts = BTreeSet::new();
        for w in table.purge_reader(tid) {
            hosts.insert(self.topo.node_of_tid(w));
        }
        if writer_side {
            for r in table.purge_writer(tid) {
                hosts.insert(self.topo.node_of_tid(r));
            }
        }
        hosts.remove(&self.id);
        hosts.into_iter().collect()
    }

    /// Count a commit toward the gossip interval; when the interval is
    /// reached, return the watermark/stamp bundle to broadcast.
    pub fn gossip_tick(&self, interval: u32) -> Option<(Vec<(SessionId, u32)>, Vec<(Tid, Option<Stamp>)>)> {
        let mut n = self.commits_since_gossip.lock().unwrap();
        *n += 1;
        if *n < interval.max(1) {
            return None;
        }
        *n = 0;
        drop(n);
        let wm = self.watermarks.lock().unwrap();
        let own: Vec<(SessionId, u32)> = wm
            .iter()
            .filter(|(s, _)| self.topo.node_of_session(**s) == self.id)
            .map(|(s, q)| (*s, *q))
            .collect();
        let stamps = std::mem::take(&mut *self.terminated_log.lock().unwrap());
        drop(wm);
        Some((own, stamps))
    }

    pub fn apply_gossip(&self, watermarks: &[(SessionId, u32)], stamps: &[(Tid, Option<Stamp>)]) {
        // Stamps land before the watermarks advance, so a concurrent
        // collector never sees a terminated TID without its cached stamp.
        let mut cache = self.cache.lock().unwrap();
        for (tid, stamp) in stamps {
            cache.insert(*tid, *stamp);
            if let Some(st) = stamp {
                self.raise_high_water(st.cid());
            }
        }
        drop(cache);
        let mut wm = self.watermarks.lock().unwrap();
        for (s, q) in watermarks {
            let e = wm.entry(*s).or_insert(0);
            *e = (*e).max(*q);
        }
    }
}

/// The master-node coordinator service shared by both runtimes.
#[derive(Debug, Default)]
pub struct CoordService {
    inner: Mutex<Coordinator>,
}

impl CoordService {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin(&self, tid: Tid) -> (Ts, Vec<Tid>) {
        let mut c = self.inner.lock().unwrap();
        let (ts, snap) = c.begin(tid);
        (ts, snap.into_iter().collect())
    }

    pub fn end(&self, tid: Tid) -> Ts {
        self.inner.lock().unwrap().end(tid)
    }
}
