//! Post-hoc validation of execution histories against the visibility-based
//! isolation levels.
//!
//! A history is a flat list of read / write / commit / abort events, each
//! naming the version it touched by the version's position in its item's
//! chain. The oracle first extracts the classic data dependencies:
//!
//!   wr(i, j): j read the exact version i installed;
//!   ww(i, j): i's version precedes j's version in the same chain;
//!   rw(i, j): j installed a version newer than the one i read.
//!
//! Dependencies force visibility: wr and ww force `i -> j` (visible), rw
//! forces `j -/-> i` (invisible). Only committed transactions count;
//! versions with no recorded writer are preloaded data, treated as committed
//! before everything.
//!
//! * `check_cv` accepts a history iff the forced relations are consistent:
//!   no ordered pair is forced both visible and invisible, no pair is forced
//!   mutually visible, and a forced-visible writer is never partially read.
//! * `check_postsi` builds the integer difference system `s_i < c_i`,
//!   `c_i <= s_j` for forced visibility and `c_i > s_j` for forced
//!   invisibility, and solves it by shortest-path relaxation. Feasible means
//!   some logical timeline realizes the history under snapshot isolation;
//!   the satisfying stamps are returned so the verdict can be re-checked.
//! * `check_sv` orients every dependency forward (rw from reader to
//!   overwriter) and accepts iff the graph is acyclic, returning the
//!   serialization order.
//!
//! Unconstrained pairs never block any checker: integers totally order any
//! two disjoint intervals, so a concrete assignment always induces a valid
//! visible/invisible choice for them.

use crate::core::{Tid, Ts};
use crate::mvstore::Key;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    Read,
    Write,
    Commit,
    Abort,
}

impl EventKind {
    fn as_str(self) -> &'static str {
        match self {
            EventKind::Read => "read",
            EventKind::Write => "write",
            EventKind::Commit => "commit",
            EventKind::Abort => "abort",
        }
    }
}

/// One observed event. `seq` is the version's position in its item's chain;
/// commit/abort events carry no key (`-` in the text form) and seq 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HistoryEvent {
    pub kind: EventKind,
    pub tid: Tid,
    pub key: Option<Key>,
    pub seq: u32,
    pub node: u32,
    pub time: u64,
}

impl fmt::Display for HistoryEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.key {
            Some(k) => write!(f, "{} {} {} {} {} {}", self.kind.as_str(), self.tid, k, self.seq, self.node, self.time),
            None => write!(f, "{} {} - {} {} {}", self.kind.as_str(), self.tid, self.seq, self.node, self.time),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HistoryError {
    #[error("line {0}: expected `kind tid key seq node time`")]
    Parse(usize),
    #[error("transaction {0} terminated twice")]
    DoubleTermination(Tid),
    #[error("key {key} has two installs at seq {seq}")]
    DuplicateInstall { key: Key, seq: u32 },
    #[error("read of key {key} seq {seq} references no installed version")]
    DanglingRead { key: Key, seq: u32 },
}

pub fn format_history(events: &[HistoryEvent]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&e.to_string());
        s.push('\n');
    }
    s
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryEvent>, HistoryError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let err = || HistoryError::Parse(i + 1);
        let kind = match it.next().ok_or_else(err)? {
            "read" => EventKind::Read,
            "write" => EventKind::Write,
            "commit" => EventKind::Commit,
            "abort" => EventKind::Abort,
            _ => return Err(err()),
        };
        let tid_s = it.next().ok_or_else(err)?;
        let (sess, seq) = tid_s.split_once('.').ok_or_else(err)?;
        let tid = Tid::new(sess.parse().map_err(|_| err())?, seq.parse().map_err(|_| err())?);
        let key_s = it.next().ok_or_else(err)?;
        let key = if key_s == "-" { None } else { Some(key_s.parse().map_err(|_| err())?) };
        let vseq: u32 = it.next().ok_or_else(err)?.parse().map_err(|_| err())?;
        let node: u32 = it.next().ok_or_else(err)?.parse().map_err(|_| err())?;
        let time: u64 = it.next().ok_or_else(err)?.parse().map_err(|_| err())?;
        out.push(HistoryEvent { kind, tid, key, seq: vseq, node, time });
    }
    Ok(out)
}

/// Extracted dependency sets over committed transactions.
///
/// The pair sets hold a verdict-equivalent reduction of the full relations:
/// `ww` keeps consecutive chain positions and `rw` points each read at the
/// next committed overwriter. The transitive pairs are implied — composing
/// `c_i <= s_j` and `s < c` along a chain reproduces every skipped
/// constraint, and reachability in the serialization graph is unchanged.
/// `check_cv` queries the full relations through the chain index instead.
#[derive(Debug, Default)]
pub struct Dependencies {
    pub committed: BTreeSet<Tid>,
    /// wr(i, j): j read i's version.
    pub wr: BTreeSet<(Tid, Tid)>,
    /// ww(i, j): i's version immediately precedes j's in some chain.
    pub ww: BTreeSet<(Tid, Tid)>,
    /// rw(i, j): j installed the next committed version after the one i read.
    pub rw: BTreeSet<(Tid, Tid)>,
    /// Version each committed transaction installed per key.
    pub installs: BTreeMap<Tid, BTreeMap<Key, u32>>,
    /// Versions each committed transaction read per key.
    pub reads: BTreeMap<Tid, BTreeMap<Key, Vec<u32>>>,
    /// Committed writers per key by chain position.
    pub chains: BTreeMap<Key, BTreeMap<u32, Tid>>,
}

impl Dependencies {
    /// Full write-order query: does some chain place a version of `a`
    /// strictly before a version of `b`?
    pub fn ww_precedes(&self, a: Tid, b: Tid) -> bool {
        let (Some(ia), Some(ib)) = (self.installs.get(&a), self.installs.get(&b)) else {
            return false;
        };
        let (outer, inner, flip) = if ia.len() <= ib.len() { (ia, ib, false) } else { (ib, ia, true) };
        for (k, s_outer) in outer {
            if let Some(s_inner) = inner.get(k) {
                let (sa, sb) = if flip { (*s_inner, *s_outer) } else { (*s_outer, *s_inner) };
                if sa < sb {
                    return true;
                }
            }
        }
        false
    }
}

/// Forced visibility relations induced by the reduced dependency sets, the
/// checkers' constraint inputs.
#[derive(Debug, Default)]
pub struct Forced {
    /// MustBeVisible(i, j): all of i's writes accessible to j.
    pub vis: BTreeSet<(Tid, Tid)>,
    /// MustBeInvisible(i, j): none of i's writes accessible to j.
    pub inv: BTreeSet<(Tid, Tid)>,
}

impl Dependencies {
    pub fn forced(&self) -> Forced {
        let mut f = Forced::default();
        for &(i, j) in self.wr.iter().chain(self.ww.iter()) {
            f.vis.insert((i, j));
        }
        // rw(i, j) means j overwrote what i read: j missed from i's view,
        // so j must be invisible to i.
        for &(i, j) in &self.rw {
            f.inv.insert((j, i));
        }
        f
    }
}

/// Build dependency sets from a raw history. Aborted and unterminated
/// transactions contribute nothing.
pub fn extract_dependencies(events: &[HistoryEvent]) -> Result<Dependencies, HistoryError> {
    let mut terminated: BTreeMap<Tid, EventKind> = BTreeMap::new();
    for e in events {
        if matches!(e.kind, EventKind::Commit | EventKind::Abort) {
            if terminated.insert(e.tid, e.kind).is_some() {
                return Err(HistoryError::DoubleTermination(e.tid));
            }
        }
    }
    let committed: BTreeSet<Tid> =
        terminated.iter().filter(|(_, k)| **k == EventKind::Commit).map(|(t, _)| *t).collect();

    let mut writers: BTreeMap<Key, BTreeMap<u32, Tid>> = BTreeMap::new();
    let mut deps = Dependencies { committed: committed.clone(), ..Default::default() };
    for e in events {
        if e.kind != EventKind::Write || !committed.contains(&e.tid) {
            continue;
        }
        let key = e.key.expect("write event without key");
        if writers.entry(key).or_default().insert(e.seq, e.tid).is_some() {
            return Err(HistoryError::DuplicateInstall { key, seq: e.seq });
        }
        let per = deps.installs.entry(e.tid).or_default().entry(key).or_insert(e.seq);
        *per = (*per).max(e.seq);
    }

    for e in events {
        if e.kind != EventKind::Read || !committed.contains(&e.tid) {
            continue;
        }
        let key = e.key.expect("read event without key");
        let chain = writers.get(&key);
        let creator = chain.and_then(|c| c.get(&e.seq)).copied();
        if creator.is_none() && e.seq != 0 {
            return Err(HistoryError::DanglingRead { key, seq: e.seq });
        }
        deps.reads.entry(e.tid).or_default().entry(key).or_default().push(e.seq);
        if let Some(w) = creator {
            if w != e.tid {
                deps.wr.insert((w, e.tid));
            }
        }
        // The next committed overwriter; skipping the reader's own version
        // is fine, its ww edges carry the chain onward.
        if let Some(chain) = chain {
            for (_, &w) in chain.range(e.seq + 1..) {
                if w != e.tid {
                    deps.rw.insert((e.tid, w));
                    break;
                }
            }
        }
    }

    for chain in writers.values() {
        let order: Vec<Tid> = chain.values().copied().collect();
        for pair in order.windows(2) {
            if pair[0] != pair[1] {
                deps.ww.insert((pair[0], pair[1]));
            }
        }
    }
    deps.chains = writers;
    Ok(deps)
}

/// Why a pair of transactions breaks consistent visibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvViolation {
    /// The same ordered pair is forced both visible and invisible.
    BothForced,
    /// Both directions forced visible (mutual visibility).
    MutualVisibility,
    /// Forced-visible writer partially read: the reader accessed a version
    /// older than one the writer installed.
    PartialRead { key: Key },
}

#[derive(Debug)]
pub enum CvVerdict {
    Pass,
    Fail { pair: (Tid, Tid), violation: CvViolation },
}

impl CvVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, CvVerdict::Pass)
    }
}

/// Consistent-visibility check against the full (unreduced) relations.
///
/// For every transaction r, the writers that must be visible to it are the
/// creators of versions it read plus every writer ordered before r in some
/// chain; the writers that must be invisible are all writers of versions
/// newer than one r read. A transaction in both sets is a witness: no
/// visibility assignment can satisfy the pair. Mutual visibility is checked
/// over the read-from pairs; write-order inversions between two transactions
/// cannot occur (ordered commit-time locking serializes their chains the
/// same way everywhere).
pub fn check_cv(deps: &Dependencies) -> CvVerdict {
    for &(a, b) in &deps.wr {
        if deps.wr.contains(&(b, a)) || deps.ww_precedes(b, a) {
            return CvVerdict::Fail { pair: (a, b), violation: CvViolation::MutualVisibility };
        }
    }
    for (&r, reads) in &deps.reads {
        // Writers r depends on seeing: read-from plus chain predecessors.
        let mut visible: BTreeMap<Tid, Option<Key>> = BTreeMap::new();
        for (key, seqs) in reads {
            for seq in seqs {
                if let Some(w) = deps.chains.get(key).and_then(|c| c.get(seq)) {
                    if *w != r {
                        visible.entry(*w).or_insert(Some(*key));
                    }
                }
            }
        }
        if let Some(installs) = deps.installs.get(&r) {
            for (key, seq) in installs {
                if let Some(chain) = deps.chains.get(key) {
                    for (_, w) in chain.range(..seq) {
                        if *w != r {
                            visible.entry(*w).or_insert(None);
                        }
                    }
                }
            }
        }
        // Writers r missed: anyone newer-versioning an item r read.
        for (key, seqs) in reads {
            let Some(chain) = deps.chains.get(key) else { continue };
            let min_seq = seqs.iter().min().copied().unwrap_or(0);
            for (_, w) in chain.range(min_seq + 1..) {
                if *w == r {
                    continue;
                }
                if let Some(via) = visible.get(w) {
                    // `key` is the item whose newer version r missed; when
                    // visibility was forced by a read-from edge this is the
                    // classical partial read.
                    let violation = match via {
                        Some(_) => CvViolation::PartialRead { key: *key },
                        None => CvViolation::BothForced,
                    };
                    return CvVerdict::Fail { pair: (*w, r), violation };
                }
            }
        }
    }
    CvVerdict::Pass
}

/// One step of a visibility cycle: `from ≺ to` when the relation is
/// visibility, `from ⋠ to` (i.e. `to` misses `from`) when it is invisibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleStep {
    pub from: Tid,
    pub to: Tid,
    pub invisibility: bool,
}

#[derive(Debug)]
pub enum PostSiVerdict {
    /// Feasible; the returned stamps satisfy every forced constraint.
    Pass { stamps: BTreeMap<Tid, (Ts, Ts)> },
    /// The forced relations admit no timeline. The reported cycle never
    /// chains two invisibility edges, matching the feasibility law for
    /// snapshot schedules.
    Fail { cycle: Vec<CycleStep> },
    FailCv { pair: (Tid, Tid), violation: CvViolation },
}

impl PostSiVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, PostSiVerdict::Pass { .. })
    }
}

/// Difference-constraint feasibility via Bellman-Ford. Variables are the
/// start and commit times of each committed transaction; an edge (u, v, w)
/// encodes x_v <= x_u + w, and strict inequalities carry integer slack 1.
pub fn check_postsi(deps: &Dependencies) -> PostSiVerdict {
    if let CvVerdict::Fail { pair, violation } = check_cv(deps) {
        return PostSiVerdict::FailCv { pair, violation };
    }
    let txns: Vec<Tid> = deps.committed.iter().copied().collect();
    let idx: BTreeMap<Tid, usize> = txns.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let s_var = |t: Tid| 2 * idx[&t];
    let c_var = |t: Tid| 2 * idx[&t] + 1;
    let n = 2 * txns.len();

    // (u, v, w, step): x_v <= x_u + w. `step` labels the relation edges for
    // cycle reporting; the intra-transaction s < c edges carry no label.
    let mut edges: Vec<(usize, usize, i64, Option<CycleStep>)> = Vec::new();
    for &t in &txns {
        edges.push((c_var(t), s_var(t), -1, None));
    }
    let forced = deps.forced();
    for &(i, j) in &forced.vis {
        // c_i <= s_j
        edges.push((s_var(j), c_var(i), 0, Some(CycleStep { from: i, to: j, invisibility: false })));
    }
    for &(i, j) in &forced.inv {
        // c_i > s_j, i.e. s_j <= c_i - 1
        edges.push((c_var(i), s_var(j), -1, Some(CycleStep { from: i, to: j, invisibility: true })));
    }

    let mut dist = vec![0i64; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut changed_var = None;
    for round in 0..n {
        let mut changed = false;
        for (ei, &(u, v, w, _)) in edges.iter().enumerate() {
            if dist[u] + w < dist[v] {
                dist[v] = dist[u] + w;
                pred[v] = Some(ei);
                changed = true;
                if round == n.saturating_sub(1) {
                    changed_var = Some(v);
                }
            }
        }
        if !changed {
            break;
        }
    }

    if let Some(start) = changed_var {
        // Walk predecessors n steps to land inside the negative cycle, then
        // collect it.
        let mut v = start;
        for _ in 0..n {
            v = edges[pred[v].expect("relaxed var has predecessor")].0;
        }
        let mut cycle_edges = Vec::new();
        let stop = v;
        loop {
            let ei = pred[v].expect("cycle var has predecessor");
            cycle_edges.push(ei);
            v = edges[ei].0;
            if v == stop {
                break;
            }
        }
        cycle_edges.reverse();
        let cycle: Vec<CycleStep> = cycle_edges.iter().filter_map(|&ei| edges[ei].3).collect();
        // Feasibility law cross-check: an infeasible witness cycle never
        // contains two consecutive invisibility edges.
        let m = cycle.len();
        for k in 0..m {
            debug_assert!(
                !(cycle[k].invisibility && cycle[(k + 1) % m].invisibility),
                "witness cycle chains two invisibility edges"
            );
        }
        return PostSiVerdict::Fail { cycle };
    }

    let min = dist.iter().copied().min().unwrap_or(0);
    let mut stamps = BTreeMap::new();
    for &t in &txns {
        let s = (dist[s_var(t)] - min) as Ts;
        let c = (dist[c_var(t)] - min) as Ts;
        stamps.insert(t, (s, c));
    }
    debug_assert!(verify_postsi_stamps(deps, &stamps).is_ok());
    PostSiVerdict::Pass { stamps }
}

/// A stamp assignment violating one forced constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StampViolation {
    pub pair: (Tid, Tid),
    pub invisibility: bool,
}

/// Check concrete (start, commit) stamps against the forced relations:
/// visibility demands c_i <= s_j, invisibility demands c_i > s_j, and every
/// interval must satisfy s < c.
pub fn verify_postsi_stamps(
    deps: &Dependencies,
    stamps: &BTreeMap<Tid, (Ts, Ts)>,
) -> Result<(), StampViolation> {
    let forced = deps.forced();
    for (&t, &(s, c)) in stamps {
        if s >= c {
            return Err(StampViolation { pair: (t, t), invisibility: false });
        }
    }
    for &(i, j) in &forced.vis {
        let (ci, sj) = (stamps[&i].1, stamps[&j].0);
        if ci > sj {
            return Err(StampViolation { pair: (i, j), invisibility: false });
        }
    }
    for &(i, j) in &forced.inv {
        let (ci, sj) = (stamps[&i].1, stamps[&j].0);
        if ci <= sj {
            return Err(StampViolation { pair: (i, j), invisibility: true });
        }
    }
    Ok(())
}

#[derive(Debug)]
pub enum SvVerdict {
    /// Acyclic; the returned order is a total visibility order.
    Pass { order: Vec<Tid> },
    /// A dependency cycle: no serial order exists.
    Fail { cycle: Vec<Tid> },
    FailCv { pair: (Tid, Tid), violation: CvViolation },
}

impl SvVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, SvVerdict::Pass { .. })
    }
}

/// Serializability check: wr and ww edges point writer-to-reader /
/// first-writer-to-second, and every rw edge points reader-to-overwriter
/// (whoever misses a write must come first). Pass iff the graph is acyclic.
pub fn check_sv(deps: &Dependencies) -> SvVerdict {
    if let CvVerdict::Fail { pair, violation } = check_cv(deps) {
        return SvVerdict::FailCv { pair, violation };
    }
    let mut adj: BTreeMap<Tid, BTreeSet<Tid>> = BTreeMap::new();
    for &t in &deps.committed {
        adj.entry(t).or_default();
    }
    for &(i, j) in deps.wr.iter().chain(deps.ww.iter()).chain(deps.rw.iter()) {
        adj.entry(i).or_default().insert(j);
    }

    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Gray,
        Black,
    }
    let mut color: BTreeMap<Tid, Color> = adj.keys().map(|&t| (t, Color::White)).collect();
    let mut order = Vec::new();
    let mut stack: Vec<(Tid, Vec<Tid>)> = Vec::new();
    let mut path: Vec<Tid> = Vec::new();

    let roots: Vec<Tid> = adj.keys().copied().collect();
    for root in roots {
        if color[&root] != Color::White {
            continue;
        }
        stack.push((root, adj[&root].iter().copied().collect()));
        color.insert(root, Color::Gray);
        path.push(root);
        while let Some((node, todo)) = stack.last_mut() {
            match todo.pop() {
                Some(next) => match color[&next] {
                    Color::White => {
                        color.insert(next, Color::Gray);
                        path.push(next);
                        let children = adj[&next].iter().copied().collect();
                        stack.push((next, children));
                    }
                    Color::Gray => {
                        let pos = path.iter().position(|&t| t == next).unwrap();
                        return SvVerdict::Fail { cycle: path[pos..].to_vec() };
                    }
                    Color::Black => {}
                },
                None => {
                    color.insert(*node, Color::Black);
                    order.push(*node);
                    path.pop();
                    stack.pop();
                }
            }
        }
    }
    order.reverse();
    SvVerdict::Pass { order }
}

/// SV stamp sanity over a run's committed orders: forced visibility never
/// orders backwards and every rw overwriter sits at or above its reader.
/// (Ties are legal: they only arise when the reader committed before the
/// writer gathered, which keeps the graph acyclic.)
pub fn verify_sv_orders(deps: &Dependencies, orders: &BTreeMap<Tid, Ts>) -> Result<(), StampViolation> {
    let forced = deps.forced();
    for &(i, j) in &forced.vis {
        if orders[&i] > orders[&j] {
            return Err(StampViolation { pair: (i, j), invisibility: false });
        }
    }
    for &(i, j) in &deps.rw {
        if orders[&j] < orders[&i] {
            return Err(StampViolation { pair: (i, j), invisibility: true });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: u32) -> Tid {
        Tid::new(n, 1)
    }

    /// Tiny history builder: preloaded keys have version 0; each write by a
    /// transaction appends the next seq on its key.
    struct H {
        events: Vec<HistoryEvent>,
        next_seq: BTreeMap<Key, u32>,
        time: u64,
    }

    impl H {
        fn new() -> Self {
            H { events: Vec::new(), next_seq: BTreeMap::new(), time: 0 }
        }

        fn push(&mut self, kind: EventKind, tid: Tid, key: Option<Key>, seq: u32) {
            self.time += 1;
            self.events.push(HistoryEvent { kind, tid, key, seq, node: 0, time: self.time });
        }

        fn read(&mut self, tid: Tid, key: Key, seq: u32) -> &mut Self {
            self.push(EventKind::Read, tid, Some(key), seq);
            self
        }

        fn write(&mut self, tid: Tid, key: Key) -> &mut Self {
            let seq = self.next_seq.entry(key).or_insert(0);
            *seq += 1;
            let s = *seq;
            self.push(EventKind::Write, tid, Some(key), s);
            self
        }

        fn commit(&mut self, tid: Tid) -> &mut Self {
            self.push(EventKind::Commit, tid, None, 0);
            self
        }

        fn abort(&mut self, tid: Tid) -> &mut Self {
            self.push(EventKind::Abort, tid, None, 0);
            self
        }

        fn deps(&self) -> Dependencies {
            extract_dependencies(&self.events).unwrap()
        }
    }

    const A: Key = 1;
    const B: Key = 2;
    const C: Key = 3;
    const D: Key = 4;

    /// Chain visibility: t1 -> t2 -> t3 through wr edges, no back edges.
    fn schedule_iii() -> H {
        let mut h = H::new();
        h.write(t(1), A).commit(t(1));
        h.read(t(2), A, 1).write(t(2), B).commit(t(2));
        h.read(t(3), B, 1).write(t(3), C).commit(t(3));
        h
    }

    /// t1 -> t2, t2 -> t3, t1 -/-> t3: visibility without transitivity.
    fn schedule_iv() -> H {
        let mut h = H::new();
        h.write(t(1), A).write(t(1), D).commit(t(1));
        h.read(t(2), A, 1).write(t(2), B).commit(t(2));
        h.read(t(3), B, 1).read(t(3), D, 0).commit(t(3));
        h
    }

    /// t1 -> t2, t3 -> t4, t3 -/-> t2, t1 -/-> t4.
    fn schedule_v() -> H {
        let mut h = H::new();
        h.write(t(1), A).write(t(1), D).commit(t(1));
        h.write(t(3), B).write(t(3), C).commit(t(3));
        h.read(t(2), A, 1).read(t(2), C, 0).commit(t(2));
        h.read(t(4), B, 1).read(t(4), D, 0).commit(t(4));
        h
    }

    /// Partial visibility: t2 reads t1's write on A but a pre-t1 version of B.
    fn history_ii() -> H {
        let mut h = H::new();
        h.write(t(1), A).write(t(1), B).commit(t(1));
        h.read(t(2), A, 1).read(t(2), B, 0).commit(t(2));
        h
    }

    #[test]
    fn dependency_extraction_basics() {
        let mut h = H::new();
        h.write(t(1), A).commit(t(1));
        h.read(t(2), A, 1).commit(t(2));
        let deps = h.deps();
        assert!(deps.wr.contains(&(t(1), t(2))));

        let mut h = H::new();
        h.read(t(1), A, 0).commit(t(1));
        h.write(t(2), A).commit(t(2));
        let deps = h.deps();
        assert!(deps.rw.contains(&(t(1), t(2))));

        let mut h = H::new();
        h.write(t(1), A).commit(t(1));
        h.write(t(2), A).commit(t(2));
        let deps = h.deps();
        assert!(deps.ww.contains(&(t(1), t(2))));
    }

    #[test]
    fn aborted_transactions_impose_nothing() {
        let mut h = H::new();
        h.read(t(1), A, 0).abort(t(1));
        h.write(t(2), A).commit(t(2));
        let deps = h.deps();
        assert!(deps.rw.is_empty());
        assert!(!deps.committed.contains(&t(1)));
    }

    #[test]
    fn dangling_read_is_malformed() {
        let mut h = H::new();
        h.read(t(1), A, 3).commit(t(1));
        let err = extract_dependencies(&h.events).unwrap_err();
        assert_eq!(err, HistoryError::DanglingRead { key: A, seq: 3 });
    }

    #[test]
    fn cv_passes_schedules_iii_iv_v() {
        assert!(check_cv(&schedule_iii().deps()).passed());
        assert!(check_cv(&schedule_iv().deps()).passed());
        assert!(check_cv(&schedule_v().deps()).passed());
    }

    #[test]
    fn cv_fails_history_ii() {
        match check_cv(&history_ii().deps()) {
            CvVerdict::Fail { pair, .. } => assert_eq!(pair, (t(1), t(2))),
            v => panic!("expected failure, got {v:?}"),
        }
    }

    #[test]
    fn cv_passes_single_txn_history() {
        let mut h = H::new();
        h.write(t(1), A).commit(t(1));
        assert!(check_cv(&h.deps()).passed());
    }

    #[test]
    fn cv_unconstrained_pair_both_orders_valid() {
        // History I: no dependency between t1 and t2.
        let mut h = H::new();
        h.write(t(1), A).commit(t(1));
        h.write(t(2), B).commit(t(2));
        assert!(check_cv(&h.deps()).passed());
    }

    #[test]
    fn postsi_passes_chain_with_small_assignment() {
        match check_postsi(&schedule_iii().deps()) {
            PostSiVerdict::Pass { stamps } => {
                let (s1, c1) = stamps[&t(1)];
                let (s2, c2) = stamps[&t(2)];
                let (s3, c3) = stamps[&t(3)];
                assert!(s1 < c1 && c1 <= s2 && s2 < c2 && c2 <= s3 && s3 < c3);
            }
            v => panic!("expected pass, got {v:?}"),
        }
    }

    #[test]
    fn postsi_fails_schedule_iv_with_single_invisibility_cycle() {
        match check_postsi(&schedule_iv().deps()) {
            PostSiVerdict::Fail { cycle } => {
                assert!(!cycle.is_empty());
                let invis = cycle.iter().filter(|s| s.invisibility).count();
                assert_eq!(invis, 1, "cycle {cycle:?}");
            }
            v => panic!("expected fail, got {v:?}"),
        }
    }

    #[test]
    fn postsi_fails_schedule_v() {
        match check_postsi(&schedule_v().deps()) {
            PostSiVerdict::Fail { cycle } => {
                let m = cycle.len();
                for k in 0..m {
                    assert!(!(cycle[k].invisibility && cycle[(k + 1) % m].invisibility));
                }
            }
            v => panic!("expected fail, got {v:?}"),
        }
    }

    #[test]
    fn postsi_assignment_is_self_certifying() {
        let deps = schedule_iii().deps();
        if let PostSiVerdict::Pass { stamps } = check_postsi(&deps) {
            assert!(verify_postsi_stamps(&deps, &stamps).is_ok());
        } else {
            panic!("expected pass");
        }
    }

    #[test]
    fn sv_passes_disjoint_writers_in_either_order() {
        let mut h = H::new();
        h.write(t(1), A).commit(t(1));
        h.write(t(2), B).commit(t(2));
        match check_sv(&h.deps()) {
            SvVerdict::Pass { order } => assert_eq!(order.len(), 2),
            v => panic!("expected pass, got {v:?}"),
        }
    }

    #[test]
    fn sv_fails_write_skew() {
        // each reads what the other writes: rw in both directions.
        let mut h = H::new();
        h.read(t(1), A, 0).read(t(2), B, 0);
        h.write(t(1), B).commit(t(1));
        h.write(t(2), A).commit(t(2));
        match check_sv(&h.deps()) {
            SvVerdict::Fail { cycle } => {
                assert!(cycle.contains(&t(1)) && cycle.contains(&t(2)));
            }
            v => panic!("expected fail, got {v:?}"),
        }
    }

    #[test]
    fn sv_fails_schedules_iv_and_v() {
        assert!(!check_sv(&schedule_iv().deps()).passed());
        assert!(!check_sv(&schedule_v().deps()).passed());
    }

    #[test]
    fn sv_order_topologically_sorts_dependencies() {
        let deps = schedule_iii().deps();
        match check_sv(&deps) {
            SvVerdict::Pass { order } => {
                let pos: BTreeMap<Tid, usize> = order.iter().enumerate().map(|(i, t)| (*t, i)).collect();
                for &(i, j) in deps.wr.iter().chain(deps.ww.iter()).chain(deps.rw.iter()) {
                    assert!(pos[&i] < pos[&j]);
                }
            }
            v => panic!("expected pass, got {v:?}"),
        }
    }

    #[test]
    fn history_roundtrips_through_text() {
        let h = schedule_iv();
        let text = format_history(&h.events);
        let parsed = parse_history(&text).unwrap();
        assert_eq!(parsed, h.events);
    }

    #[test]
    fn lost_update_fails_cv_and_postsi() {
        let mut h = H::new();
        h.read(t(1), A, 0).read(t(2), A, 0);
        h.write(t(1), A).commit(t(1));
        h.write(t(2), A).commit(t(2));
        let deps = h.deps();
        assert!(!check_cv(&deps).passed());
        assert!(!check_postsi(&deps).passed());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Op {
            Read { txn: u32, key: Key, pick: u8 },
            Write { txn: u32, key: Key },
        }

        fn op_strategy(txns: u32, keys: Key) -> impl Strategy<Value = Op> {
            prop_oneof![
                (1..=txns, 1..=keys, any::<u8>()).prop_map(|(txn, key, pick)| Op::Read { txn, key, pick }),
                (1..=txns, 1..=keys).prop_map(|(txn, key)| Op::Write { txn, key }),
            ]
        }

        fn build(ops: &[Op]) -> Vec<HistoryEvent> {
            let mut h = H::new();
            let mut seen = BTreeSet::new();
            for op in ops {
                match *op {
                    Op::Read { txn, key, pick } => {
                        let max = h.next_seq.get(&key).copied().unwrap_or(0);
                        let seq = (pick as u32) % (max + 1);
                        h.read(t(txn), key, seq);
                        seen.insert(txn);
                    }
                    Op::Write { txn, key } => {
                        h.write(t(txn), key);
                        seen.insert(txn);
                    }
                }
            }
            for txn in seen {
                h.commit(t(txn));
            }
            h.events
        }

        proptest! {
            // check_sv pass implies check_postsi pass implies check_cv pass.
            #[test]
            fn implication_chain(ops in proptest::collection::vec(op_strategy(5, 4), 0..24)) {
                let events = build(&ops);
                let deps = extract_dependencies(&events).unwrap();
                let cv = check_cv(&deps).passed();
                let postsi = check_postsi(&deps).passed();
                let sv = check_sv(&deps).passed();
                prop_assert!(!sv || postsi, "sv passed but postsi failed");
                prop_assert!(!postsi || cv, "postsi passed but cv failed");
            }

            // A feasible verdict always comes with a satisfying assignment.
            #[test]
            fn pass_verdicts_certify(ops in proptest::collection::vec(op_strategy(4, 3), 0..20)) {
                let events = build(&ops);
                let deps = extract_dependencies(&events).unwrap();
                if let PostSiVerdict::Pass { stamps } = check_postsi(&deps) {
                    prop_assert!(verify_postsi_stamps(&deps, &stamps).is_ok());
                }
            }
        }
    }
}
