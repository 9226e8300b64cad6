//! Workload generators. Each produces the preload data set and one program
//! queue per worker as a pure function of (spec, seed), so any runtime mode
//! replays the same logical workload.

use crate::bench::{WorkloadKind, WorkloadSpec};
use crate::cluster::program::{Mutation, Program};
use crate::cluster::topology::{make_key, Topology};
use crate::mvstore::Key;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

pub const SMALLBANK_INITIAL_BALANCE: i64 = 100;
const TPCC_DISTRICTS: u64 = 10;
const TPCC_CUSTOMERS_PER_DISTRICT: u64 = 30;
const TPCC_ITEMS_PER_WAREHOUSE: u64 = 200;
const TPCC_ORDER_SLOTS: u64 = 100;
const TPCC_STOCK_INITIAL: i64 = 100_000;

const SUB_CHECKING: u64 = 0;
const SUB_SAVINGS: u64 = 1;

fn checking(customer: u64) -> Key {
    make_key(customer, SUB_CHECKING)
}

fn savings(customer: u64) -> Key {
    make_key(customer, SUB_SAVINGS)
}

const SUB_WAREHOUSE: u64 = 0;
const SUB_DISTRICT: u64 = 1; // 1..=10
const SUB_CUSTOMER: u64 = 100;
const SUB_STOCK: u64 = 4_000;
const SUB_ORDER: u64 = 10_000;

fn wh_row(w: u64) -> Key {
    make_key(w, SUB_WAREHOUSE)
}

fn district_row(w: u64, d: u64) -> Key {
    make_key(w, SUB_DISTRICT + d)
}

fn customer_row(w: u64, d: u64, c: u64) -> Key {
    make_key(w, SUB_CUSTOMER + d * TPCC_CUSTOMERS_PER_DISTRICT + c)
}

fn stock_row(w: u64, i: u64) -> Key {
    make_key(w, SUB_STOCK + i)
}

fn order_slot(w: u64, d: u64, slot: u64) -> Key {
    make_key(w, SUB_ORDER + d * TPCC_ORDER_SLOTS + slot)
}

/// Locality groups bucketed per data node, with the per-node hot prefix.
struct NodeGroups {
    by_node: Vec<Vec<u64>>,
}

impl NodeGroups {
    fn build(topo: &Topology, total: u64) -> Self {
        let mut by_node = vec![Vec::new(); topo.data_nodes as usize];
        for g in 0..total {
            by_node[topo.node_of_group(g) as usize].push(g);
        }
        NodeGroups { by_node }
    }

    fn pick(&self, rng: &mut ChaCha8Rng, node: u32, hot: usize, use_hot: bool) -> u64 {
        let list = &self.by_node[node as usize];
        assert!(!list.is_empty(), "node {node} owns no groups; raise the scale");
        if use_hot {
            let h = hot.min(list.len()).max(1);
            list[rng.gen_range(0..h)]
        } else {
            list[rng.gen_range(0..list.len())]
        }
    }
}

fn worker_rng(seed: u64, node: u32, worker: u32) -> ChaCha8Rng {
    let mix = seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add((node as u64) << 32 | worker as u64 + 1);
    ChaCha8Rng::seed_from_u64(mix)
}

/// Split `total` programs over nodes * workers, remainder to the first
/// workers.
fn share(total: u64, nodes: u32, workers: u32, node: u32, worker: u32) -> u64 {
    let slots = (nodes * workers) as u64;
    let idx = (node * workers + worker) as u64;
    total / slots + if idx < total % slots { 1 } else { 0 }
}

/// Pick `fanout` distinct data nodes, the first being the primary target.
fn pick_nodes(rng: &mut ChaCha8Rng, nodes: u32, fanout: u32) -> Vec<u32> {
    let fanout = fanout.min(nodes);
    let mut chosen = BTreeSet::new();
    while chosen.len() < fanout as usize {
        chosen.insert(rng.gen_range(0..nodes));
    }
    let mut v: Vec<u32> = chosen.into_iter().collect();
    // Rotate a random element to the front as the primary.
    let lead = rng.gen_range(0..v.len());
    v.swap(0, lead);
    v
}

pub struct Workload {
    pub data: Vec<(Key, i64)>,
    pub programs: Vec<Vec<VecDeque<Program>>>,
    /// Sum of the preloaded values, for conservation audits.
    pub initial_total: i64,
}

pub fn build_workload(spec: &WorkloadSpec) -> Workload {
    match spec.kind {
        WorkloadKind::SmallBank => build_smallbank(spec),
        WorkloadKind::TpccLite => build_tpcc_lite(spec),
        WorkloadKind::Micro => build_micro(spec),
    }
}

// ---- SmallBank -------------------------------------------------------------

fn build_smallbank(spec: &WorkloadSpec) -> Workload {
    let topo = Topology::new(spec.nodes, spec.workers_per_node);
    let customers = spec.scale as u64 * spec.nodes as u64;
    let groups = NodeGroups::build(&topo, customers);

    let mut data = Vec::with_capacity(2 * customers as usize);
    for c in 0..customers {
        data.push((checking(c), SMALLBANK_INITIAL_BALANCE));
        data.push((savings(c), SMALLBANK_INITIAL_BALANCE));
    }
    let initial_total = SMALLBANK_INITIAL_BALANCE * 2 * customers as i64;

    let mut programs = Vec::new();
    for node in 0..spec.nodes {
        let mut per_node = Vec::new();
        for worker in 0..spec.workers_per_node {
            let mut rng = worker_rng(spec.seed, node, worker);
            let count = share(spec.txns, spec.nodes, spec.workers_per_node, node, worker);
            let mut q = VecDeque::with_capacity(count as usize);
            for _ in 0..count {
                q.push_back(gen_smallbank_txn(spec, &topo, &groups, node, &mut rng));
            }
            per_node.push(q);
        }
        programs.push(per_node);
    }
    Workload { data, programs, initial_total }
}

fn gen_smallbank_txn(
    spec: &WorkloadSpec,
    topo: &Topology,
    groups: &NodeGroups,
    home: u32,
    rng: &mut ChaCha8Rng,
) -> Program {
    let distributed = rng.gen_bool(spec.dist_txn_fraction);
    let hot = rng.gen_bool(spec.hot_access_fraction);
    let targets = if distributed {
        let fanout = if rng.gen_bool(0.5) { 2 } else { 3 };
        pick_nodes(rng, spec.nodes, fanout)
    } else {
        vec![home]
    };
    let primary = targets[0];
    let hotn = spec.hot_keys_per_node as usize;
    let c = groups.pick(rng, primary, hotn, hot);

    let profile = rng.gen_range(0..5);
    let mut reads: Vec<Key> = Vec::new();
    let mut writes: Vec<(Key, Mutation)> = Vec::new();
    let mut delta = 0i64;
    match profile {
        // Balance
        0 => reads.extend([checking(c), savings(c)]),
        // DepositChecking
        1 => {
            reads.push(checking(c));
            writes.push((checking(c), Mutation::Add(1)));
            delta = 1;
        }
        // TransactSavings
        2 => {
            reads.push(savings(c));
            writes.push((savings(c), Mutation::Add(1)));
            delta = 1;
        }
        // Amalgamate
        3 => {
            let second = *targets.get(1).unwrap_or(&primary);
            let mut c2 = groups.pick(rng, second, hotn, hot);
            if c2 == c {
                c2 = groups.pick(rng, second, groups.by_node[second as usize].len(), false);
            }
            if c2 == c {
                // Single-customer node; degrade to a deposit.
                reads.push(checking(c));
                writes.push((checking(c), Mutation::Add(1)));
                delta = 1;
            } else {
                reads.extend([checking(c), savings(c), checking(c2)]);
                writes.push((checking(c), Mutation::Put(0)));
                writes.push((savings(c), Mutation::Put(0)));
                writes.push((checking(c2), Mutation::AddValuesOf(vec![checking(c), savings(c)])));
            }
        }
        // WriteCheck
        _ => {
            reads.extend([checking(c), savings(c)]);
            writes.push((checking(c), Mutation::Add(-1)));
            delta = -1;
        }
    }
    // Spread one balance read over each extra target node.
    for extra in targets.iter().skip(if profile == 3 { 2 } else { 1 }) {
        let cx = groups.pick(rng, *extra, hotn, false);
        reads.push(checking(cx));
    }
    for _ in 0..spec.pad_reads {
        let cx = groups.pick(rng, home, hotn, false);
        reads.push(if rng.gen_bool(0.5) { checking(cx) } else { savings(cx) });
    }
    finish_program(topo, reads, writes, delta)
}

// ---- TPC-C lite ------------------------------------------------------------

fn build_tpcc_lite(spec: &WorkloadSpec) -> Workload {
    let topo = Topology::new(spec.nodes, spec.workers_per_node);
    let warehouses = spec.scale as u64 * spec.nodes as u64;
    let groups = NodeGroups::build(&topo, warehouses);

    let mut data = Vec::new();
    let mut initial_total = 0i64;
    for w in 0..warehouses {
        data.push((wh_row(w), 0));
        for d in 0..TPCC_DISTRICTS {
            data.push((district_row(w, d), 0));
            for c in 0..TPCC_CUSTOMERS_PER_DISTRICT {
                data.push((customer_row(w, d, c), SMALLBANK_INITIAL_BALANCE));
                initial_total += SMALLBANK_INITIAL_BALANCE;
            }
            for s in 0..TPCC_ORDER_SLOTS {
                data.push((order_slot(w, d, s), 0));
            }
        }
        for i in 0..TPCC_ITEMS_PER_WAREHOUSE {
            data.push((stock_row(w, i), TPCC_STOCK_INITIAL));
        }
    }

    // Insert-free NewOrder: orders land in preallocated slots addressed by a
    // generator-side cursor per district, wrapping around on exhaustion.
    let mut cursors: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    let mut programs = Vec::new();
    for node in 0..spec.nodes {
        let mut per_node = Vec::new();
        for worker in 0..spec.workers_per_node {
            let mut rng = worker_rng(spec.seed, node, worker);
            let count = share(spec.txns, spec.nodes, spec.workers_per_node, node, worker);
            let mut q = VecDeque::with_capacity(count as usize);
            for _ in 0..count {
                q.push_back(gen_tpcc_txn(spec, &topo, &groups, node, &mut rng, &mut cursors));
            }
            per_node.push(q);
        }
        programs.push(per_node);
    }
    Workload { data, programs, initial_total }
}

fn gen_tpcc_txn(
    spec: &WorkloadSpec,
    topo: &Topology,
    groups: &NodeGroups,
    home: u32,
    rng: &mut ChaCha8Rng,
    cursors: &mut BTreeMap<(u64, u64), u64>,
) -> Program {
    let distributed = rng.gen_bool(spec.dist_txn_fraction);
    let hot = rng.gen_bool(spec.hot_access_fraction);
    let targets = if distributed {
        let fanout = if rng.gen_bool(0.5) { 2 } else { 3 };
        pick_nodes(rng, spec.nodes, fanout)
    } else {
        vec![home]
    };
    let hotn = spec.hot_keys_per_node as usize;
    let w = groups.pick(rng, targets[0], hotn, hot);
    let d = rng.gen_range(0..TPCC_DISTRICTS);
    let c = rng.gen_range(0..TPCC_CUSTOMERS_PER_DISTRICT);

    let mut reads: Vec<Key> = Vec::new();
    let mut writes: Vec<(Key, Mutation)> = Vec::new();
    if rng.gen_range(0..100) < spec.tpcc_neworder_pct {
        // NewOrder: bump the district's next-order cursor (the hotspot), pull
        // 5-15 stock rows, fill a preallocated order slot.
        reads.push(district_row(w, d));
        writes.push((district_row(w, d), Mutation::Add(1)));
        reads.push(customer_row(w, d, c));
        let lines = rng.gen_range(5..=15);
        let mut seen = BTreeSet::new();
        for _ in 0..lines {
            let supply_w = if distributed && targets.len() > 1 && rng.gen_bool(0.5) {
                let t = targets[1 + rng.gen_range(0..targets.len() - 1)];
                groups.pick(rng, t, hotn, false)
            } else {
                w
            };
            let item = rng.gen_range(0..TPCC_ITEMS_PER_WAREHOUSE);
            if seen.insert(stock_row(supply_w, item)) {
                reads.push(stock_row(supply_w, item));
                writes.push((stock_row(supply_w, item), Mutation::Add(-1)));
            }
        }
        let cur = cursors.entry((w, d)).or_insert(0);
        let slot = *cur % TPCC_ORDER_SLOTS;
        *cur += 1;
        writes.push((order_slot(w, d, slot), Mutation::Put(*cur as i64)));
    } else {
        // Payment: warehouse and district ytd, customer balance.
        let (cw, cd, cc) = if distributed && targets.len() > 1 {
            (groups.pick(rng, targets[1], hotn, false), rng.gen_range(0..TPCC_DISTRICTS), c)
        } else {
            (w, d, c)
        };
        reads.extend([wh_row(w), district_row(w, d), customer_row(cw, cd, cc)]);
        writes.push((wh_row(w), Mutation::Add(1)));
        writes.push((district_row(w, d), Mutation::Add(1)));
        writes.push((customer_row(cw, cd, cc), Mutation::Add(-1)));
    }
    for _ in 0..spec.pad_reads {
        let pw = groups.pick(rng, home, hotn, false);
        reads.push(customer_row(pw, rng.gen_range(0..TPCC_DISTRICTS), rng.gen_range(0..TPCC_CUSTOMERS_PER_DISTRICT)));
    }
    finish_program(topo, reads, writes, 0)
}

// ---- microbenchmark --------------------------------------------------------

fn build_micro(spec: &WorkloadSpec) -> Workload {
    let topo = Topology::new(spec.nodes, spec.workers_per_node);
    let keys = spec.scale as u64 * spec.nodes as u64;
    let groups = NodeGroups::build(&topo, keys);

    let data: Vec<(Key, i64)> = (0..keys).map(|g| (make_key(g, 0), 0)).collect();

    let mut programs = Vec::new();
    for node in 0..spec.nodes {
        let mut per_node = Vec::new();
        for worker in 0..spec.workers_per_node {
            let mut rng = worker_rng(spec.seed, node, worker);
            let count = share(spec.txns, spec.nodes, spec.workers_per_node, node, worker);
            let mut q = VecDeque::with_capacity(count as usize);
            for _ in 0..count {
                q.push_back(gen_micro_txn(spec, &topo, &groups, node, &mut rng));
            }
            per_node.push(q);
        }
        programs.push(per_node);
    }
    Workload { data, programs, initial_total: 0 }
}

fn gen_micro_txn(
    spec: &WorkloadSpec,
    topo: &Topology,
    groups: &NodeGroups,
    home: u32,
    rng: &mut ChaCha8Rng,
) -> Program {
    let distributed = rng.gen_bool(spec.dist_txn_fraction);
    let hot = rng.gen_bool(spec.hot_access_fraction);
    let targets = if distributed {
        let fanout = if rng.gen_bool(0.5) { 2 } else { 3 };
        pick_nodes(rng, spec.nodes, fanout)
    } else {
        vec![home]
    };
    let hotn = spec.hot_keys_per_node as usize;

    // Two read-modify-write keys plus two plain reads, spread over the
    // targets. Hot transactions draw all four from the hot sets, which is
    // what makes overlapping read sets with disjoint write sets (the
    // write-skew shape) common under contention.
    let mut update_keys = BTreeSet::new();
    for i in 0..2 {
        let target = targets[i % targets.len()];
        for _ in 0..8 {
            if update_keys.insert(make_key(groups.pick(rng, target, hotn, hot), 0)) {
                break;
            }
        }
    }
    let mut reads: BTreeSet<Key> = update_keys.clone();
    for i in 0..2 {
        let target = targets[(i + 1) % targets.len()];
        reads.insert(make_key(groups.pick(rng, target, hotn, hot), 0));
    }
    let writes: Vec<(Key, Mutation)> = update_keys.iter().map(|k| (*k, Mutation::Add(1))).collect();
    let delta = writes.len() as i64;
    let mut reads: Vec<Key> = reads.into_iter().collect();
    for _ in 0..spec.pad_reads {
        reads.push(make_key(groups.pick(rng, home, hotn, false), 0));
    }
    finish_program(topo, reads, writes, delta)
}

fn finish_program(topo: &Topology, reads: Vec<Key>, writes: Vec<(Key, Mutation)>, delta: i64) -> Program {
    let reads: Vec<Key> = reads.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    let mut nodes: BTreeSet<u32> = reads.iter().map(|k| topo.node_of_key(*k)).collect();
    nodes.extend(writes.iter().map(|(k, _)| topo.node_of_key(*k)));
    let distributed = nodes.len() > 1;
    Program { reads, writes, delta, distributed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::WorkloadSpec;

    fn spec(kind: WorkloadKind) -> WorkloadSpec {
        WorkloadSpec { kind, ..WorkloadSpec::example() }
    }

    #[test]
    fn generators_are_pure_functions_of_spec_and_seed() {
        for kind in [WorkloadKind::SmallBank, WorkloadKind::TpccLite, WorkloadKind::Micro] {
            let a = build_workload(&spec(kind));
            let b = build_workload(&spec(kind));
            assert_eq!(a.data, b.data);
            let pa: Vec<String> = a.programs.iter().flatten().flatten().map(|p| format!("{p:?}")).collect();
            let pb: Vec<String> = b.programs.iter().flatten().flatten().map(|p| format!("{p:?}")).collect();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn local_spec_touches_one_node() {
        let mut s = spec(WorkloadKind::SmallBank);
        s.dist_txn_fraction = 0.0;
        let w = build_workload(&s);
        for p in w.programs.iter().flatten().flatten() {
            assert!(!p.distributed);
        }
    }

    #[test]
    fn dist_fraction_concentrates() {
        let mut s = spec(WorkloadKind::SmallBank);
        s.dist_txn_fraction = 0.5;
        s.txns = 10_000;
        let w = build_workload(&s);
        let dist = w.programs.iter().flatten().flatten().filter(|p| p.distributed).count();
        assert!((4700..=5300).contains(&dist), "distributed count {dist}");
    }

    #[test]
    fn smallbank_writes_are_read_closed() {
        let s = spec(WorkloadKind::SmallBank);
        let w = build_workload(&s);
        for p in w.programs.iter().flatten().flatten() {
            for (k, m) in &p.writes {
                match m {
                    Mutation::Add(_) => assert!(p.reads.contains(k)),
                    Mutation::AddValuesOf(srcs) => {
                        assert!(p.reads.contains(k));
                        assert!(srcs.iter().all(|s| p.reads.contains(s)));
                    }
                    Mutation::Put(_) => {}
                }
            }
        }
    }

    #[test]
    fn tpcc_neworder_touches_district_and_stocks() {
        let mut s = spec(WorkloadKind::TpccLite);
        s.tpcc_neworder_pct = 100;
        s.dist_txn_fraction = 0.0;
        let w = build_workload(&s);
        for p in w.programs.iter().flatten().flatten() {
            let stock_writes = p
                .writes
                .iter()
                .filter(|(k, _)| {
                    let sub = k & ((1 << crate::cluster::topology::SUB_BITS) - 1);
                    (SUB_STOCK..SUB_ORDER).contains(&sub)
                })
                .count();
            assert!((1..=15).contains(&stock_writes), "stock writes {stock_writes}");
            let district_write = p.writes.iter().any(|(k, _)| {
                let sub = k & ((1 << crate::cluster::topology::SUB_BITS) - 1);
                (SUB_DISTRICT..SUB_DISTRICT + TPCC_DISTRICTS).contains(&sub)
            });
            assert!(district_write);
        }
    }

    #[test]
    fn tpcc_payment_touches_warehouse_district_customer() {
        let mut s = spec(WorkloadKind::TpccLite);
        s.tpcc_neworder_pct = 0;
        s.dist_txn_fraction = 0.0;
        let w = build_workload(&s);
        for p in w.programs.iter().flatten().flatten() {
            assert_eq!(p.writes.len(), 3);
        }
    }

    #[test]
    fn hot_fraction_full_targets_hot_set() {
        let mut s = spec(WorkloadKind::Micro);
        s.hot_access_fraction = 1.0;
        s.dist_txn_fraction = 0.0;
        s.hot_keys_per_node = 4;
        let w = build_workload(&s);
        let topo = Topology::new(s.nodes, s.workers_per_node);
        let groups = NodeGroups::build(&topo, s.scale as u64 * s.nodes as u64);
        // every update key is within its node's hot prefix
        for p in w.programs.iter().flatten().flatten() {
            for (k, _) in &p.writes {
                let node = topo.node_of_key(*k) as usize;
                let hotset: BTreeSet<Key> =
                    groups.by_node[node].iter().take(4).map(|g| make_key(*g, 0)).collect();
                assert!(hotset.contains(k), "key {k} outside hot set");
            }
        }
    }
}
