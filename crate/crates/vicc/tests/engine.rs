//! End-to-end engine checks on the deterministic simulator: histories pass
//! the matching oracle, stamps satisfy their inequalities, message counters
//! match the protocol, and replays are byte-identical.

use vicc::bench::{conservation_check, gen::build_workload, run_experiment, WorkloadKind, WorkloadSpec};
use vicc::cluster::config::{ClusterConfig, TransportMode};
use vicc::cluster::message::MsgKind;
use vicc::cluster::program::{Mutation, Program};
use vicc::cluster::sim::run_sim;
use vicc::cluster::topology::{make_key, Topology};
use vicc::cluster::RunArtifacts;
use vicc::core::{Level, Stamp, Tid, Ts};
use vicc::mvstore::Key;
use vicc::oracle::{
    check_cv, check_postsi, check_sv, extract_dependencies, format_history, verify_postsi_stamps,
    verify_sv_orders, Dependencies,
};
use std::collections::{BTreeMap, VecDeque};

fn sim_cfg() -> ClusterConfig {
    ClusterConfig { transport: TransportMode::Sim, ..ClusterConfig::default() }
}

fn micro_spec(seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        kind: WorkloadKind::Micro,
        nodes: 4,
        workers_per_node: 4,
        dist_txn_fraction: 0.2,
        hot_keys_per_node: 8,
        hot_access_fraction: 0.3,
        pad_reads: 0,
        scale: 100,
        txns: 800,
        seed,
        tpcc_neworder_pct: 50,
    }
}

fn run(spec: &WorkloadSpec, level: Level) -> RunArtifacts {
    let (_, artifacts) = run_experiment(spec, level, &sim_cfg(), None);
    artifacts
}

fn deps_of(artifacts: &RunArtifacts) -> Dependencies {
    extract_dependencies(&artifacts.history).expect("well-formed history")
}

fn postsi_stamp_map(artifacts: &RunArtifacts) -> BTreeMap<Tid, (Ts, Ts)> {
    artifacts
        .stamps
        .iter()
        .map(|(t, s)| match s {
            Stamp::Interval { start, commit } => (*t, (*start, *commit)),
            other => panic!("postsi run produced {other:?}"),
        })
        .collect()
}

#[test]
fn postsi_micro_run_passes_oracle_and_stamp_checks() {
    let artifacts = run(&micro_spec(11), Level::PostSi);
    assert!(artifacts.committed() > 0);
    let deps = deps_of(&artifacts);
    assert!(check_postsi(&deps).passed(), "postsi history infeasible");
    let stamps = postsi_stamp_map(&artifacts);
    assert_eq!(verify_postsi_stamps(&deps, &stamps), Ok(()));
    assert_eq!(artifacts.metrics.collect_misses, 0);
}

#[test]
fn sv_micro_run_passes_oracle_and_order_checks() {
    let artifacts = run(&micro_spec(13), Level::Sv);
    assert!(artifacts.committed() > 0);
    let deps = deps_of(&artifacts);
    assert!(check_sv(&deps).passed(), "sv history not serializable");
    let orders: BTreeMap<Tid, Ts> = artifacts
        .stamps
        .iter()
        .map(|(t, s)| match s {
            Stamp::Order(o) => (*t, *o),
            other => panic!("sv run produced {other:?}"),
        })
        .collect();
    assert_eq!(verify_sv_orders(&deps, &orders), Ok(()));
}

#[test]
fn cv_micro_run_passes_cv_oracle() {
    let artifacts = run(&micro_spec(17), Level::Cv);
    assert!(artifacts.committed() > 0);
    let deps = deps_of(&artifacts);
    assert!(check_cv(&deps).passed(), "cv history inconsistent");
}

#[test]
fn antidep_tables_drain_to_empty_at_quiescence() {
    // Entries pair ongoing transactions only; once every transaction has
    // terminated and all purges delivered, every replica is empty.
    for level in [Level::Cv, Level::PostSi, Level::Sv] {
        let artifacts = run(&micro_spec(47), level);
        assert_eq!(
            artifacts.leftover_antidep_entries, 0,
            "{level:?} left table entries behind"
        );
    }
}

#[test]
fn central_si_costs_at_least_two_more_messages_than_postsi() {
    let mut spec = micro_spec(53);
    spec.hot_access_fraction = 0.0;
    let (central, _) = run_experiment(&spec, Level::CentralSi, &sim_cfg(), None);
    let (postsi, _) = run_experiment(&spec, Level::PostSi, &sim_cfg(), None);
    assert!(
        central.msgs_per_txn >= postsi.msgs_per_txn + 2.0,
        "central {:.2} vs postsi {:.2}",
        central.msgs_per_txn,
        postsi.msgs_per_txn
    );
}

#[test]
fn cv_keeps_bounds_inert() {
    // Feature isolation: the CV layer never moves timestamp bounds, so a CV
    // run must never abort for bound reasons.
    let artifacts = run(&micro_spec(19), Level::Cv);
    assert_eq!(artifacts.metrics.aborted_bound, 0);
    assert_eq!(artifacts.metrics.aborted_novis, 0);
}

#[test]
fn central_si_history_is_valid_snapshot_isolation() {
    let artifacts = run(&micro_spec(23), Level::CentralSi);
    assert!(artifacts.committed() > 0);
    let deps = deps_of(&artifacts);
    assert!(check_postsi(&deps).passed(), "central SI history failed the SI oracle");
    // Two coordinator requests per attempt, begin and end.
    assert_eq!(artifacts.metrics.coord_requests, 2 * artifacts.metrics.attempts);
}

#[test]
fn sim_replay_is_byte_identical() {
    let spec = micro_spec(29);
    let a = run(&spec, Level::PostSi);
    let b = run(&spec, Level::PostSi);
    assert_eq!(format_history(&a.history), format_history(&b.history));
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.ticks, b.ticks);
    assert_eq!(a.final_values, b.final_values);
}

#[test]
fn smallbank_conserves_money_under_all_sound_schedulers() {
    let spec = WorkloadSpec {
        kind: WorkloadKind::SmallBank,
        nodes: 3,
        workers_per_node: 4,
        dist_txn_fraction: 0.3,
        hot_keys_per_node: 5,
        hot_access_fraction: 0.5,
        pad_reads: 0,
        scale: 50,
        txns: 900,
        seed: 31,
        tpcc_neworder_pct: 50,
    };
    let w = build_workload(&spec);
    for level in [Level::Cv, Level::PostSi, Level::Sv, Level::CentralSi] {
        let artifacts = run(&spec, level);
        assert!(artifacts.committed() > 0);
        conservation_check(w.initial_total, &artifacts).unwrap_or_else(|e| panic!("{level:?}: {e}"));
    }
}

#[test]
fn tpcc_lite_runs_clean_under_postsi() {
    let spec = WorkloadSpec {
        kind: WorkloadKind::TpccLite,
        nodes: 2,
        workers_per_node: 4,
        dist_txn_fraction: 0.2,
        hot_keys_per_node: 2,
        hot_access_fraction: 0.2,
        pad_reads: 0,
        scale: 2,
        txns: 400,
        seed: 37,
        tpcc_neworder_pct: 50,
    };
    let artifacts = run(&spec, Level::PostSi);
    assert!(artifacts.committed() > 0);
    let deps = deps_of(&artifacts);
    assert!(check_postsi(&deps).passed());
    let stamps = postsi_stamp_map(&artifacts);
    assert_eq!(verify_postsi_stamps(&deps, &stamps), Ok(()));
}

// ---- hand-built message accounting scenarios -------------------------------

/// Run a custom list of programs on chosen workers. `programs[n][w]`.
fn run_programs(
    level: Level,
    nodes: u32,
    data: &[(Key, i64)],
    programs: Vec<Vec<VecDeque<Program>>>,
) -> RunArtifacts {
    let cfg = ClusterConfig {
        nodes,
        workers_per_node: programs[0].len() as u32,
        watermark_interval: 1_000_000, // keep gossip out of the counters
        ..sim_cfg()
    };
    run_sim(&cfg, level, data, programs)
}

/// A key owned by `node` under the given topology, distinct per `salt`.
fn key_on(topo: &Topology, node: u32, salt: u64) -> Key {
    let mut g = salt;
    loop {
        let k = make_key(g, 0);
        if topo.node_of_key(k) == node {
            return k;
        }
        g += 1000;
    }
}

fn rmw(key: Key) -> Program {
    Program { reads: vec![key], writes: vec![(key, Mutation::Add(1))], delta: 1, distributed: false }
}

#[test]
fn local_conflict_free_txn_sends_zero_messages() {
    let topo = Topology::new(2, 1);
    let k = key_on(&topo, 0, 1);
    let data = vec![(k, 0)];
    let mut queues = vec![vec![VecDeque::new()], vec![VecDeque::new()]];
    for _ in 0..5 {
        queues[0][0].push_back(rmw(k));
    }
    for level in [Level::Cv, Level::PostSi, Level::Sv] {
        let artifacts = run_programs(level, 2, &data, queues.clone());
        assert_eq!(artifacts.committed(), 5);
        assert_eq!(artifacts.metrics.cross_total(), 0, "{level:?} sent cross-node messages");
    }
}

#[test]
fn distributed_conflict_free_txn_message_count_is_exact() {
    // One transaction from node 0 reading and writing one key on each of two
    // remote nodes: 2 read round trips + (prepare + publish) round trips per
    // participant, nothing else.
    let topo = Topology::new(3, 1);
    let k1 = key_on(&topo, 1, 1);
    let k2 = key_on(&topo, 2, 1);
    let data = vec![(k1, 0), (k2, 0)];
    let program = Program {
        reads: vec![k1, k2],
        writes: vec![(k1, Mutation::Add(1)), (k2, Mutation::Add(1))],
        delta: 2,
        distributed: true,
    };
    let mut queues = vec![vec![VecDeque::new()], vec![VecDeque::new()], vec![VecDeque::new()]];
    queues[0][0].push_back(program);
    let artifacts = run_programs(Level::PostSi, 3, &data, queues);
    assert_eq!(artifacts.committed(), 1);
    let m = &artifacts.metrics;
    assert_eq!(m.cross_of(MsgKind::Read), 2);
    assert_eq!(m.cross_of(MsgKind::ReadRet), 2);
    assert_eq!(m.cross_of(MsgKind::Prepare), 2);
    assert_eq!(m.cross_of(MsgKind::PrepareRet), 2);
    assert_eq!(m.cross_of(MsgKind::Publish), 2);
    assert_eq!(m.cross_of(MsgKind::PublishRet), 2);
    // No contention: the negotiation legs stay silent.
    for kind in [MsgKind::Register, MsgKind::Cap, MsgKind::Resolve, MsgKind::Raise, MsgKind::RecordRw, MsgKind::Purge] {
        assert_eq!(m.cross_of(kind), 0, "{kind:?} unexpectedly used");
    }
    assert_eq!(m.cross_total(), 12);
}

#[test]
fn contended_distributed_txns_use_round_two_only_then() {
    // Two workers on different nodes hammer the same remote key; the
    // anti-dependency machinery must light up.
    let topo = Topology::new(2, 1);
    let k = key_on(&topo, 1, 1);
    let data = vec![(k, 0)];
    let mut queues = vec![vec![VecDeque::new()], vec![VecDeque::new()]];
    for _ in 0..30 {
        queues[0][0].push_back(rmw(k));
        queues[1][0].push_back(rmw(k));
    }
    let artifacts = run_programs(Level::PostSi, 2, &data, queues);
    assert!(artifacts.committed() > 0);
    let m = &artifacts.metrics;
    assert!(
        m.cross_of(MsgKind::Register) > 0 || m.cross_of(MsgKind::Cap) > 0,
        "contended run never negotiated: {m:?}"
    );
    let deps = extract_dependencies(&artifacts.history).unwrap();
    assert!(check_postsi(&deps).passed());
}

#[test]
fn latency_does_not_change_serial_outcomes() {
    let topo = Topology::new(2, 1);
    let k1 = key_on(&topo, 0, 1);
    let k2 = key_on(&topo, 1, 1);
    let data = vec![(k1, 0), (k2, 0)];
    let program = Program {
        reads: vec![k1, k2],
        writes: vec![(k1, Mutation::Add(1))],
        delta: 1,
        distributed: true,
    };
    let mut outcomes = Vec::new();
    for latency in [0u64, 5] {
        let cfg = ClusterConfig { nodes: 2, workers_per_node: 1, latency_ticks: latency, ..sim_cfg() };
        let mut queues = vec![vec![VecDeque::new()], vec![VecDeque::new()]];
        for _ in 0..10 {
            queues[0][0].push_back(program.clone());
        }
        let artifacts = run_sim(&cfg, Level::PostSi, &data, queues);
        outcomes.push((artifacts.committed(), artifacts.aborted(), artifacts.final_values.clone()));
    }
    assert_eq!(outcomes[0], outcomes[1]);
}

#[test]
fn write_conflict_aborts_and_retries_preserve_counts() {
    // Two same-node workers update one key; serialization happens through
    // the write lock and validation, and every program eventually commits.
    let topo = Topology::new(1, 2);
    let k = key_on(&topo, 0, 1);
    let data = vec![(k, 0)];
    let mut queues = vec![vec![VecDeque::new(), VecDeque::new()]];
    for _ in 0..20 {
        queues[0][0].push_back(rmw(k));
        queues[0][1].push_back(rmw(k));
    }
    let artifacts = run_programs(Level::PostSi, 1, &data, queues);
    assert_eq!(artifacts.committed(), 40);
    assert_eq!(artifacts.final_values[&k], 40);
    assert_eq!(
        artifacts.metrics.attempts,
        artifacts.metrics.committed + artifacts.metrics.aborted_total()
    );
}

#[test]
fn concurrent_mode_runs_clean_for_all_schedulers() {
    let spec = WorkloadSpec {
        kind: WorkloadKind::SmallBank,
        nodes: 2,
        workers_per_node: 3,
        dist_txn_fraction: 0.3,
        hot_keys_per_node: 5,
        hot_access_fraction: 0.5,
        pad_reads: 0,
        scale: 40,
        txns: 600,
        seed: 43,
        tpcc_neworder_pct: 50,
    };
    let cfg = ClusterConfig { transport: TransportMode::Concurrent, ..ClusterConfig::default() };
    let w = build_workload(&spec);
    for level in [Level::Cv, Level::PostSi, Level::Sv, Level::CentralSi] {
        let (_, artifacts) = run_experiment(&spec, level, &cfg, None);
        assert!(artifacts.committed() > 0);
        conservation_check(w.initial_total, &artifacts).unwrap_or_else(|e| panic!("{level:?}: {e}"));
        let deps = deps_of(&artifacts);
        match level {
            Level::Cv => assert!(check_cv(&deps).passed(), "cv concurrent run failed check_cv"),
            Level::Sv => assert!(check_sv(&deps).passed(), "sv concurrent run failed check_sv"),
            _ => assert!(check_postsi(&deps).passed(), "{level:?} concurrent run failed check_postsi"),
        }
    }
}

#[test]
fn optimal_baseline_sends_no_coordinator_traffic() {
    let artifacts = run(&micro_spec(41), Level::Optimal);
    assert!(artifacts.committed() > 0);
    assert_eq!(artifacts.metrics.coord_requests, 0);
    assert_eq!(artifacts.metrics.cross_of(MsgKind::CoordBegin), 0);
    assert_eq!(artifacts.metrics.cross_of(MsgKind::CoordEnd), 0);
}
