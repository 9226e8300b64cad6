//! Key partitioning and the session/node mapping.
//!
//! Keys carry a locality group in their high bits; the partition function
//! hashes the group so that rows that must be co-located (a customer's two
//! accounts, a warehouse's districts and stock) land on one node while
//! groups spread uniformly.

use crate::core::{SessionId, Tid};
use crate::mvstore::Key;

/// Bits of a key reserved for the sub-id within a locality group.
pub const SUB_BITS: u32 = 20;

pub fn make_key(group: u64, sub: u64) -> Key {
    debug_assert!(sub < (1 << SUB_BITS));
    (group << SUB_BITS) | sub
}

pub fn key_group(key: Key) -> u64 {
    key >> SUB_BITS
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

#[derive(Clone, Copy, Debug)]
pub struct Topology {
    pub data_nodes: u32,
    pub workers_per_node: u32,
}

impl Topology {
    pub fn new(data_nodes: u32, workers_per_node: u32) -> Self {
        assert!(data_nodes > 0 && workers_per_node > 0);
        Topology { data_nodes, workers_per_node }
    }

    /// The master node hosts the central coordinator and no data.
    pub fn master(&self) -> u32 {
        self.data_nodes
    }

    /// Sessions are dense per node; session 0 is the loader.
    pub fn session_for(&self, node: u32, worker: u32) -> SessionId {
        1 + node * self.workers_per_node + worker
    }

    pub fn node_of_session(&self, session: SessionId) -> u32 {
        if session == 0 {
            return 0;
        }
        (session - 1) / self.workers_per_node
    }

    pub fn node_of_tid(&self, tid: Tid) -> u32 {
        self.node_of_session(tid.session())
    }

    pub fn node_of_group(&self, group: u64) -> u32 {
        (splitmix64(group) % self.data_nodes as u64) as u32
    }

    pub fn node_of_key(&self, key: Key) -> u32 {
        self.node_of_group(key_group(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_roundtrip() {
        let k = make_key(42, 7);
        assert_eq!(key_group(k), 42);
    }

    #[test]
    fn partition_is_stable_and_total() {
        let topo = Topology::new(4, 8);
        for g in 0..1000u64 {
            let n = topo.node_of_group(g);
            assert!(n < 4);
            assert_eq!(n, topo.node_of_group(g));
            assert_eq!(n, topo.node_of_key(make_key(g, 3)));
        }
    }

    #[test]
    fn partition_spreads_groups() {
        let topo = Topology::new(4, 8);
        let mut counts = [0u32; 4];
        for g in 0..10_000u64 {
            counts[topo.node_of_group(g) as usize] += 1;
        }
        for c in counts {
            assert!(c > 1800, "skewed partition: {counts:?}");
        }
    }

    #[test]
    fn sessions_map_back_to_their_node() {
        let topo = Topology::new(3, 8);
        for node in 0..3 {
            for worker in 0..8 {
                let s = topo.session_for(node, worker);
                assert_eq!(topo.node_of_session(s), node);
            }
        }
    }
}
