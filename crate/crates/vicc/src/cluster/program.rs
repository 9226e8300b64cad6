//! Engine-facing transaction programs. A program reads a fixed key set,
//! then derives its writes from the values it saw; the write set stays
//! private until the commit protocol applies it. Values are little-endian
//! i64 so workload audits are exact.

use crate::mvstore::{Key, Value};
use std::collections::BTreeMap;

pub fn encode_i64(v: i64) -> Value {
    v.to_le_bytes().to_vec()
}

pub fn decode_i64(v: &[u8]) -> i64 {
    let mut b = [0u8; 8];
    b[..v.len().min(8)].copy_from_slice(&v[..v.len().min(8)]);
    i64::from_le_bytes(b)
}

/// How a written key derives its new value from the read snapshot.
#[derive(Clone, Debug)]
pub enum Mutation {
    Put(i64),
    /// new = read(key) + delta; the key must be in the read set.
    Add(i64),
    /// new = read(key) + sum(read(k) for k in sources).
    AddValuesOf(Vec<Key>),
}

#[derive(Clone, Debug)]
pub struct Program {
    pub reads: Vec<Key>,
    pub writes: Vec<(Key, Mutation)>,
    /// Net money created by this program, for conservation audits.
    pub delta: i64,
    /// Touches more than one data node.
    pub distributed: bool,
}

impl Program {
    pub fn read_only(reads: Vec<Key>) -> Self {
        Program { reads, writes: Vec::new(), delta: 0, distributed: false }
    }

    /// Materialize the write set from the values read. Panics if an `Add`
    /// or source key was not read; programs are built read-closed.
    pub fn apply(&self, read_vals: &BTreeMap<Key, i64>) -> Vec<(Key, Value)> {
        self.writes
            .iter()
            .map(|(key, m)| {
                let new = match m {
                    Mutation::Put(v) => *v,
                    Mutation::Add(d) => read_vals[key] + d,
                    Mutation::AddValuesOf(sources) => {
                        read_vals[key] + sources.iter().map(|s| read_vals[s]).sum::<i64>()
                    }
                };
                (*key, encode_i64(new))
            })
            .collect()
    }
}
