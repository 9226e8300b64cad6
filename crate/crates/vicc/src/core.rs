//! Core domain types shared by every scheduler: transaction identifiers,
//! logical-time bounds and commit stamps, and per-transaction state.
//!
//! Logical timestamps are plain `u64` values with `u64::MAX` standing in for
//! +infinity. All schedulers negotiate over these; none of them ever consults
//! a real clock.

use std::fmt;

/// Logical timestamp. `TS_INF` is the +infinity sentinel.
pub type Ts = u64;

/// +infinity for upper bounds. Unreachable by real stamps at desk scale.
pub const TS_INF: Ts = u64::MAX;

/// Session identifier. Sessions issue transaction ids independently; session 0
/// is reserved for the data loader.
pub type SessionId = u32;

/// Globally unique transaction id: session id in the high 32 bits, a
/// per-session sequence number in the low 32 bits. Packing both into one word
/// keeps comparisons and message formats cheap.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tid(pub u64);

/// The id under which preloaded data is installed. Always treated as
/// committed before any real transaction starts.
pub const LOADER_TID: Tid = Tid(0);

impl Tid {
    pub fn new(session: SessionId, seq: u32) -> Self {
        Tid(((session as u64) << 32) | seq as u64)
    }

    pub fn session(self) -> SessionId {
        (self.0 >> 32) as u32
    }

    pub fn seq(self) -> u32 {
        self.0 as u32
    }
}

impl fmt::Display for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.session(), self.seq())
    }
}

impl fmt::Debug for Tid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tid({})", self)
    }
}

/// Per-session transaction id source. `next_tid` strictly increases the
/// sequence number, so (session, seq) pairs are globally unique.
#[derive(Debug)]
pub struct Session {
    id: SessionId,
    counter: u32,
}

impl Session {
    pub fn new(id: SessionId) -> Self {
        Session { id, counter: 0 }
    }

    /// Restore a session whose counter was persisted at `counter`.
    pub fn with_counter(id: SessionId, counter: u32) -> Self {
        Session { id, counter }
    }

    pub fn next_tid(&mut self) -> Tid {
        self.counter += 1;
        Tid::new(self.id, self.counter)
    }
}

/// A closed interval of logical time. `upper == TS_INF` means unbounded.
/// The owning transaction must abort as soon as `lower > upper`; the check
/// is separate from the tightening operations so callers can detect the
/// violation where it is convenient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bound {
    pub lower: Ts,
    pub upper: Ts,
}

/// Result of `Bound::check`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundCheck {
    Ok,
    MustAbort,
}

impl Bound {
    pub fn initial() -> Self {
        Bound { lower: 0, upper: TS_INF }
    }

    /// Initial bound with a pinned upper end, used by abort retries.
    pub fn pinned(upper: Ts) -> Self {
        Bound { lower: 0, upper }
    }

    /// lower = max(lower, v). Never touches the upper end.
    #[must_use]
    pub fn tighten_lower(self, v: Ts) -> Self {
        Bound { lower: self.lower.max(v), upper: self.upper }
    }

    /// upper = min(upper, v). Never touches the lower end.
    #[must_use]
    pub fn tighten_upper(self, v: Ts) -> Self {
        Bound { lower: self.lower, upper: self.upper.min(v) }
    }

    pub fn check(self) -> BoundCheck {
        if self.lower > self.upper {
            BoundCheck::MustAbort
        } else {
            BoundCheck::Ok
        }
    }
}

/// Isolation level / scheduler selector. CentralSi and Optimal are the
/// comparison baselines; the first three are the visibility schedulers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    Cv,
    PostSi,
    Sv,
    CentralSi,
    Optimal,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Cv => "cv",
            Level::PostSi => "postsi",
            Level::Sv => "sv",
            Level::CentralSi => "central",
            Level::Optimal => "optimal",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        match s {
            "cv" => Some(Level::Cv),
            "postsi" => Some(Level::PostSi),
            "sv" => Some(Level::Sv),
            "central" => Some(Level::CentralSi),
            "optimal" => Some(Level::Optimal),
            _ => None,
        }
    }
}

/// Finalized commit stamp. PostSI transactions carry a (start, commit)
/// interval with start < commit; SV transactions carry a single order;
/// CV and the baselines carry one opaque commit marker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stamp {
    Interval { start: Ts, commit: Ts },
    Order(Ts),
    Marker(Ts),
}

impl Stamp {
    /// The value written into the CIDs of the versions this transaction
    /// created: commit time under PostSI, order under SV, marker otherwise.
    pub fn cid(self) -> Ts {
        match self {
            Stamp::Interval { commit, .. } => commit,
            Stamp::Order(o) => o,
            Stamp::Marker(m) => m,
        }
    }

    /// The value folded into the SIDs of versions this transaction read:
    /// start time under PostSI, order under SV.
    pub fn sid(self) -> Ts {
        match self {
            Stamp::Interval { start, .. } => start,
            Stamp::Order(o) => o,
            Stamp::Marker(m) => m,
        }
    }
}

/// Transaction lifecycle. Transitions are Active -> Preparing -> Committed
/// or Aborted, plus the direct Active -> Aborted edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Active,
    Preparing,
    Committed,
    Aborted,
}

/// Why a transaction aborted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AbortReason {
    BoundViolation,
    WriteConflict,
    NoVisibleVersion,
    LockTimeout,
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AbortReason::BoundViolation => "bound-violation",
            AbortReason::WriteConflict => "write-conflict",
            AbortReason::NoVisibleVersion => "no-visible-version",
            AbortReason::LockTimeout => "lock-timeout",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn next_tid_increments_per_session() {
        let mut s = Session::new(3);
        assert_eq!(s.next_tid(), Tid::new(3, 1));
        assert_eq!(s.next_tid(), Tid::new(3, 2));
    }

    #[test]
    fn tids_unique_across_sessions() {
        let mut seen = HashSet::new();
        for sid in [1u32, 2] {
            let mut s = Session::new(sid);
            for _ in 0..1000 {
                assert!(seen.insert(s.next_tid()));
            }
        }
        assert_eq!(seen.len(), 2000);
    }

    #[test]
    fn session_restored_from_persisted_counter() {
        let mut s = Session::with_counter(7, 41);
        assert_eq!(s.next_tid(), Tid::new(7, 42));
    }

    #[test]
    fn tighten_lower_takes_max() {
        let b = Bound::initial().tighten_lower(5);
        assert_eq!(b, Bound { lower: 5, upper: TS_INF });
        assert_eq!(b.tighten_lower(3), Bound { lower: 5, upper: TS_INF });
    }

    #[test]
    fn tighten_lower_past_upper_flags_abort() {
        let b = Bound { lower: 5, upper: 8 }.tighten_lower(9);
        assert_eq!(b, Bound { lower: 9, upper: 8 });
        assert_eq!(b.check(), BoundCheck::MustAbort);
    }

    #[test]
    fn tighten_upper_takes_min() {
        let b = Bound::initial().tighten_upper(7);
        assert_eq!(b, Bound { lower: 0, upper: 7 });
        assert_eq!(b.tighten_upper(9), Bound { lower: 0, upper: 7 });
    }

    #[test]
    fn tighten_upper_below_lower_flags_abort() {
        let b = Bound { lower: 4, upper: 6 }.tighten_upper(3);
        assert_eq!(b, Bound { lower: 4, upper: 3 });
        assert_eq!(b.check(), BoundCheck::MustAbort);
    }

    #[test]
    fn check_bound_edges() {
        assert_eq!(Bound { lower: 5, upper: 5 }.check(), BoundCheck::Ok);
        assert_eq!(Bound { lower: 6, upper: 5 }.check(), BoundCheck::MustAbort);
        assert_eq!(Bound::initial().check(), BoundCheck::Ok);
    }

    #[test]
    fn tid_roundtrip() {
        let t = Tid::new(17, 123456);
        assert_eq!(t.session(), 17);
        assert_eq!(t.seq(), 123456);
        assert_eq!(t.to_string(), "17.123456");
    }

    proptest! {
        // Bounds are monotone under any sequence of tightenings, and a
        // violated bound can never return to Ok.
        #[test]
        fn bounds_monotone(ops in proptest::collection::vec((any::<bool>(), 0u64..1000), 0..64)) {
            let mut b = Bound::initial();
            let mut dead = false;
            for (is_lower, v) in ops {
                let prev = b;
                b = if is_lower { b.tighten_lower(v) } else { b.tighten_upper(v) };
                prop_assert!(b.lower >= prev.lower);
                prop_assert!(b.upper <= prev.upper);
                if dead {
                    prop_assert_eq!(b.check(), BoundCheck::MustAbort);
                }
                dead = b.check() == BoundCheck::MustAbort;
            }
        }

        #[test]
        fn tid_packing_is_injective(s1 in 0u32..500, q1 in 0u32..500, s2 in 0u32..500, q2 in 0u32..500) {
            let a = Tid::new(s1, q1);
            let b = Tid::new(s2, q2);
            prop_assert_eq!(a == b, s1 == s2 && q1 == q2);
        }
    }
}
