//! Communication trace: the executor's exact log of every simulated
//! message, used to cross-check the analytic volume model.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    P2P,
    AllGather,
    ReduceScatter,
    InitShuffle,
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EventKind::P2P => write!(f, "p2p"),
            EventKind::AllGather => write!(f, "all_gather"),
            EventKind::ReduceScatter => write!(f, "reduce_scatter"),
            EventKind::InitShuffle => write!(f, "init_shuffle"),
        }
    }
}

/// One simulated message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEvent {
    pub kind: EventKind,
    pub src: usize,
    pub dst: usize,
    pub payload_elems: u64,
    pub payload_bytes: u64,
    pub step: usize,
    pub crosses_node: bool,
}

/// Ordered event log for one executed collective phase or full pass.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommTrace {
    pub world_size: usize,
    pub events: Vec<CommEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KindTotals {
    pub events: u64,
    pub elems: u64,
    pub bytes: u64,
}

/// Aggregated totals by kind and by link class, plus per-device volumes.
/// "P2P class" covers ring P2P and the initial shuffle; "collective class"
/// covers all-gather and reduce-scatter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub by_kind: BTreeMap<String, KindTotals>,
    pub intra_node: KindTotals,
    pub inter_node: KindTotals,
    /// Elements sent per device over ring P2P + init shuffle.
    pub per_device_p2p_elems: Vec<u64>,
    /// Elements sent per device over all-gather + reduce-scatter.
    pub per_device_collective_elems: Vec<u64>,
}

impl CommTrace {
    pub fn new(world_size: usize) -> Self {
        CommTrace {
            world_size,
            events: Vec::new(),
        }
    }

    pub fn total_elems(&self) -> u64 {
        self.events.iter().map(|e| e.payload_elems).sum()
    }

    pub fn summary(&self) -> TraceSummary {
        let mut by_kind: BTreeMap<String, KindTotals> = BTreeMap::new();
        let mut intra = KindTotals::default();
        let mut inter = KindTotals::default();
        let mut p2p = vec![0u64; self.world_size];
        let mut coll = vec![0u64; self.world_size];
        for e in &self.events {
            let t = by_kind.entry(e.kind.to_string()).or_default();
            t.events += 1;
            t.elems += e.payload_elems;
            t.bytes += e.payload_bytes;
            let link = if e.crosses_node { &mut inter } else { &mut intra };
            link.events += 1;
            link.elems += e.payload_elems;
            link.bytes += e.payload_bytes;
            match e.kind {
                EventKind::P2P | EventKind::InitShuffle => p2p[e.src] += e.payload_elems,
                EventKind::AllGather | EventKind::ReduceScatter => coll[e.src] += e.payload_elems,
            }
        }
        TraceSummary {
            by_kind,
            intra_node: intra,
            inter_node: inter,
            per_device_p2p_elems: p2p,
            per_device_collective_elems: coll,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_splits_kinds_and_links() {
        let mut trace = CommTrace::new(2);
        trace.events.push(CommEvent {
            kind: EventKind::P2P,
            src: 0,
            dst: 1,
            payload_elems: 10,
            payload_bytes: 20,
            step: 0,
            crosses_node: false,
        });
        trace.events.push(CommEvent {
            kind: EventKind::AllGather,
            src: 1,
            dst: 0,
            payload_elems: 5,
            payload_bytes: 10,
            step: 0,
            crosses_node: true,
        });
        let s = trace.summary();
        assert_eq!(s.per_device_p2p_elems, vec![10, 0]);
        assert_eq!(s.per_device_collective_elems, vec![0, 5]);
        assert_eq!(s.intra_node.elems, 10);
        assert_eq!(s.inter_node.elems, 5);
        assert_eq!(s.by_kind["p2p"].events, 1);
    }
}
