//! Cluster description and rank-to-node placement.

use crate::error::{Error, Result};
use crate::topology::{ParallelConfig, Placement, TopologyPlan};
use serde::{Deserialize, Serialize};

/// Nodes, devices per node, link parameters and device throughput.
/// Bandwidths are bytes/second, latencies seconds, compute flops/second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub num_nodes: usize,
    pub devices_per_node: usize,
    pub intra_bw: f64,
    pub inter_bw: f64,
    pub intra_lat: f64,
    pub inter_lat: f64,
    pub device_flops: f64,
    pub dtype_bytes: u64,
}

impl ClusterSpec {
    /// Single-node cluster with unit links, handy for tests where only
    /// volumes matter.
    pub fn single_node(devices: usize) -> Self {
        ClusterSpec {
            num_nodes: 1,
            devices_per_node: devices,
            intra_bw: 1e9,
            inter_bw: 1e9,
            intra_lat: 0.0,
            inter_lat: 0.0,
            device_flops: 1e12,
            dtype_bytes: 8,
        }
    }

    pub fn world_size(&self) -> usize {
        self.num_nodes * self.devices_per_node
    }

    pub fn validate(&self, world_size: usize) -> Result<()> {
        if self.num_nodes == 0 || self.devices_per_node == 0 {
            return Err(Error::config("node and device counts must be positive"));
        }
        if self.world_size() != world_size {
            return Err(Error::config(format!(
                "num_nodes * devices_per_node = {} != world size {}",
                self.world_size(),
                world_size
            )));
        }
        for (name, v) in [
            ("intra_bw", self.intra_bw),
            ("inter_bw", self.inter_bw),
            ("device_flops", self.device_flops),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("{} must be positive", name)));
            }
        }
        if self.intra_lat < 0.0 || self.inter_lat < 0.0 {
            return Err(Error::config("latencies must be non-negative"));
        }
        if self.dtype_bytes == 0 {
            return Err(Error::config("dtype_bytes must be positive"));
        }
        Ok(())
    }

    pub fn bandwidth(&self, crosses_node: bool) -> f64 {
        if crosses_node {
            self.inter_bw
        } else {
            self.intra_bw
        }
    }

    pub fn latency(&self, crosses_node: bool) -> f64 {
        if crosses_node {
            self.inter_lat
        } else {
            self.intra_lat
        }
    }
}

/// Node id for every rank under the config's placement strategy.
///
/// CollectIntra packs teams contiguously into nodes; P2PIntra packs the
/// devices of each sub-ring consecutively. A team or ring may span several
/// whole nodes, but a node boundary may not cut through one unevenly.
pub fn node_map(plan: &TopologyPlan, cluster: &ClusterSpec) -> Result<Vec<usize>> {
    let p = plan.world_size();
    cluster.validate(p)?;
    let dpn = cluster.devices_per_node;
    match plan.config.placement {
        Placement::CollectIntra => {
            let c = plan.config.attn_parallel;
            if dpn % c != 0 && c % dpn != 0 {
                return Err(Error::config(format!(
                    "collect_intra infeasible: team size {} does not pack into nodes of {}",
                    c, dpn
                )));
            }
            Ok((0..p).map(|r| r / dpn).collect())
        }
        Placement::P2PIntra => {
            let g = plan.ring_length;
            if dpn % g != 0 && g % dpn != 0 {
                return Err(Error::config(format!(
                    "p2p_intra infeasible: ring length {} does not pack into nodes of {}",
                    g, dpn
                )));
            }
            let mut map = vec![usize::MAX; p];
            let mut slot = 0usize;
            for ring in plan.sub_rings() {
                for rank in ring {
                    map[rank] = slot / dpn;
                    slot += 1;
                }
            }
            Ok(map)
        }
    }
}

/// Node id of a single rank (builds the full map internally; world sizes
/// here are desk scale).
pub fn map_rank_to_node(rank: usize, config: &ParallelConfig, cluster: &ClusterSpec) -> Result<usize> {
    let plan = crate::topology::build_plan(config)?;
    let map = node_map(&plan, cluster)?;
    map.get(rank)
        .copied()
        .ok_or_else(|| Error::contract(format!("rank {} out of range", rank)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::build_plan;

    fn cluster(nodes: usize, dpn: usize) -> ClusterSpec {
        ClusterSpec {
            num_nodes: nodes,
            devices_per_node: dpn,
            ..ClusterSpec::single_node(nodes * dpn)
        }
    }

    #[test]
    fn collect_intra_hosts_one_team_per_node() {
        let cfg = ParallelConfig::new(16, 4, Placement::CollectIntra).unwrap();
        let plan = build_plan(&cfg).unwrap();
        let map = node_map(&plan, &cluster(4, 4)).unwrap();
        for (team_idx, team) in plan.teams.iter().enumerate() {
            for &r in team {
                assert_eq!(map[r], team_idx);
            }
        }
    }

    #[test]
    fn p2p_intra_keeps_rings_on_one_node() {
        let cfg = ParallelConfig::new(16, 2, Placement::P2PIntra).unwrap();
        let plan = build_plan(&cfg).unwrap();
        let map = node_map(&plan, &cluster(4, 4)).unwrap();
        for ring in plan.sub_rings() {
            let n0 = map[ring[0]];
            assert!(ring.iter().all(|&r| map[r] == n0));
        }
    }

    #[test]
    fn single_node_everything_local() {
        let cfg = ParallelConfig::new(8, 2, Placement::P2PIntra).unwrap();
        let plan = build_plan(&cfg).unwrap();
        let map = node_map(&plan, &cluster(1, 8)).unwrap();
        assert!(map.iter().all(|&n| n == 0));
    }

    #[test]
    fn infeasible_packing_rejected() {
        // ring length 4 cannot pack into nodes of 6
        let cfg = ParallelConfig::new(36, 3, Placement::P2PIntra).unwrap();
        assert_eq!(cfg.ring_length(), 4);
        assert!(node_map(&build_plan(&cfg).unwrap(), &cluster(6, 6)).is_err());
    }

    #[test]
    fn c1_p2p_intra_spans_whole_nodes() {
        let cfg = ParallelConfig::new(16, 1, Placement::P2PIntra).unwrap();
        let plan = build_plan(&cfg).unwrap();
        let map = node_map(&plan, &cluster(2, 8)).unwrap();
        assert_eq!(map[0], 0);
        assert_eq!(map[15], 1);
    }
}
