//! Team / team-group / sub-ring construction.
//!
//! Devices are grouped into teams of `C` contiguous global ranks. Teams
//! whose members ring with each other form a team group of `P/C^2` teams,
//! and the devices of a group that share an intra-team rank form one
//! sub-ring. The two closed-form rank computations (initial send target and
//! ring neighbors) are implemented literally; everything else is derived
//! from them and validated structurally.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Where the fast links go: team collectives intra-node, or ring P2P
/// intra-node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Placement {
    P2PIntra,
    CollectIntra,
}

impl std::fmt::Display for Placement {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Placement::P2PIntra => write!(f, "p2p_intra"),
            Placement::CollectIntra => write!(f, "collect_intra"),
        }
    }
}

/// World size, attention parallel size C, and placement strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub world_size: usize,
    pub attn_parallel: usize,
    pub placement: Placement,
}

impl ParallelConfig {
    pub fn new(world_size: usize, attn_parallel: usize, placement: Placement) -> Result<Self> {
        let cfg = ParallelConfig {
            world_size,
            attn_parallel,
            placement,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.world_size;
        let c = self.attn_parallel;
        if p == 0 {
            return Err(Error::config("world size must be positive"));
        }
        if c == 0 {
            return Err(Error::config("attention parallel size C must be positive"));
        }
        if c * c > p {
            return Err(Error::config(format!(
                "C={} exceeds sqrt(P) for P={}",
                c, p
            )));
        }
        if p % c != 0 {
            return Err(Error::config(format!("C={} does not divide P={}", c, p)));
        }
        if p % (c * c) != 0 {
            return Err(Error::config(format!(
                "C^2={} does not divide P={} (ring length P/C^2 must be integral)",
                c * c,
                p
            )));
        }
        Ok(())
    }

    /// Number of teams, `P/C`.
    pub fn team_count(&self) -> usize {
        self.world_size / self.attn_parallel
    }

    /// Teams per team group and devices per sub-ring, `P/C^2`.
    pub fn ring_length(&self) -> usize {
        self.world_size / (self.attn_parallel * self.attn_parallel)
    }

    /// Number of team groups (= number of distinct intra-team ranks), `C`.
    pub fn group_count(&self) -> usize {
        self.attn_parallel
    }
}

/// A device's position: global rank, inter-team rank and intra-team rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceCoord {
    pub global: usize,
    pub inter_team: usize,
    pub intra_team: usize,
}

impl DeviceCoord {
    pub fn from_global(global: usize, c: usize) -> Self {
        DeviceCoord {
            global,
            inter_team: global / c,
            intra_team: global % c,
        }
    }

    pub fn to_global(inter_team: usize, intra_team: usize, c: usize) -> usize {
        inter_team * c + intra_team
    }
}

fn check_ranks(r_t: usize, r_a: usize, d_t: usize, d_a: usize) -> Result<()> {
    if d_a == 0 || d_t == 0 || d_t % d_a != 0 {
        return Err(Error::contract(format!(
            "invalid dimensions d_t={} d_a={} (need d_a | d_t)",
            d_t, d_a
        )));
    }
    if r_t >= d_t || r_a >= d_a {
        return Err(Error::contract(format!(
            "rank out of range: r_t={} (d_t={}), r_a={} (d_a={})",
            r_t, d_t, r_a, d_a
        )));
    }
    Ok(())
}

/// Initial send target for a device's team-gathered K/V block: the global
/// rank that seeds this block's position in its sub-ring. The target team
/// group is the sender's intra-team rank.
pub fn get_init_send(r_t: usize, r_a: usize, d_t: usize, d_a: usize) -> Result<usize> {
    check_ranks(r_t, r_a, d_t, d_a)?;
    let group_size = d_t / d_a;
    let target_group = r_a;
    let target_team = target_group * group_size + r_t / d_a;
    let target_intra = r_t % d_a;
    Ok(target_team * d_a + target_intra)
}

/// Initial receive source: the unique device whose init send target is this
/// device. Computed by inverting the send permutation rather than by a
/// closed form, so it is consistent with `get_init_send` by construction.
pub fn get_init_recv(r_t: usize, r_a: usize, d_t: usize, d_a: usize) -> Result<usize> {
    check_ranks(r_t, r_a, d_t, d_a)?;
    let me = r_t * d_a + r_a;
    let p = d_t * d_a;
    for src in 0..p {
        let coord = DeviceCoord::from_global(src, d_a);
        if get_init_send(coord.inter_team, coord.intra_team, d_t, d_a)? == me {
            return Ok(src);
        }
    }
    Err(Error::contract(format!(
        "init send permutation has no preimage for rank {}",
        me
    )))
}

/// Ring neighbors (next, last) for a device. Wraparound uses mathematical
/// (non-negative) modulo so the `(r_t - 1)` term stays in-group.
pub fn get_p2p_config(r_t: usize, r_a: usize, d_t: usize, d_a: usize) -> Result<(usize, usize)> {
    check_ranks(r_t, r_a, d_t, d_a)?;
    let group_size = d_t / d_a;
    let group = r_t / group_size;
    let next_team = (r_t + 1) % group_size + group_size * group;
    let last_team = (r_t + group_size - 1) % group_size + group_size * group;
    Ok((r_a + next_team * d_a, r_a + last_team * d_a))
}

/// Complete per-device communication plan for one parallel configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyPlan {
    pub config: ParallelConfig,
    pub init_send: Vec<usize>,
    pub init_recv: Vec<usize>,
    pub ring_next: Vec<usize>,
    pub ring_last: Vec<usize>,
    /// Team t = global ranks [t*C, (t+1)*C).
    pub teams: Vec<Vec<usize>>,
    /// Team group g = teams [g*(P/C^2), (g+1)*(P/C^2)).
    pub team_groups: Vec<Vec<usize>>,
    pub ring_length: usize,
}

impl TopologyPlan {
    pub fn world_size(&self) -> usize {
        self.config.world_size
    }

    pub fn team_of(&self, rank: usize) -> usize {
        rank / self.config.attn_parallel
    }

    pub fn group_of_team(&self, team: usize) -> usize {
        team / self.ring_length
    }

    pub fn group_of(&self, rank: usize) -> usize {
        self.group_of_team(self.team_of(rank))
    }

    /// Sub-rings in canonical order (group-major, then intra-team rank),
    /// each listed starting from its lowest-ranked member and following
    /// `ring_next`.
    pub fn sub_rings(&self) -> Vec<Vec<usize>> {
        let c = self.config.attn_parallel;
        let g = self.ring_length;
        let mut rings = Vec::with_capacity(c * c);
        for group in 0..self.config.group_count() {
            for r_a in 0..c {
                let start = DeviceCoord::to_global(group * g, r_a, c);
                let mut ring = Vec::with_capacity(g);
                let mut cur = start;
                for _ in 0..g {
                    ring.push(cur);
                    cur = self.ring_next[cur];
                }
                rings.push(ring);
            }
        }
        rings
    }

    /// One line per device: rank, team, group, init_send, init_recv,
    /// ring_next, ring_last. Used by golden-file tests.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "# P={} C={} teams={} groups={} ring_length={}\n",
            self.config.world_size,
            self.config.attn_parallel,
            self.config.team_count(),
            self.config.group_count(),
            self.ring_length
        ));
        s.push_str("rank team group init_send init_recv ring_next ring_last\n");
        for r in 0..self.world_size() {
            s.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                r,
                self.team_of(r),
                self.group_of(r),
                self.init_send[r],
                self.init_recv[r],
                self.ring_next[r],
                self.ring_last[r]
            ));
        }
        s
    }
}

/// Builds the full plan for a valid configuration by evaluating the rank
/// computations for every device.
pub fn build_plan(config: &ParallelConfig) -> Result<TopologyPlan> {
    config.validate()?;
    let p = config.world_size;
    let c = config.attn_parallel;
    let d_t = config.team_count();
    let d_a = c;
    let ring_length = config.ring_length();

    let mut init_send = Vec::with_capacity(p);
    let mut ring_next = Vec::with_capacity(p);
    let mut ring_last = Vec::with_capacity(p);
    for r in 0..p {
        let coord = DeviceCoord::from_global(r, c);
        init_send.push(get_init_send(coord.inter_team, coord.intra_team, d_t, d_a)?);
        let (next, last) = get_p2p_config(coord.inter_team, coord.intra_team, d_t, d_a)?;
        ring_next.push(next);
        ring_last.push(last);
    }
    // Invert the send permutation for the receive sources.
    let mut init_recv = vec![usize::MAX; p];
    for (src, &dst) in init_send.iter().enumerate() {
        if dst >= p || init_recv[dst] != usize::MAX {
            return Err(Error::contract("init send targets are not a permutation"));
        }
        init_recv[dst] = src;
    }

    let teams: Vec<Vec<usize>> = (0..d_t).map(|t| (t * c..(t + 1) * c).collect()).collect();
    let team_groups: Vec<Vec<usize>> = (0..c)
        .map(|g| (g * ring_length..(g + 1) * ring_length).collect())
        .collect();

    Ok(TopologyPlan {
        config: *config,
        init_send,
        init_recv,
        ring_next,
        ring_last,
        teams,
        team_groups,
        ring_length,
    })
}

/// A structural defect found in a plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    InitSendNotPermutation { rank: usize },
    InitRecvNotInverse { rank: usize },
    RingNotDisjointCycles { detail: String },
    RingCycleMixesCoords { rank: usize },
    DuplicateKvShardInRing { ring_start: usize, team: usize },
    ShardMissesTeam { team: usize, group: usize },
    DegenerateRingBroken { detail: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::InitSendNotPermutation { rank } => {
                write!(f, "init_send is not a permutation (collision at rank {rank})")
            }
            Violation::InitRecvNotInverse { rank } => {
                write!(f, "init_recv is not the inverse of init_send at rank {rank}")
            }
            Violation::RingNotDisjointCycles { detail } => {
                write!(f, "ring not a disjoint union of cycles: {detail}")
            }
            Violation::RingCycleMixesCoords { rank } => {
                write!(f, "ring cycle through rank {rank} mixes intra-team ranks or team groups")
            }
            Violation::DuplicateKvShardInRing { ring_start, team } => {
                write!(
                    f,
                    "two teams in the ring through rank {ring_start} hold the kv shard of team {team}"
                )
            }
            Violation::ShardMissesTeam { team, group } => {
                write!(f, "kv shard of team {team} does not visit every team of group {group}")
            }
            Violation::DegenerateRingBroken { detail } => {
                write!(f, "C=1 does not degenerate to a single ring: {detail}")
            }
        }
    }
}

/// Checks every structural invariant of a plan; violations come back as
/// data so injected-fault tests can assert on them.
pub fn validate_plan(plan: &TopologyPlan) -> Vec<Violation> {
    let mut violations = Vec::new();
    let p = plan.world_size();
    let c = plan.config.attn_parallel;
    let ring_len = plan.ring_length;

    // init_send bijectivity and init_recv inversion
    let mut seen = vec![false; p];
    for r in 0..p {
        let dst = plan.init_send[r];
        if dst >= p || seen[dst] {
            violations.push(Violation::InitSendNotPermutation { rank: r });
        } else {
            seen[dst] = true;
        }
    }
    for r in 0..p {
        let dst = plan.init_send[r];
        if dst < p && plan.init_recv[dst] != r {
            violations.push(Violation::InitRecvNotInverse { rank: dst });
        }
    }

    // ring_next must decompose into exactly C^2 cycles of length P/C^2,
    // each with constant intra-team rank and team group.
    let mut visited = vec![false; p];
    let mut cycles = 0usize;
    for start in 0..p {
        if visited[start] {
            continue;
        }
        let mut cur = start;
        let mut len = 0usize;
        let mut ok = true;
        loop {
            if visited[cur] {
                ok = false;
                break;
            }
            visited[cur] = true;
            len += 1;
            if cur % c != start % c || plan.group_of(cur) != plan.group_of(start) {
                violations.push(Violation::RingCycleMixesCoords { rank: cur });
            }
            if plan.ring_next[cur] >= p {
                ok = false;
                break;
            }
            if plan.ring_last[plan.ring_next[cur]] != cur {
                violations.push(Violation::RingNotDisjointCycles {
                    detail: format!("ring_last is not the inverse of ring_next at {}", cur),
                });
            }
            cur = plan.ring_next[cur];
            if cur == start {
                break;
            }
            if len > p {
                ok = false;
                break;
            }
        }
        if !ok {
            violations.push(Violation::RingNotDisjointCycles {
                detail: format!("walk from rank {} does not close into a fresh cycle", start),
            });
            continue;
        }
        cycles += 1;
        if len != ring_len {
            violations.push(Violation::RingNotDisjointCycles {
                detail: format!("cycle through {} has length {} != {}", start, len, ring_len),
            });
        }
    }
    if cycles != c * c && violations.is_empty() {
        violations.push(Violation::RingNotDisjointCycles {
            detail: format!("found {} cycles, expected C^2 = {}", cycles, c * c),
        });
    }

    // Shard circulation: following init_send then ring_next, each team's KV
    // copy must visit every team of its landing group exactly once.
    for team in 0..plan.config.team_count() {
        for member in 0..c {
            let src = DeviceCoord::to_global(team, member, c);
            let landing = plan.init_send[src];
            if landing >= p {
                continue; // already reported
            }
            let group = plan.group_of(landing);
            let mut teams_seen = std::collections::BTreeSet::new();
            let mut cur = landing;
            let mut dup = false;
            for _ in 0..ring_len {
                if !teams_seen.insert(plan.team_of(cur)) {
                    dup = true;
                }
                cur = plan.ring_next[cur];
                if cur >= p {
                    break;
                }
            }
            if dup {
                violations.push(Violation::DuplicateKvShardInRing {
                    ring_start: landing,
                    team,
                });
            } else if teams_seen.len() != ring_len
                || teams_seen.iter().any(|&t| plan.group_of_team(t) != group)
            {
                violations.push(Violation::ShardMissesTeam { team, group });
            }
        }
    }

    // C=1 degeneracy: identity initialization, one full ring.
    if c == 1 {
        for r in 0..p {
            if plan.init_send[r] != r {
                violations.push(Violation::DegenerateRingBroken {
                    detail: format!("init_send[{}] = {} is not identity", r, plan.init_send[r]),
                });
            }
            if plan.ring_next[r] != (r + 1) % p {
                violations.push(Violation::DegenerateRingBroken {
                    detail: format!("ring_next[{}] = {} != {}", r, plan.ring_next[r], (r + 1) % p),
                });
            }
        }
    }

    violations
}

/// All valid attention parallel sizes for a world size: C <= sqrt(P) with
/// C^2 | P.
pub fn valid_attn_parallel_sizes(world_size: usize) -> Vec<usize> {
    (1..=world_size)
        .take_while(|c| c * c <= world_size)
        .filter(|c| world_size % (c * c) == 0 && world_size % c == 0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_send_hand_trace() {
        // g=4; target_team = 2*4 + 5/4 = 9; intra = 5 % 4 = 1; 9*4+1 = 37
        assert_eq!(get_init_send(5, 2, 16, 4).unwrap(), 37);
    }

    #[test]
    fn init_send_identity_for_c1() {
        for r_t in 0..12 {
            assert_eq!(get_init_send(r_t, 0, 12, 1).unwrap(), r_t);
        }
    }

    #[test]
    fn init_send_rank_zero_fixed_point() {
        for (d_t, d_a) in [(16, 4), (8, 2), (4, 2), (12, 1)] {
            assert_eq!(get_init_send(0, 0, d_t, d_a).unwrap(), 0);
        }
    }

    #[test]
    fn init_recv_inverts_send_for_p64_c4() {
        let (d_t, d_a) = (16, 4);
        for r in 0..64 {
            let c = DeviceCoord::from_global(r, d_a);
            let dst = get_init_send(c.inter_team, c.intra_team, d_t, d_a).unwrap();
            let dc = DeviceCoord::from_global(dst, d_a);
            let back = get_init_recv(dc.inter_team, dc.intra_team, d_t, d_a).unwrap();
            assert_eq!(back, r);
        }
    }

    #[test]
    fn init_recv_hand_trace() {
        // inverse of the (5,2) -> 37 trace: device 37 = (r_t=9, r_a=1)
        assert_eq!(get_init_recv(9, 1, 16, 4).unwrap(), 22);
    }

    #[test]
    fn p2p_config_hand_trace() {
        assert_eq!(get_p2p_config(5, 2, 16, 4).unwrap(), (26, 18));
        // wraparound within group 1: last_team = 7 -> rank 30
        let (_, last) = get_p2p_config(4, 2, 16, 4).unwrap();
        assert_eq!(last, 30);
    }

    #[test]
    fn p2p_config_c1_single_ring() {
        let p = 12;
        for r in 0..p {
            let (next, _) = get_p2p_config(r, 0, p, 1).unwrap();
            assert_eq!(next, (r + 1) % p);
        }
    }

    #[test]
    fn build_plan_p4_c2_degenerates_to_self_rings() {
        let cfg = ParallelConfig::new(4, 2, Placement::CollectIntra).unwrap();
        let plan = build_plan(&cfg).unwrap();
        assert_eq!(plan.teams.len(), 2);
        assert_eq!(plan.ring_length, 1);
        for r in 0..4 {
            assert_eq!(plan.ring_next[r], r);
            assert_eq!(plan.ring_last[r], r);
        }
        assert!(validate_plan(&plan).is_empty());
    }

    #[test]
    fn build_plan_p16_c2_shape() {
        let cfg = ParallelConfig::new(16, 2, Placement::CollectIntra).unwrap();
        let plan = build_plan(&cfg).unwrap();
        assert_eq!(plan.teams.len(), 8);
        assert_eq!(plan.ring_length, 4);
        assert_eq!(plan.team_groups.len(), 2);
        assert!(validate_plan(&plan).is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ParallelConfig::new(8, 3, Placement::P2PIntra).is_err());
        assert!(ParallelConfig::new(8, 4, Placement::P2PIntra).is_err()); // C > sqrt(P)
        assert!(ParallelConfig::new(2, 2, Placement::P2PIntra).is_err()); // C^2 does not divide P
    }

    #[test]
    fn injected_ring_fault_is_reported() {
        let cfg = ParallelConfig::new(16, 2, Placement::CollectIntra).unwrap();
        let mut plan = build_plan(&cfg).unwrap();
        let redirect = plan.ring_next[plan.ring_next[0]];
        plan.ring_next[0] = redirect;
        let violations = validate_plan(&plan);
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::RingNotDisjointCycles { .. })));
    }

    #[test]
    fn injected_duplicate_shard_is_reported() {
        let cfg = ParallelConfig::new(16, 2, Placement::CollectIntra).unwrap();
        let mut plan = build_plan(&cfg).unwrap();
        // Make two teams' copies land on ring positions that alias.
        let a = 2; // some device
        let b = plan.init_send.iter().position(|&d| d == plan.ring_next[plan.init_send[a]]).unwrap();
        plan.init_send[b] = plan.init_send[a];
        let violations = validate_plan(&plan);
        assert!(violations
            .iter()
            .any(|v| matches!(
                v,
                Violation::DuplicateKvShardInRing { .. } | Violation::InitSendNotPermutation { .. }
            )));
    }

    #[test]
    fn exhaustive_validation_small_worlds() {
        for p in 1..=64 {
            for c in valid_attn_parallel_sizes(p) {
                let cfg = ParallelConfig::new(p, c, Placement::CollectIntra).unwrap();
                let plan = build_plan(&cfg).unwrap();
                assert!(
                    validate_plan(&plan).is_empty(),
                    "violations for P={} C={}",
                    p,
                    c
                );
            }
        }
    }

    #[test]
    fn valid_sizes_enumeration() {
        assert_eq!(valid_attn_parallel_sizes(64), vec![1, 2, 4, 8]);
        assert_eq!(valid_attn_parallel_sizes(4), vec![1, 2]);
        assert_eq!(valid_attn_parallel_sizes(2), vec![1]);
    }
}
