//! Property suites over topology, sharding and the closed-form model.

use proptest::prelude::*;
use teamring_core::perf::{
    multiring_p2p_time, multiring_p2p_volume_elems, ring_p2p_time, memory_overhead_ratio,
};
use teamring_core::sharding::{causal_workload, split_zigzag};
use teamring_core::topology::{
    build_plan, valid_attn_parallel_sizes, validate_plan, ParallelConfig, Placement,
};

proptest! {
    #[test]
    fn multiring_at_c1_equals_ring(
        b in 1u64..8, n_per in 1u64..512, p in 1u64..64, h in 1u64..64,
        w in 1.0f64..1e6, l in 0.0f64..10.0,
    ) {
        let n = n_per * p;
        let lhs = multiring_p2p_time(b, n, h, p, 1, w, l).unwrap();
        let rhs = ring_p2p_time(b, n, h, p, w, l);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
    }

    #[test]
    fn p2p_volume_inverse_in_c(b in 1u64..8, m in 1u64..1024, h in 1u64..64, c in 1u64..9) {
        let n = m * c;
        let v1 = multiring_p2p_volume_elems(b, n, h, 1).unwrap();
        let vc = multiring_p2p_volume_elems(b, n, h, c).unwrap();
        prop_assert_eq!(vc * c, v1);
    }

    #[test]
    fn latency_term_inverse_square_in_c(
        b in 1u64..4, h in 1u64..32, c in 1u64..5, k in 1u64..5,
    ) {
        let p = c * c * k;
        let n = p * 4;
        let lat_only = |cc: u64| multiring_p2p_time(b, n, h, p, cc, f64::MAX, 1.0).unwrap();
        prop_assert!((lat_only(c) - (p / (c * c)) as f64).abs() < 1e-9);
    }

    #[test]
    fn memory_overhead_decreases_with_depth(y in 1u64..512, c in 1u64..9) {
        prop_assert!(memory_overhead_ratio(y + 1, c) <= memory_overhead_ratio(y, c));
    }

    #[test]
    fn random_valid_plans_pass_all_invariants(p_root in 1usize..8, pick in any::<prop::sample::Index>()) {
        let p = p_root * p_root * 4; // plenty of divisors
        let sizes = valid_attn_parallel_sizes(p);
        let c = sizes[pick.index(sizes.len())];
        let plan = build_plan(&ParallelConfig::new(p, c, Placement::CollectIntra).unwrap()).unwrap();
        prop_assert!(validate_plan(&plan).is_empty());
    }

    #[test]
    fn zigzag_balance_random_shapes(p in 1usize..64, scale in 1usize..8) {
        let n = 2 * p * scale;
        let a = split_zigzag(n, p).unwrap();
        let w = causal_workload(&a, n);
        prop_assert!(w.iter().all(|&x| x == w[0]));
    }

    #[test]
    fn zigzag_partitions_tokens(p in 1usize..32, scale in 1usize..8) {
        let n = 2 * p * scale;
        let a = split_zigzag(n, p).unwrap();
        let mut seen = vec![false; n];
        for d in 0..p {
            for t in a.device_token_ids(d) {
                prop_assert!(!seen[t]);
                seen[t] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }
}
