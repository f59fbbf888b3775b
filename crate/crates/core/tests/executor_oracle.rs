//! Distributed executor vs single-device oracles, across the (P, C) grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use teamring_core::cluster::ClusterSpec;
use teamring_core::exec::{run_backward, run_forward, ExecOptions, Precision, SimInputs};
use teamring_core::tensor::{
    backward_iteration, reference_attention, reference_attention_with_lse, relative_error,
    DenseMatrix, MaskKind,
};
use teamring_core::topology::{ParallelConfig, Placement};

const GRID: &[(usize, usize)] = &[
    (1, 1),
    (4, 1),
    (4, 2),
    (8, 1),
    (8, 2),
    (16, 1),
    (16, 2),
    (16, 4),
];

fn cfg(p: usize, c: usize) -> ParallelConfig {
    ParallelConfig::new(p, c, Placement::CollectIntra).unwrap()
}

#[test]
fn forward_matches_reference_across_grid() {
    let h = 8;
    for &(p, c) in GRID {
        for mask in [MaskKind::Full, MaskKind::Causal] {
            for n in [64usize, 128] {
                let inputs = SimInputs::random(1, n, h, 7);
                let cluster = ClusterSpec::single_node(p);
                let run = run_forward(&cfg(p, c), &cluster, &inputs, mask, &ExecOptions::default())
                    .unwrap();
                let expected =
                    reference_attention(&inputs.q[0], &inputs.k[0], &inputs.v[0], mask, 0, 0, h)
                        .unwrap();
                let err = run.full_output(0).unwrap().linf_distance(&expected);
                assert!(err < 1e-10, "P={} C={} {:?} N={}: err {}", p, c, mask, n, err);
            }
        }
    }
}

#[test]
fn forward_matches_reference_with_batches() {
    let inputs = SimInputs::random(3, 64, 8, 11);
    let cluster = ClusterSpec::single_node(8);
    let run = run_forward(
        &cfg(8, 2),
        &cluster,
        &inputs,
        MaskKind::Causal,
        &ExecOptions::default(),
    )
    .unwrap();
    for b in 0..3 {
        let expected = reference_attention(
            &inputs.q[b],
            &inputs.k[b],
            &inputs.v[b],
            MaskKind::Causal,
            0,
            0,
            8,
        )
        .unwrap();
        assert!(run.full_output(b).unwrap().linf_distance(&expected) < 1e-10);
    }
}

#[test]
fn backward_matches_analytic_oracle_across_grid() {
    let h = 8;
    let n = 64;
    for &(p, c) in GRID {
        for mask in [MaskKind::Full, MaskKind::Causal] {
            let inputs = SimInputs::random(1, n, h, 13);
            let mut rng = ChaCha8Rng::seed_from_u64(14);
            let g = DenseMatrix::random(n, h, &mut rng);
            let cluster = ClusterSpec::single_node(p);
            let run = run_backward(
                &cfg(p, c),
                &cluster,
                &inputs,
                &[g.clone()],
                mask,
                &ExecOptions::default(),
            )
            .unwrap();

            let state =
                reference_attention_with_lse(&inputs.q[0], &inputs.k[0], &inputs.v[0], mask, 0, 0, h)
                    .unwrap();
            let (dq, dk, dv) = backward_iteration(
                &inputs.q[0],
                &inputs.k[0],
                &inputs.v[0],
                &g,
                &state.lse,
                &state.out,
                mask,
                0,
                0,
                h,
            )
            .unwrap();
            for (name, got, want) in [
                ("dq", run.full_dq(0).unwrap(), dq),
                ("dk", run.full_dk(0).unwrap(), dk),
                ("dv", run.full_dv(0).unwrap(), dv),
            ] {
                let err = relative_error(&got, &want);
                assert!(err < 1e-10, "P={} C={} {:?} {}: err {}", p, c, mask, name, err);
            }
        }
    }
}

#[test]
fn placement_does_not_change_results() {
    let inputs = SimInputs::random(1, 64, 8, 23);
    for placement in [Placement::P2PIntra, Placement::CollectIntra] {
        let config = ParallelConfig::new(16, 2, placement).unwrap();
        let cluster = ClusterSpec {
            num_nodes: 4,
            devices_per_node: 4,
            ..ClusterSpec::single_node(16)
        };
        let run = run_forward(&config, &cluster, &inputs, MaskKind::Causal, &ExecOptions::default())
            .unwrap();
        let expected = reference_attention(
            &inputs.q[0],
            &inputs.k[0],
            &inputs.v[0],
            MaskKind::Causal,
            0,
            0,
            8,
        )
        .unwrap();
        assert!(run.full_output(0).unwrap().linf_distance(&expected) < 1e-10);
    }
}

#[test]
fn f32_precision_stays_close_to_f64() {
    let inputs = SimInputs::random(1, 64, 8, 29);
    let cluster = ClusterSpec::single_node(8);
    let opts32 = ExecOptions {
        precision: Precision::F32,
        ..Default::default()
    };
    let r64 = run_forward(&cfg(8, 2), &cluster, &inputs, MaskKind::Full, &ExecOptions::default())
        .unwrap();
    let r32 = run_forward(&cfg(8, 2), &cluster, &inputs, MaskKind::Full, &opts32).unwrap();
    let d = r64
        .full_output(0)
        .unwrap()
        .linf_distance(&r32.full_output(0).unwrap());
    assert!(d > 0.0, "f32 path should actually round");
    assert!(d < 1e-5, "f32 rounding error too large: {}", d);
}

#[test]
fn runs_are_bit_identical_under_fixed_seed() {
    let cluster = ClusterSpec::single_node(16);
    let make = || {
        let inputs = SimInputs::random(2, 64, 8, 31);
        let fwd = run_forward(&cfg(16, 4), &cluster, &inputs, MaskKind::Causal, &ExecOptions::default())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let g: Vec<DenseMatrix> = (0..2).map(|_| DenseMatrix::random(64, 8, &mut rng)).collect();
        let bwd = run_backward(&cfg(16, 4), &cluster, &inputs, &g, MaskKind::Causal, &ExecOptions::default())
            .unwrap();
        (fwd, bwd)
    };
    let (f1, b1) = make();
    let (f2, b2) = make();
    assert_eq!(f1.trace, f2.trace);
    assert_eq!(b1.trace, b2.trace);
    for r in 0..16 {
        assert_eq!(f1.outputs[r], f2.outputs[r]);
        assert_eq!(b1.dq[r], b2.dq[r]);
        assert_eq!(b1.dk[r], b2.dk[r]);
        assert_eq!(b1.dv[r], b2.dv[r]);
    }
}

#[test]
fn invalid_config_is_config_error() {
    let inputs = SimInputs::random(1, 64, 8, 1);
    let err = ParallelConfig::new(8, 3, Placement::CollectIntra).unwrap_err();
    assert!(matches!(err, teamring_core::Error::Config(_)));
    // indivisible sequence
    let bad = run_forward(
        &cfg(16, 2),
        &ClusterSpec::single_node(16),
        &SimInputs::random(1, 40, 8, 1),
        MaskKind::Causal,
        &ExecOptions::default(),
    );
    assert!(matches!(bad, Err(teamring_core::Error::Config(_))));
    drop(inputs);
}
