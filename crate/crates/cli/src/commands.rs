//! Command implementations: verify, trace, estimate, search.

use crate::config::RunConfig;
use crate::report::{gib, kv_block, Format, Sink};
use serde_json::json;
use teamring_core::cluster::ClusterSpec;
use teamring_core::exec::{run_backward, run_forward, ExecOptions, Precision, SimInputs};
use teamring_core::perf::{
    activation_elems, collective_volume_elems, estimate_step_time, memory_overhead_ratio,
    multiring_p2p_volume_elems, ring_p2p_volume_elems, savings_table, ModelSpec,
    DEFAULT_OVERLAP_FRACTION,
};
use teamring_core::scheduler::{enumerate_configs, grid_search, Profiler};
use teamring_core::tensor::{
    backward_iteration, reference_attention, reference_attention_with_lse, relative_error,
    DenseMatrix, MaskKind,
};
use teamring_core::topology::{valid_attn_parallel_sizes, ParallelConfig, Placement};
use teamring_core::Error as CoreError;

/// Command failure, split by exit code: configuration problems exit 2,
/// tolerance or accounting breaches exit 1.
#[derive(Debug)]
pub enum CmdError {
    Config(String),
    Failure(String),
}

impl From<CoreError> for CmdError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => CmdError::Config(e.to_string()),
            other => CmdError::Failure(other.to_string()),
        }
    }
}

impl From<String> for CmdError {
    fn from(s: String) -> Self {
        CmdError::Config(s)
    }
}

const MAX_VERIFY_WORLD: usize = 64;
const MAX_VERIFY_SEQ: usize = 4096;

struct Resolved {
    config: ParallelConfig,
    cluster: ClusterSpec,
    model: ModelSpec,
    mask: MaskKind,
    batch: usize,
    seq_len: usize,
    seed: u64,
    precision: Precision,
}

/// Resolves a concrete execution setup for verify/trace: desk-scale bounds,
/// mandatory seed, concrete attn_parallel (placement defaults to
/// collect_intra — it changes link labeling, never numerics).
fn resolve_exec(cfg: &RunConfig) -> Result<Resolved, CmdError> {
    let run = &cfg.run;
    if run.world_size > MAX_VERIFY_WORLD {
        return Err(CmdError::Config(format!(
            "world_size {} exceeds the desk-scale bound {}",
            run.world_size, MAX_VERIFY_WORLD
        )));
    }
    if run.seq_len > MAX_VERIFY_SEQ {
        return Err(CmdError::Config(format!(
            "seq_len {} exceeds the desk-scale bound {}",
            run.seq_len, MAX_VERIFY_SEQ
        )));
    }
    let seed = run
        .seed
        .ok_or_else(|| CmdError::Config("run.seed is required for verify/trace".into()))?;
    let c = run
        .attn_parallel()?
        .ok_or_else(|| CmdError::Config("run.attn_parallel must be concrete (not \"auto\") here".into()))?;
    let placement = run.placement()?.unwrap_or(Placement::CollectIntra);
    let config = ParallelConfig::new(run.world_size, c, placement)?;
    let model = cfg.model.to_model_spec();
    model.validate()?;
    Ok(Resolved {
        config,
        cluster: cfg.cluster.to_cluster_spec(),
        model,
        mask: run.mask()?,
        batch: run.batch,
        seq_len: run.seq_len,
        seed,
        precision: run.precision()?,
    })
}

struct Check {
    name: String,
    value: f64,
    tol: f64,
    pass: bool,
}

fn check(name: impl Into<String>, value: f64, tol: f64) -> Check {
    let name = name.into();
    Check {
        pass: value < tol,
        name,
        value,
        tol,
    }
}

fn emit_checks(sink: &Sink, name: &str, format: Format, checks: &[Check]) -> Result<(), CmdError> {
    let body = match format {
        Format::Json => {
            let rows: Vec<_> = checks
                .iter()
                .map(|c| json!({"check": c.name, "value": c.value, "tol": c.tol, "pass": c.pass}))
                .collect();
            format!("{}\n", serde_json::to_string_pretty(&rows).unwrap())
        }
        Format::Csv => {
            let mut s = String::from("check,value,tol,pass\n");
            for c in checks {
                s.push_str(&format!("{},{:e},{:e},{}\n", c.name, c.value, c.tol, c.pass));
            }
            s
        }
        Format::Text => checks
            .iter()
            .map(|c| {
                format!(
                    "{} {:.3e} (tol {:.0e}): {}\n",
                    c.name,
                    c.value,
                    c.tol,
                    if c.pass { "PASS" } else { "FAIL" }
                )
            })
            .collect(),
    };
    sink.write(name, format, &body).map_err(CmdError::Config)
}

/// Runs forward + backward at desk scale and compares against the
/// single-device oracles.
pub fn cmd_verify(cfg: &RunConfig, sink: &Sink, format: Format) -> Result<(), CmdError> {
    let r = resolve_exec(cfg)?;
    // simulate one attention head; verify is about numerics, not volume
    let width = r.model.head_dim();
    let inputs = SimInputs::random(r.batch, r.seq_len, width, r.seed);
    let opts = ExecOptions {
        precision: r.precision,
        ..Default::default()
    };
    let (fwd_tol, bwd_tol) = match r.precision {
        Precision::F64 => (1e-10, 1e-8),
        Precision::F32 => (1e-4, 5e-3),
    };

    let fwd = run_forward(&r.config, &r.cluster, &inputs, r.mask, &opts)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(r.seed ^ 0x5eed);
    let grads: Vec<DenseMatrix> = (0..r.batch)
        .map(|_| DenseMatrix::random(r.seq_len, width, &mut rng))
        .collect();
    let bwd = run_backward(&r.config, &r.cluster, &inputs, &grads, r.mask, &opts)?;

    let mut checks = Vec::new();
    for b in 0..r.batch {
        let expected =
            reference_attention(&inputs.q[b], &inputs.k[b], &inputs.v[b], r.mask, 0, 0, width)?;
        checks.push(check(
            format!("forward[batch {}] max_abs_err", b),
            fwd.full_output(b)?.linf_distance(&expected),
            fwd_tol,
        ));
        let state = reference_attention_with_lse(
            &inputs.q[b],
            &inputs.k[b],
            &inputs.v[b],
            r.mask,
            0,
            0,
            width,
        )?;
        let (dq, dk, dv) = backward_iteration(
            &inputs.q[b],
            &inputs.k[b],
            &inputs.v[b],
            &grads[b],
            &state.lse,
            &state.out,
            r.mask,
            0,
            0,
            width,
        )?;
        for (n, got, want) in [
            ("dq", bwd.full_dq(b)?, dq),
            ("dk", bwd.full_dk(b)?, dk),
            ("dv", bwd.full_dv(b)?, dv),
        ] {
            checks.push(check(
                format!("backward[batch {}] {} max_rel_err", b, n),
                relative_error(&got, &want),
                bwd_tol,
            ));
        }
    }

    emit_checks(sink, "verify", format, &checks)?;
    if let Some(bad) = checks.iter().find(|c| !c.pass) {
        return Err(CmdError::Failure(format!(
            "verification failed: {} = {:e} (tol {:e})",
            bad.name, bad.value, bad.tol
        )));
    }
    Ok(())
}

/// Executes the forward pass, exports the event log, and asserts the
/// closed-form volume identities on the measured trace. With the analytic
/// profiler no execution happens; the closed forms themselves are printed
/// (usable at paper scale).
pub fn cmd_trace(
    cfg: &RunConfig,
    sink: &Sink,
    format: Format,
    profiler: Profiler,
) -> Result<(), CmdError> {
    let run = &cfg.run;
    let model = cfg.model.to_model_spec();
    model.validate()?;
    let c = run
        .attn_parallel()?
        .ok_or_else(|| CmdError::Config("run.attn_parallel must be concrete (not \"auto\") here".into()))?;
    let (b, n, h) = (run.batch as u64, run.seq_len as u64, model.hidden as u64);
    let p = run.world_size as u64;

    if profiler == Profiler::Analytic {
        let ring = ring_p2p_volume_elems(b, n, h) * model.dtype_bytes;
        let coll = collective_volume_elems(b, n, h, p, c as u64)? * model.dtype_bytes;
        let p2p = multiring_p2p_volume_elems(b, n, h, c as u64)? * model.dtype_bytes;
        let rows = vec![
            ("ring_p2p_bytes_per_device".to_string(), format!("{} ({:.3} GiB)", ring, gib(ring))),
            ("collective_bytes_per_device".to_string(), format!("{} ({:.3} GiB)", coll, gib(coll))),
            ("multiring_p2p_bytes_per_device".to_string(), format!("{} ({:.3} GiB)", p2p, gib(p2p))),
        ];
        let body = match format {
            Format::Json => format!(
                "{}\n",
                serde_json::to_string_pretty(&json!({
                    "mode": "analytic",
                    "ring_p2p_bytes_per_device": ring,
                    "collective_bytes_per_device": coll,
                    "multiring_p2p_bytes_per_device": p2p,
                }))
                .unwrap()
            ),
            Format::Csv => {
                let mut s = String::from("quantity,bytes_per_device,gib\n");
                for (k, _) in &rows {
                    let v = match k.as_str() {
                        "ring_p2p_bytes_per_device" => ring,
                        "collective_bytes_per_device" => coll,
                        _ => p2p,
                    };
                    s.push_str(&format!("{},{},{:.6}\n", k, v, gib(v)));
                }
                s
            }
            Format::Text => kv_block(&rows),
        };
        return sink.write("trace", format, &body).map_err(CmdError::Config);
    }

    // measured: execute at desk scale with one head of width H/heads, then
    // scale payloads by the head count so volumes carry the full hidden dim
    let r = resolve_exec(cfg)?;
    let width = r.model.head_dim();
    let inputs = SimInputs::random(r.batch, r.seq_len, width, r.seed);
    let opts = ExecOptions {
        precision: r.precision,
        ..Default::default()
    };
    let mut fwd = run_forward(&r.config, &r.cluster, &inputs, r.mask, &opts)?;
    let heads = r.model.heads as u64;
    for e in fwd.trace.events.iter_mut() {
        e.payload_elems *= heads;
        e.payload_bytes *= heads;
    }
    let summary = fwd.trace.summary();

    let expect_p2p = multiring_p2p_volume_elems(b, n, h, c as u64)?;
    let expect_coll = collective_volume_elems(b, n, h, p, c as u64)?;
    let p2p_exact = summary.per_device_p2p_elems.iter().all(|&e| e == expect_p2p);
    let coll_exact = summary
        .per_device_collective_elems
        .iter()
        .all(|&e| e == expect_coll);
    let verdict = |ok: bool| if ok { "EXACT" } else { "MISMATCH" };

    let body = match format {
        Format::Json => format!(
            "{}\n",
            serde_json::to_string_pretty(&json!({
                "mode": "measured",
                "events": fwd.trace.events,
                "summary": summary,
                "checks": {
                    "p2p_per_device_elems = 2BNH/C": verdict(p2p_exact),
                    "collective_per_device_elems = 4BNH(C-1)/P": verdict(coll_exact),
                },
            }))
            .unwrap()
        ),
        Format::Csv => {
            let mut s = String::from("kind,src,dst,payload_elems,payload_bytes,step,crosses_node\n");
            for e in &fwd.trace.events {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    e.kind, e.src, e.dst, e.payload_elems, e.payload_bytes, e.step, e.crosses_node
                ));
            }
            s.push_str(&format!("# p2p_per_device_elems = 2BNH/C: {}\n", verdict(p2p_exact)));
            s.push_str(&format!(
                "# collective_per_device_elems = 4BNH(C-1)/P: {}\n",
                verdict(coll_exact)
            ));
            s
        }
        Format::Text => {
            let mut s = String::new();
            for e in &fwd.trace.events {
                s.push_str(&format!(
                    "{} {} {} {} {} {} {}\n",
                    e.kind, e.src, e.dst, e.payload_elems, e.payload_bytes, e.step, e.crosses_node
                ));
            }
            s.push_str(&format!("p2p_per_device_elems = 2BNH/C: {}\n", verdict(p2p_exact)));
            if c == 1 {
                s.push_str("collective_elems = 0\n");
            }
            s.push_str(&format!(
                "collective_per_device_elems = 4BNH(C-1)/P: {}\n",
                verdict(coll_exact)
            ));
            s
        }
    };
    sink.write("trace", format, &body).map_err(CmdError::Config)?;
    if !p2p_exact || !coll_exact {
        return Err(CmdError::Failure("trace volumes do not match the closed forms".into()));
    }
    Ok(())
}

/// Emits cost reports for the given (or all valid) C values, the savings
/// table, and the memory-overhead column.
pub fn cmd_estimate(cfg: &RunConfig, sink: &Sink, format: Format) -> Result<(), CmdError> {
    let run = &cfg.run;
    let model = cfg.model.to_model_spec();
    model.validate()?;
    let cluster = cfg.cluster.to_cluster_spec();
    let mask = run.mask()?;
    let (b, n, h) = (run.batch as u64, run.seq_len as u64, model.hidden as u64);
    let p = run.world_size;

    let wanted_c = run.attn_parallel()?;
    let wanted_placement = run.placement()?;
    let mut reports = Vec::new();
    for c in valid_attn_parallel_sizes(p) {
        if wanted_c.is_some_and(|w| w != c) {
            continue;
        }
        for placement in [Placement::P2PIntra, Placement::CollectIntra] {
            if wanted_placement.is_some_and(|w| w != placement) {
                continue;
            }
            let config = ParallelConfig::new(p, c, placement)?;
            match estimate_step_time(&config, &cluster, &model, b, n, mask, DEFAULT_OVERLAP_FRACTION)
            {
                Ok(rep) => reports.push(rep),
                Err(CoreError::Config(_)) => continue, // infeasible placement
                Err(e) => return Err(e.into()),
            }
        }
    }
    if reports.is_empty() {
        return Err(CmdError::Config("no feasible configuration to estimate".into()));
    }

    let cs: Vec<u64> = valid_attn_parallel_sizes(p)
        .into_iter()
        .map(|c| c as u64)
        .filter(|&c| n % c == 0)
        .collect();
    let sweep: Vec<u64> = (0..4).map(|i| n << i).collect();
    let savings = savings_table(b, h, &sweep, &cs)?;
    let overhead: Vec<(u64, f64)> = cs
        .iter()
        .map(|&c| (c, 100.0 * memory_overhead_ratio(model.layers as u64, c)))
        .collect();
    let a = activation_elems(b, n, h, p as u64)?;

    let body = match format {
        Format::Json => format!(
            "{}\n",
            serde_json::to_string_pretty(&json!({
                "activation_elems": a,
                "reports": reports,
                "savings": savings,
                "memory_overhead_pct": overhead.iter().map(|(c, o)| json!({"c": c, "overhead_pct": o})).collect::<Vec<_>>(),
            }))
            .unwrap()
        ),
        Format::Csv => {
            let mut s = String::from(
                "c,placement,p2p_gib,collective_gib,latency_s,peak_memory_gib,step_s,tokens_per_s,savings_pct,mem_overhead_pct\n",
            );
            for r in &reports {
                let sav = 100.0 * (1.0 - 1.0 / r.attn_parallel as f64);
                let ovh = 100.0 * memory_overhead_ratio(model.layers as u64, r.attn_parallel as u64);
                s.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6e},{:.6},{:.6e},{:.3},{:.1},{:.1}\n",
                    r.attn_parallel,
                    r.placement,
                    gib(r.p2p_volume_bytes),
                    gib(r.collective_volume_bytes),
                    r.latency_term_s,
                    gib(r.peak_memory_bytes),
                    r.est_step_time_s,
                    r.est_throughput_tokens_per_s,
                    sav,
                    ovh,
                ));
            }
            s
        }
        Format::Text => {
            let mut s = String::new();
            s.push_str(&format!("activation elements A = {}\n\n", a));
            s.push_str("c  placement      p2p_gib  coll_gib  step_s      tokens_per_s  savings  mem_overhead\n");
            for r in &reports {
                let sav = 100.0 * (1.0 - 1.0 / r.attn_parallel as f64);
                let ovh = 100.0 * memory_overhead_ratio(model.layers as u64, r.attn_parallel as u64);
                s.push_str(&format!(
                    "{:<2} {:<13} {:>8.3} {:>9.3} {:>11.4e} {:>13.1} {:>6.1}% {:>11.1}%\n",
                    r.attn_parallel,
                    r.placement.to_string(),
                    gib(r.p2p_volume_bytes),
                    gib(r.collective_volume_bytes),
                    r.est_step_time_s,
                    r.est_throughput_tokens_per_s,
                    sav,
                    ovh,
                ));
            }
            s.push_str("\nsavings sweep (per-device P2P volume, elements)\n");
            for row in &savings {
                s.push_str(&format!("N={}", row.seq_len));
                for (c, vol, pct) in &row.per_c {
                    s.push_str(&format!("  C={}: {} ({:.1}%)", c, vol, pct));
                }
                s.push('\n');
            }
            s
        }
    };
    sink.write("estimate", format, &body).map_err(CmdError::Config)
}

/// Runs the grid search and prints the ranked table plus the chosen config.
pub fn cmd_search(
    cfg: &RunConfig,
    sink: &Sink,
    format: Format,
    profiler: Profiler,
) -> Result<(), CmdError> {
    let run = &cfg.run;
    if run.attn_parallel()?.is_some() || run.placement()?.is_some() {
        return Err(CmdError::Config(
            "search requires run.attn_parallel and run.placement set to \"auto\"".into(),
        ));
    }
    let model = cfg.model.to_model_spec();
    model.validate()?;
    let cluster = cfg.cluster.to_cluster_spec();
    let space = enumerate_configs(run.world_size, &cluster)?;
    let result = grid_search(
        run.world_size,
        &cluster,
        &model,
        run.batch as u64,
        run.seq_len as u64,
        run.mask()?,
        profiler,
    )?;

    let body = match format {
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&json!(result)).unwrap()),
        Format::Csv => {
            let mut s = String::from("rank,c,placement,tokens_per_s,step_s,p2p_gib,collective_gib,peak_memory_gib\n");
            for (i, e) in result.table.iter().enumerate() {
                s.push_str(&format!(
                    "{},{},{},{:.3},{:.6e},{:.6},{:.6},{:.6}\n",
                    i + 1,
                    e.report.attn_parallel,
                    e.report.placement,
                    e.throughput_tokens_per_s,
                    e.report.est_step_time_s,
                    gib(e.report.p2p_volume_bytes),
                    gib(e.report.collective_volume_bytes),
                    gib(e.report.peak_memory_bytes),
                ));
            }
            s
        }
        Format::Text => {
            let mut s = String::new();
            s.push_str("rank c  placement      tokens_per_s  step_s\n");
            for (i, e) in result.table.iter().enumerate() {
                s.push_str(&format!(
                    "{:<4} {:<2} {:<13} {:>12.1} {:>11.4e}\n",
                    i + 1,
                    e.report.attn_parallel,
                    e.report.placement.to_string(),
                    e.throughput_tokens_per_s,
                    e.report.est_step_time_s,
                ));
            }
            for cand in space.candidates.iter().filter(|c| !c.feasible) {
                s.push_str(&format!(
                    "skipped C={} {}: {}\n",
                    cand.attn_parallel,
                    cand.placement,
                    cand.reason.as_deref().unwrap_or("infeasible")
                ));
            }
            s.push_str(&format!(
                "\nchosen: C={} placement={}\n",
                result.best.attn_parallel, result.best.placement
            ));
            s
        }
    };
    sink.write("search", format, &body).map_err(CmdError::Config)
}
