//! Deterministic message-passing executor.
//!
//! Each simulated device walks the same phase schedule: team all-gather of
//! Q/K/V, initial shuffle of the team-gathered K/V to its sub-ring seat,
//! `P/C^2` ring iterations of blockwise attention, and an lse-weighted
//! reduce-scatter back to the owning shards. Messages move through a
//! step-tagged board; a receive with no matching send is a protocol error,
//! and the harness asserts quiescence at the end of every run. C=1 drives
//! the plain ring-attention baseline through the identical code path.
//!
//! Accounting convention: the initial shuffle is logged even when a block
//! stays on its own device (src == dst), so per-device P2P-class volume is
//! exactly `ring_length` messages of `2*C*B*N*H/P` elements — the closed
//! forms the analytic model reproduces. A single-device world short-circuits
//! to local compute with an empty trace.

use crate::cluster::{node_map, ClusterSpec};
use crate::error::{Error, Result};
use crate::sharding::{assignment_for_mask, split_naive, split_zigzag, ShardAssignment};
use crate::tensor::{
    backward_iteration_indexed, forward_iteration_indexed, AttnState, DenseMatrix, MaskKind,
};
use crate::topology::{build_plan, ParallelConfig, TopologyPlan};
use crate::trace::{CommEvent, CommTrace, EventKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Compute precision for the forward iteration path. F32 rounds every
/// merged state through f32 for tolerance experiments; accounting is
/// unaffected (wire width comes from `ClusterSpec::dtype_bytes`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShardScheme {
    Naive,
    Zigzag,
}

#[derive(Debug, Clone, Copy)]
pub struct ExecOptions {
    /// Log the never-consumed final-iteration ring send.
    pub final_send: bool,
    pub precision: Precision,
    /// Overrides the mask-driven dataloader choice.
    pub shard: Option<ShardScheme>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            final_send: false,
            precision: Precision::F64,
            shard: None,
        }
    }
}

/// Full-sequence Q/K/V inputs, one matrix triple per batch element.
#[derive(Debug, Clone)]
pub struct SimInputs {
    pub q: Vec<DenseMatrix>,
    pub k: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
}

impl SimInputs {
    /// Seeded uniform inputs in [-1, 1); identical seeds give bit-identical
    /// tensors on every platform.
    pub fn random(batch: usize, n_tokens: usize, hidden: usize, seed: u64) -> SimInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = || {
            (0..batch)
                .map(|_| DenseMatrix::random(n_tokens, hidden, &mut rng))
                .collect::<Vec<_>>()
        };
        SimInputs {
            q: gen(),
            k: gen(),
            v: gen(),
        }
    }

    pub fn batch(&self) -> usize {
        self.q.len()
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        if self.q.is_empty() || self.q.len() != self.k.len() || self.q.len() != self.v.len() {
            return Err(Error::contract("batch sizes of q/k/v differ or are zero"));
        }
        let (n, h) = (self.q[0].rows(), self.q[0].cols());
        for m in self.q.iter().chain(&self.k).chain(&self.v) {
            if m.rows() != n || m.cols() != h {
                return Err(Error::contract("all q/k/v tensors must share one shape"));
            }
        }
        Ok((n, h))
    }
}

/// A device-local result slice with its global token ids (chunk order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceShard {
    pub device: usize,
    pub token_ids: Vec<usize>,
    /// One matrix per batch element, rows aligned with `token_ids`.
    pub per_batch: Vec<DenseMatrix>,
}

/// Reassembles per-device shards into the full N x H matrix for one batch
/// element, de-zigzagging by global token id.
pub fn assemble_full(shards: &[DeviceShard], batch: usize, n_tokens: usize) -> Result<DenseMatrix> {
    let cols = shards
        .first()
        .and_then(|s| s.per_batch.get(batch))
        .map(|m| m.cols())
        .ok_or_else(|| Error::contract("no shards to assemble"))?;
    let mut full = DenseMatrix::zeros(n_tokens, cols);
    let mut seen = vec![false; n_tokens];
    for s in shards {
        let m = &s.per_batch[batch];
        for (row, &t) in s.token_ids.iter().enumerate() {
            if t >= n_tokens || seen[t] {
                return Err(Error::contract(format!("token {} duplicated or out of range", t)));
            }
            seen[t] = true;
            full.row_mut(t).copy_from_slice(m.row(row));
        }
    }
    if !seen.iter().all(|&b| b) {
        return Err(Error::contract("assembled shards do not cover the sequence"));
    }
    Ok(full)
}

#[derive(Debug)]
pub struct ForwardRun {
    pub outputs: Vec<DeviceShard>,
    pub trace: CommTrace,
    pub assignment: ShardAssignment,
}

impl ForwardRun {
    pub fn full_output(&self, batch: usize) -> Result<DenseMatrix> {
        assemble_full(&self.outputs, batch, self.assignment.total_tokens)
    }
}

#[derive(Debug)]
pub struct BackwardRun {
    pub dq: Vec<DeviceShard>,
    pub dk: Vec<DeviceShard>,
    pub dv: Vec<DeviceShard>,
    pub trace: CommTrace,
    pub assignment: ShardAssignment,
}

impl BackwardRun {
    pub fn full_dq(&self, batch: usize) -> Result<DenseMatrix> {
        assemble_full(&self.dq, batch, self.assignment.total_tokens)
    }
    pub fn full_dk(&self, batch: usize) -> Result<DenseMatrix> {
        assemble_full(&self.dk, batch, self.assignment.total_tokens)
    }
    pub fn full_dv(&self, batch: usize) -> Result<DenseMatrix> {
        assemble_full(&self.dv, batch, self.assignment.total_tokens)
    }
}

// ---------------------------------------------------------------------------
// message board

type MsgKey = (EventKind, usize, usize, usize); // kind, src, dst, step

struct Board<T> {
    msgs: HashMap<MsgKey, T>,
}

impl<T> Board<T> {
    fn new() -> Self {
        Board {
            msgs: HashMap::new(),
        }
    }

    fn post(&mut self, kind: EventKind, src: usize, dst: usize, step: usize, payload: T) -> Result<()> {
        if self.msgs.insert((kind, src, dst, step), payload).is_some() {
            return Err(Error::protocol(format!(
                "duplicate send {kind} {src}->{dst} at step {step}"
            )));
        }
        Ok(())
    }

    fn take(&mut self, kind: EventKind, src: usize, dst: usize, step: usize) -> Result<T> {
        self.msgs.remove(&(kind, src, dst, step)).ok_or_else(|| {
            Error::protocol(format!(
                "deadlock: receive {kind} {src}->{dst} at step {step} has no matching send"
            ))
        })
    }

    fn assert_quiescent(&self) -> Result<()> {
        if !self.msgs.is_empty() {
            return Err(Error::protocol(format!(
                "{} unconsumed messages at end of run",
                self.msgs.len()
            )));
        }
        Ok(())
    }
}

/// Event log that can be switched off (single-device runs, repeat batches).
struct Recorder<'a> {
    events: Vec<CommEvent>,
    enabled: bool,
    dtype_bytes: u64,
    nodes: &'a [usize],
}

impl<'a> Recorder<'a> {
    fn emit(&mut self, kind: EventKind, src: usize, dst: usize, elems: u64, step: usize) {
        if !self.enabled {
            return;
        }
        self.events.push(CommEvent {
            kind,
            src,
            dst,
            payload_elems: elems,
            payload_bytes: elems * self.dtype_bytes,
            step,
            crosses_node: self.nodes[src] != self.nodes[dst],
        });
    }
}

// ---------------------------------------------------------------------------
// collective primitives

/// Ring all-gather inside one team: C-1 substeps, each member forwarding
/// one per-member block to its successor. Total received per device is
/// (C-1) * payload.
pub fn simulate_all_gather(
    team: &[usize],
    payload_elems_per_member: u64,
    dtype_bytes: u64,
    nodes: &[usize],
) -> Vec<CommEvent> {
    let c = team.len();
    let mut events = Vec::new();
    for step in 0..c.saturating_sub(1) {
        for (m, &src) in team.iter().enumerate() {
            let dst = team[(m + 1) % c];
            events.push(CommEvent {
                kind: EventKind::AllGather,
                src,
                dst,
                payload_elems: payload_elems_per_member,
                payload_bytes: payload_elems_per_member * dtype_bytes,
                step,
                crosses_node: nodes[src] != nodes[dst],
            });
        }
    }
    events
}

fn reduce_scatter_events(
    team: &[usize],
    slice_elems: u64,
    dtype_bytes: u64,
    nodes: &[usize],
) -> Vec<CommEvent> {
    let c = team.len();
    let mut events = Vec::new();
    for step in 0..c.saturating_sub(1) {
        for (m, &src) in team.iter().enumerate() {
            let dst = team[(m + 1) % c];
            events.push(CommEvent {
                kind: EventKind::ReduceScatter,
                src,
                dst,
                payload_elems: slice_elems,
                payload_bytes: slice_elems * dtype_bytes,
                step,
                crosses_node: nodes[src] != nodes[dst],
            });
        }
    }
    events
}

/// Reduce-scatter with the lse-weighted online-softmax combine: the members'
/// partial states (over disjoint key subsets) are merged, then each member
/// keeps its 1/C row slice. Returns the kept slices in member order plus
/// the ring reduce-scatter events.
pub fn simulate_reduce_scatter(
    team: &[usize],
    states: &[AttnState],
    dtype_bytes: u64,
    nodes: &[usize],
) -> Result<(Vec<AttnState>, Vec<CommEvent>)> {
    let c = team.len();
    if states.len() != c || c == 0 {
        return Err(Error::contract("one state per team member required"));
    }
    let rows = states[0].rows();
    if rows % c != 0 {
        return Err(Error::contract("state rows must divide by team size"));
    }
    let mut merged = states[0].clone();
    for s in &states[1..] {
        merged = merged.merge(s)?;
    }
    let per = rows / c;
    let cols = merged.out.cols();
    let slices = (0..c)
        .map(|m| {
            let row_ids: Vec<usize> = (m * per..(m + 1) * per).collect();
            AttnState {
                out: merged.out.select_rows(&row_ids),
                lse: row_ids.iter().map(|&i| merged.lse[i]).collect(),
            }
        })
        .collect();
    let events = reduce_scatter_events(team, (per * cols) as u64, dtype_bytes, nodes);
    Ok((slices, events))
}

// ---------------------------------------------------------------------------
// forward

#[derive(Clone)]
struct KvBlock {
    k: DenseMatrix,
    v: DenseMatrix,
    ids: Vec<usize>,
}

/// Intermediate state the backward pass needs from the forward schedule.
struct ForwardCapture {
    q_team: Vec<DenseMatrix>,
    ids_team: Vec<Vec<usize>>,
    home_kv: Vec<KvBlock>,
    merged: Vec<AttnState>,
}

fn pick_assignment(
    mask: MaskKind,
    n: usize,
    p: usize,
    opts: &ExecOptions,
) -> Result<ShardAssignment> {
    match opts.shard {
        Some(ShardScheme::Naive) => split_naive(n, p),
        Some(ShardScheme::Zigzag) => split_zigzag(n, p),
        None => assignment_for_mask(mask, n, p),
    }
}

#[allow(clippy::too_many_arguments)]
fn forward_single(
    plan: &TopologyPlan,
    assignment: &ShardAssignment,
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    mask: MaskKind,
    opts: &ExecOptions,
    rec: &mut Recorder<'_>,
    mut capture: Option<&mut ForwardCapture>,
) -> Result<Vec<DenseMatrix>> {
    let p = plan.world_size();
    let c = plan.config.attn_parallel;
    let rlen = plan.ring_length;
    let h = q.cols();
    let n_per = assignment.tokens_per_device();

    // local shards
    let dev_ids: Vec<Vec<usize>> = (0..p).map(|r| assignment.device_token_ids(r)).collect();

    // team gather of q/k/v (member order), Alg-style all-gather
    let team_count = plan.teams.len();
    let mut q_team = Vec::with_capacity(team_count);
    let mut k_team = Vec::with_capacity(team_count);
    let mut v_team = Vec::with_capacity(team_count);
    let mut ids_team = Vec::with_capacity(team_count);
    for team in &plan.teams {
        let qs: Vec<DenseMatrix> = team.iter().map(|&r| q.select_rows(&dev_ids[r])).collect();
        let ks: Vec<DenseMatrix> = team.iter().map(|&r| k.select_rows(&dev_ids[r])).collect();
        let vs: Vec<DenseMatrix> = team.iter().map(|&r| v.select_rows(&dev_ids[r])).collect();
        q_team.push(DenseMatrix::vstack(&qs.iter().collect::<Vec<_>>())?);
        k_team.push(DenseMatrix::vstack(&ks.iter().collect::<Vec<_>>())?);
        v_team.push(DenseMatrix::vstack(&vs.iter().collect::<Vec<_>>())?);
        ids_team.push(
            team.iter()
                .flat_map(|&r| dev_ids[r].iter().copied())
                .collect::<Vec<usize>>(),
        );
        if c > 1 && rec.enabled {
            let evs = simulate_all_gather(team, (3 * n_per * h) as u64, rec.dtype_bytes, rec.nodes);
            rec.events.extend(evs);
        }
    }

    // initial shuffle of team K/V to ring seats; logged even for src == dst
    let mut board: Board<KvBlock> = Board::new();
    let kv_elems = (2 * c * n_per * h) as u64;
    for r in 0..p {
        let t = plan.team_of(r);
        let block = KvBlock {
            k: k_team[t].clone(),
            v: v_team[t].clone(),
            ids: ids_team[t].clone(),
        };
        board.post(EventKind::InitShuffle, r, plan.init_send[r], 0, block)?;
        rec.emit(EventKind::InitShuffle, r, plan.init_send[r], kv_elems, 0);
    }

    // ring iterations
    let mut states: Vec<AttnState> = (0..p).map(|_| AttnState::initial(c * n_per, h)).collect();
    let mut current: Vec<Option<KvBlock>> = vec![None; p];
    for i in 0..rlen {
        for r in 0..p {
            let block = if i == 0 {
                board.take(EventKind::InitShuffle, plan.init_recv[r], r, 0)?
            } else {
                board.take(EventKind::P2P, plan.ring_last[r], r, i)?
            };
            current[r] = Some(block);
        }
        for r in 0..p {
            let block = current[r].as_ref().unwrap();
            if i + 1 < rlen {
                board.post(EventKind::P2P, r, plan.ring_next[r], i + 1, block.clone())?;
                rec.emit(EventKind::P2P, r, plan.ring_next[r], kv_elems, i + 1);
            } else if opts.final_send {
                // wasted final send: counted, never consumed
                rec.emit(EventKind::P2P, r, plan.ring_next[r], kv_elems, i + 1);
            }
        }
        for r in 0..p {
            let block = current[r].take().unwrap();
            let t = plan.team_of(r);
            let mut next = forward_iteration_indexed(
                &states[r],
                &q_team[t],
                &block.k,
                &block.v,
                mask,
                &ids_team[t],
                &block.ids,
                h,
            )?;
            if opts.precision == Precision::F32 {
                next.round_to_f32();
            }
            states[r] = next;
            if i == 0 {
                if let Some(cap) = capture.as_deref_mut() {
                    cap.home_kv[r] = block;
                }
            }
        }
    }
    board.assert_quiescent()?;

    // lse-weighted reduce-scatter per team
    let mut outputs: Vec<DenseMatrix> = vec![DenseMatrix::zeros(0, 0); p];
    let mut merged_states: Vec<AttnState> = Vec::with_capacity(team_count);
    for team in plan.teams.iter() {
        let member_states: Vec<AttnState> = team.iter().map(|&r| states[r].clone()).collect();
        let (slices, events) =
            simulate_reduce_scatter(team, &member_states, rec.dtype_bytes, rec.nodes)?;
        if c > 1 && rec.enabled {
            rec.events.extend(events);
        }
        // merged full state for the capture (backward needs full-row stats)
        let mut merged = member_states[0].clone();
        for s in &member_states[1..] {
            merged = merged.merge(s)?;
        }
        if opts.precision == Precision::F32 {
            merged.round_to_f32();
        }
        for (m, &r) in team.iter().enumerate() {
            let mut out = slices[m].out.clone();
            if opts.precision == Precision::F32 {
                out.round_to_f32();
            }
            outputs[r] = out;
        }
        merged_states.push(merged);
    }

    if let Some(cap) = capture.as_deref_mut() {
        cap.q_team = q_team;
        cap.ids_team = ids_team;
        cap.merged = merged_states;
    }
    Ok(outputs)
}

fn prepare(
    config: &ParallelConfig,
    cluster: &ClusterSpec,
    inputs: &SimInputs,
    mask: MaskKind,
    opts: &ExecOptions,
) -> Result<(TopologyPlan, Vec<usize>, ShardAssignment, usize, usize)> {
    config.validate()?;
    cluster.validate(config.world_size)?;
    let (n, h) = inputs.dims()?;
    let plan = build_plan(config)?;
    let nodes = node_map(&plan, cluster)?;
    let assignment = pick_assignment(mask, n, config.world_size, opts)?;
    Ok((plan, nodes, assignment, n, h))
}

fn scale_events(events: &mut [CommEvent], batch: u64) {
    for e in events.iter_mut() {
        e.payload_elems *= batch;
        e.payload_bytes *= batch;
    }
}

/// Runs the distributed forward pass for every batch element, returning
/// per-device output shards and the communication trace. Payload sizes in
/// the trace carry the full batch.
pub fn run_forward(
    config: &ParallelConfig,
    cluster: &ClusterSpec,
    inputs: &SimInputs,
    mask: MaskKind,
    opts: &ExecOptions,
) -> Result<ForwardRun> {
    let (plan, nodes, assignment, n, _h) = prepare(config, cluster, inputs, mask, opts)?;
    let p = config.world_size;
    let batch = inputs.batch();

    let mut trace = CommTrace::new(p);
    let mut outputs: Vec<DeviceShard> = (0..p)
        .map(|r| DeviceShard {
            device: r,
            token_ids: assignment.device_token_ids(r),
            per_batch: Vec::with_capacity(batch),
        })
        .collect();

    for b in 0..batch {
        let mut rec = Recorder {
            events: Vec::new(),
            enabled: b == 0 && p > 1,
            dtype_bytes: cluster.dtype_bytes,
            nodes: &nodes,
        };
        let outs = forward_single(
            &plan,
            &assignment,
            &inputs.q[b],
            &inputs.k[b],
            &inputs.v[b],
            mask,
            opts,
            &mut rec,
            None,
        )?;
        for (r, o) in outs.into_iter().enumerate() {
            outputs[r].per_batch.push(o);
        }
        if b == 0 {
            trace.events = rec.events;
        }
    }
    // communication is data-independent: one message carries all batches
    scale_events(&mut trace.events, batch as u64);
    let _ = n;
    Ok(ForwardRun {
        outputs,
        trace,
        assignment,
    })
}

// ---------------------------------------------------------------------------
// backward

/// Circulating backward packet: a team's queries with their gradient and
/// forward statistics. K/V gradients never ride in it.
#[derive(Clone)]
struct Packet {
    origin: usize,
    q: DenseMatrix,
    ids: Vec<usize>,
    dq: DenseMatrix,
    d_out: DenseMatrix,
    out: DenseMatrix,
    lse: Vec<f64>,
}

struct GradBlock {
    dk: DenseMatrix,
    dv: DenseMatrix,
    ids: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn backward_single(
    plan: &TopologyPlan,
    assignment: &ShardAssignment,
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    d_out: &DenseMatrix,
    mask: MaskKind,
    opts: &ExecOptions,
    rec: &mut Recorder<'_>,
) -> Result<(Vec<DenseMatrix>, Vec<DenseMatrix>, Vec<DenseMatrix>)> {
    let p = plan.world_size();
    let c = plan.config.attn_parallel;
    let rlen = plan.ring_length;
    let h = q.cols();
    let n_per = assignment.tokens_per_device();

    // recompute the forward schedule (checkpointing), capturing team tensors,
    // home K/V blocks and the merged full-row statistics; not re-logged.
    let mut cap = ForwardCapture {
        q_team: Vec::new(),
        ids_team: Vec::new(),
        home_kv: (0..p)
            .map(|_| KvBlock {
                k: DenseMatrix::zeros(0, 0),
                v: DenseMatrix::zeros(0, 0),
                ids: Vec::new(),
            })
            .collect(),
        merged: Vec::new(),
    };
    {
        let mut silent = Recorder {
            events: Vec::new(),
            enabled: false,
            dtype_bytes: rec.dtype_bytes,
            nodes: rec.nodes,
        };
        forward_single(
            plan,
            assignment,
            q,
            k,
            v,
            mask,
            opts,
            &mut silent,
            Some(&mut cap),
        )?;
    }

    // gather upstream gradients (and output slices) within each team
    let dev_ids: Vec<Vec<usize>> = (0..p).map(|r| assignment.device_token_ids(r)).collect();
    let mut d_out_team = Vec::with_capacity(plan.teams.len());
    for team in &plan.teams {
        let slices: Vec<DenseMatrix> = team.iter().map(|&r| d_out.select_rows(&dev_ids[r])).collect();
        d_out_team.push(DenseMatrix::vstack(&slices.iter().collect::<Vec<_>>())?);
        if c > 1 && rec.enabled {
            // out slice + d_out slice per member
            let evs = simulate_all_gather(team, (2 * n_per * h) as u64, rec.dtype_bytes, rec.nodes);
            rec.events.extend(evs);
        }
    }

    // circulate (q, dq, d_out, out) packets around the sub-rings; K/V and
    // their gradients stay put
    let mut board: Board<Packet> = Board::new();
    let packet_elems = (4 * c * n_per * h) as u64;
    let mut held: Vec<Packet> = (0..p)
        .map(|r| {
            let t = plan.team_of(r);
            Packet {
                origin: r,
                q: cap.q_team[t].clone(),
                ids: cap.ids_team[t].clone(),
                dq: DenseMatrix::zeros(c * n_per, h),
                d_out: d_out_team[t].clone(),
                out: cap.merged[t].out.clone(),
                lse: cap.merged[t].lse.clone(),
            }
        })
        .collect();
    let mut dk_acc: Vec<DenseMatrix> = (0..p).map(|_| DenseMatrix::zeros(c * n_per, h)).collect();
    let mut dv_acc: Vec<DenseMatrix> = (0..p).map(|_| DenseMatrix::zeros(c * n_per, h)).collect();

    for i in 0..rlen {
        for r in 0..p {
            let home = &cap.home_kv[r];
            let pkt = &mut held[r];
            let (dq_p, dk_p, dv_p) = backward_iteration_indexed(
                &pkt.q, &home.k, &home.v, &pkt.d_out, &pkt.lse, &pkt.out, mask, &pkt.ids,
                &home.ids, h,
            )?;
            pkt.dq.add_assign(&dq_p)?;
            dk_acc[r].add_assign(&dk_p)?;
            dv_acc[r].add_assign(&dv_p)?;
        }
        // forward the packet; the last hop returns every packet home
        for r in 0..p {
            let pkt = std::mem::replace(
                &mut held[r],
                Packet {
                    origin: usize::MAX,
                    q: DenseMatrix::zeros(0, 0),
                    ids: Vec::new(),
                    dq: DenseMatrix::zeros(0, 0),
                    d_out: DenseMatrix::zeros(0, 0),
                    out: DenseMatrix::zeros(0, 0),
                    lse: Vec::new(),
                },
            );
            board.post(EventKind::P2P, r, plan.ring_next[r], i + 1, pkt)?;
            rec.emit(EventKind::P2P, r, plan.ring_next[r], packet_elems, i + 1);
        }
        for r in 0..p {
            held[r] = board.take(EventKind::P2P, plan.ring_last[r], r, i + 1)?;
        }
    }
    for (r, pkt) in held.iter().enumerate() {
        if pkt.origin != r {
            return Err(Error::protocol(format!(
                "query packet of rank {} did not return home (at {})",
                pkt.origin, r
            )));
        }
    }

    // team reduce-scatter (plain sum) of dq
    let mut dq_shard: Vec<DenseMatrix> = vec![DenseMatrix::zeros(0, 0); p];
    for team in &plan.teams {
        let mut total = held[team[0]].dq.clone();
        for &r in &team[1..] {
            total.add_assign(&held[r].dq)?;
        }
        for (m, &r) in team.iter().enumerate() {
            let rows: Vec<usize> = (m * n_per..(m + 1) * n_per).collect();
            dq_shard[r] = total.select_rows(&rows);
        }
        if c > 1 && rec.enabled {
            let evs = reduce_scatter_events(team, (n_per * h) as u64, rec.dtype_bytes, rec.nodes);
            rec.events.extend(evs);
        }
    }

    // return each home block's accumulated K/V gradients to its owner
    // (reverse of the initial shuffle), then sum-scatter within the team
    let mut grad_board: Board<GradBlock> = Board::new();
    let kv_elems = (2 * c * n_per * h) as u64;
    for r in 0..p {
        let owner = plan.init_recv[r];
        let block = GradBlock {
            dk: dk_acc[r].clone(),
            dv: dv_acc[r].clone(),
            ids: cap.home_kv[r].ids.clone(),
        };
        grad_board.post(EventKind::InitShuffle, r, owner, 0, block)?;
        rec.emit(EventKind::InitShuffle, r, owner, kv_elems, 0);
    }
    let mut dk_shard: Vec<DenseMatrix> = vec![DenseMatrix::zeros(0, 0); p];
    let mut dv_shard: Vec<DenseMatrix> = vec![DenseMatrix::zeros(0, 0); p];
    let mut partials: Vec<Option<GradBlock>> = (0..p).map(|_| None).collect();
    for r in 0..p {
        let block = grad_board.take(EventKind::InitShuffle, plan.init_send[r], r, 0)?;
        let t = plan.team_of(r);
        if block.ids != cap.ids_team[t] {
            return Err(Error::protocol(format!(
                "rank {} received k/v gradients for foreign tokens",
                r
            )));
        }
        partials[r] = Some(block);
    }
    grad_board.assert_quiescent()?;
    for team in &plan.teams {
        let first = partials[team[0]].take().unwrap();
        let (mut dk_total, mut dv_total) = (first.dk, first.dv);
        for &r in &team[1..] {
            let blk = partials[r].take().unwrap();
            dk_total.add_assign(&blk.dk)?;
            dv_total.add_assign(&blk.dv)?;
        }
        for (m, &r) in team.iter().enumerate() {
            let rows: Vec<usize> = (m * n_per..(m + 1) * n_per).collect();
            dk_shard[r] = dk_total.select_rows(&rows);
            dv_shard[r] = dv_total.select_rows(&rows);
        }
        if c > 1 && rec.enabled {
            let evs = reduce_scatter_events(team, (2 * n_per * h) as u64, rec.dtype_bytes, rec.nodes);
            rec.events.extend(evs);
        }
    }
    board.assert_quiescent()?;

    Ok((dq_shard, dk_shard, dv_shard))
}

/// Runs the distributed backward pass (two-loop scheme: K/V gradients pinned
/// to their ring seats, Q/dQ circulating with a final hop home) for every
/// batch element. Forward statistics are recomputed internally.
pub fn run_backward(
    config: &ParallelConfig,
    cluster: &ClusterSpec,
    inputs: &SimInputs,
    d_out: &[DenseMatrix],
    mask: MaskKind,
    opts: &ExecOptions,
) -> Result<BackwardRun> {
    let (plan, nodes, assignment, n, h) = prepare(config, cluster, inputs, mask, opts)?;
    let p = config.world_size;
    let batch = inputs.batch();
    if d_out.len() != batch {
        return Err(Error::contract("one upstream gradient per batch element required"));
    }
    for g in d_out {
        if g.rows() != n || g.cols() != h {
            return Err(Error::contract("upstream gradient shape mismatch"));
        }
    }

    let make_shards = |ids_of: &dyn Fn(usize) -> Vec<usize>| -> Vec<DeviceShard> {
        (0..p)
            .map(|r| DeviceShard {
                device: r,
                token_ids: ids_of(r),
                per_batch: Vec::with_capacity(batch),
            })
            .collect()
    };
    let ids_fn = |r: usize| assignment.device_token_ids(r);
    let mut dq = make_shards(&ids_fn);
    let mut dk = make_shards(&ids_fn);
    let mut dv = make_shards(&ids_fn);
    let mut trace = CommTrace::new(p);

    for b in 0..batch {
        let mut rec = Recorder {
            events: Vec::new(),
            enabled: b == 0 && p > 1,
            dtype_bytes: cluster.dtype_bytes,
            nodes: &nodes,
        };
        let (dqs, dks, dvs) = backward_single(
            &plan,
            &assignment,
            &inputs.q[b],
            &inputs.k[b],
            &inputs.v[b],
            &d_out[b],
            mask,
            opts,
            &mut rec,
        )?;
        for r in 0..p {
            dq[r].per_batch.push(dqs[r].clone());
            dk[r].per_batch.push(dks[r].clone());
            dv[r].per_batch.push(dvs[r].clone());
        }
        if b == 0 {
            trace.events = rec.events;
        }
    }
    scale_events(&mut trace.events, batch as u64);
    Ok(BackwardRun {
        dq,
        dk,
        dv,
        trace,
        assignment,
    })
}
