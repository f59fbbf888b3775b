//! Minimal dense-tensor math for the attention executor and its oracles.
//!
//! Everything here is a pure function over row-major `f64` matrices. The
//! reference attention is the single-device ground truth; `forward_iteration`
//! and `backward_iteration` are the blockwise online-softmax steps the
//! distributed executor drives, and `finite_diff_grad` is the independent
//! gradient oracle used to pin the analytic backward.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, enforcing the shape and
    /// finiteness invariants.
    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("matrix entries must be finite"));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    /// Uniform entries in [-1, 1), drawn row by row from `rng`.
    pub fn random<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Stacks the given rows of `self` into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(rows.len(), self.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    /// Vertical concatenation.
    pub fn vstack(blocks: &[&DenseMatrix]) -> Result<DenseMatrix> {
        let cols = blocks.first().map(|b| b.cols).unwrap_or(0);
        if blocks.iter().any(|b| b.cols != cols) {
            return Err(Error::contract("vstack column mismatch"));
        }
        let rows = blocks.iter().map(|b| b.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for b in blocks {
            data.extend_from_slice(&b.data);
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::contract("add_assign shape mismatch"));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn linf_distance(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Rounds every entry through f32, for reduced-precision tolerance
    /// experiments.
    pub fn round_to_f32(&mut self) {
        for a in self.data.iter_mut() {
            *a = *a as f32 as f64;
        }
    }
}

/// `max |a-b| / max(1, |b|_inf)` — the relative-error metric used by every
/// gradient check in the repo.
pub fn relative_error(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.linf_distance(b) / b.linf_norm().max(1.0)
}

/// Attention mask over global token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Full,
    Causal,
}

impl MaskKind {
    /// Whether query at global position `q` may attend to key at global
    /// position `k`.
    pub fn allows(&self, q: usize, k: usize) -> bool {
        match self {
            MaskKind::Full => true,
            MaskKind::Causal => k <= q,
        }
    }
}

/// Running online-softmax state: partial output plus per-row log-sum-exp.
///
/// A fresh state has `lse = -inf` and `out = 0`, which makes the first merge
/// an identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnState {
    pub out: DenseMatrix,
    pub lse: Vec<f64>,
}

impl AttnState {
    pub fn initial(rows: usize, cols: usize) -> Self {
        AttnState {
            out: DenseMatrix::zeros(rows, cols),
            lse: vec![f64::NEG_INFINITY; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.out.rows()
    }

    /// Online-softmax merge of two states over disjoint key sets:
    /// `new_lse = logaddexp(lse_a, lse_b)` and each partial output is
    /// rescaled by `exp(lse - new_lse)` before summing.
    pub fn merge(&self, other: &AttnState) -> Result<AttnState> {
        if self.out.rows() != other.out.rows() || self.out.cols() != other.out.cols() {
            return Err(Error::contract("attention state shape mismatch in merge"));
        }
        let rows = self.out.rows();
        let cols = self.out.cols();
        let mut merged = AttnState::initial(rows, cols);
        for i in 0..rows {
            let la = self.lse[i];
            let lb = other.lse[i];
            let lm = logaddexp(la, lb);
            merged.lse[i] = lm;
            if lm == f64::NEG_INFINITY {
                continue; // both sides fully masked; row stays zero
            }
            let wa = if la == f64::NEG_INFINITY { 0.0 } else { (la - lm).exp() };
            let wb = if lb == f64::NEG_INFINITY { 0.0 } else { (lb - lm).exp() };
            let dst = merged.out.row_mut(i);
            let ra = self.out.row(i);
            let rb = other.out.row(i);
            for j in 0..cols {
                dst[j] = wa * ra[j] + wb * rb[j];
            }
        }
        Ok(merged)
    }

    pub fn round_to_f32(&mut self) {
        self.out.round_to_f32();
        for l in self.lse.iter_mut() {
            *l = *l as f32 as f64;
        }
    }
}

pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn check_block_shapes(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    head_dim: usize,
) -> Result<()> {
    if q.cols() != k.cols() {
        return Err(Error::contract(format!(
            "q cols {} != k cols {}",
            q.cols(),
            k.cols()
        )));
    }
    if q.cols() != head_dim {
        return Err(Error::contract(format!(
            "q cols {} != head_dim {}",
            q.cols(),
            head_dim
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::contract(format!(
            "k rows {} != v rows {}",
            k.rows(),
            v.rows()
        )));
    }
    Ok(())
}

/// Scaled-dot-product attention over one (q-block, k-block) pair, with
/// per-row global token positions for masking. Returns the blockwise state
/// (partial output + lse), which makes this the building block for both the
/// reference oracle and the online iteration.
pub fn attention_block_state(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    mask: MaskKind,
    q_ids: &[usize],
    k_ids: &[usize],
    head_dim: usize,
) -> Result<AttnState> {
    check_block_shapes(q, k, v, head_dim)?;
    if q_ids.len() != q.rows() || k_ids.len() != k.rows() {
        return Err(Error::contract("token id count does not match block rows"));
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut state = AttnState::initial(q.rows(), v.cols());
    let mut scores = vec![0.0f64; k.rows()];
    for i in 0..q.rows() {
        let qi = q_ids[i];
        let mut max_s = f64::NEG_INFINITY;
        let mut any = false;
        for j in 0..k.rows() {
            if mask.allows(qi, k_ids[j]) {
                let s = scale * dot(q.row(i), k.row(j));
                scores[j] = s;
                max_s = max_s.max(s);
                any = true;
            } else {
                scores[j] = f64::NEG_INFINITY;
            }
        }
        if !any {
            continue; // fully masked row: lse = -inf, out = 0
        }
        let mut denom = 0.0;
        for j in 0..k.rows() {
            if scores[j] != f64::NEG_INFINITY {
                denom += (scores[j] - max_s).exp();
            }
        }
        let lse = max_s + denom.ln();
        state.lse[i] = lse;
        let out_row = state.out.row_mut(i);
        for j in 0..k.rows() {
            if scores[j] == f64::NEG_INFINITY {
                continue;
            }
            let p = (scores[j] - lse).exp();
            for (o, vj) in out_row.iter_mut().zip(v.row(j)) {
                *o += p * vj;
            }
        }
    }
    Ok(state)
}

fn contiguous_ids(offset: usize, len: usize) -> Vec<usize> {
    (offset..offset + len).collect()
}

/// Reference single-pass attention: numerically stable softmax(QK^T/sqrt(d))V
/// with global offsets for masking. Fully-masked rows produce zero output.
pub fn reference_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    mask: MaskKind,
    q_offset: usize,
    k_offset: usize,
    head_dim: usize,
) -> Result<DenseMatrix> {
    let state = attention_block_state(
        q,
        k,
        v,
        mask,
        &contiguous_ids(q_offset, q.rows()),
        &contiguous_ids(k_offset, k.rows()),
        head_dim,
    )?;
    Ok(state.out)
}

/// Reference attention with its per-row log-sum-exp statistics; the backward
/// oracle needs both.
pub fn reference_attention_with_lse(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
    mask: MaskKind,
    q_offset: usize,
    k_offset: usize,
    head_dim: usize,
) -> Result<AttnState> {
    attention_block_state(
        q,
        k,
        v,
        mask,
        &contiguous_ids(q_offset, q.rows()),
        &contiguous_ids(k_offset, k.rows()),
        head_dim,
    )
}

/// One blockwise forward step: computes attention of `q` against one
/// key/value block and merges it into the running state.
pub fn forward_iteration(
    state: &AttnState,
    q: &DenseMatrix,
    k_block: &DenseMatrix,
    v_block: &DenseMatrix,
    mask: MaskKind,
    q_offset: usize,
    k_offset: usize,
    head_dim: usize,
) -> Result<AttnState> {
    forward_iteration_indexed(
        state,
        q,
        k_block,
        v_block,
        mask,
        &contiguous_ids(q_offset, q.rows()),
        &contiguous_ids(k_offset, k_block.rows()),
        head_dim,
    )
}

/// `forward_iteration` over non-contiguous token id sets (zigzag shards).
pub fn forward_iteration_indexed(
    state: &AttnState,
    q: &DenseMatrix,
    k_block: &DenseMatrix,
    v_block: &DenseMatrix,
    mask: MaskKind,
    q_ids: &[usize],
    k_ids: &[usize],
    head_dim: usize,
) -> Result<AttnState> {
    if state.rows() != q.rows() || state.out.cols() != v_block.cols() {
        return Err(Error::contract("state shape does not match q rows / v cols"));
    }
    let block = attention_block_state(q, k_block, v_block, mask, q_ids, k_ids, head_dim)?;
    state.merge(&block)
}

/// One blockwise backward step, mirroring the flash-attention backward:
/// given the final forward statistics (`lse`, `out`) of `q` over the full
/// key set, returns the partial gradients contributed by this key/value
/// block. Summed over all blocks they equal the exact gradients of
/// `reference_attention`.
#[allow(clippy::too_many_arguments)]
pub fn backward_iteration(
    q: &DenseMatrix,
    k_block: &DenseMatrix,
    v_block: &DenseMatrix,
    d_out: &DenseMatrix,
    lse: &[f64],
    out: &DenseMatrix,
    mask: MaskKind,
    q_offset: usize,
    k_offset: usize,
    head_dim: usize,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    backward_iteration_indexed(
        q,
        k_block,
        v_block,
        d_out,
        lse,
        out,
        mask,
        &contiguous_ids(q_offset, q.rows()),
        &contiguous_ids(k_offset, k_block.rows()),
        head_dim,
    )
}

/// `backward_iteration` over non-contiguous token id sets.
#[allow(clippy::too_many_arguments)]
pub fn backward_iteration_indexed(
    q: &DenseMatrix,
    k_block: &DenseMatrix,
    v_block: &DenseMatrix,
    d_out: &DenseMatrix,
    lse: &[f64],
    out: &DenseMatrix,
    mask: MaskKind,
    q_ids: &[usize],
    k_ids: &[usize],
    head_dim: usize,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    check_block_shapes(q, k_block, v_block, head_dim)?;
    if d_out.rows() != q.rows()
        || d_out.cols() != v_block.cols()
        || out.rows() != q.rows()
        || out.cols() != v_block.cols()
        || lse.len() != q.rows()
    {
        return Err(Error::contract("backward statistics shape mismatch"));
    }
    if q_ids.len() != q.rows() || k_ids.len() != k_block.rows() {
        return Err(Error::contract("token id count does not match block rows"));
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dq = DenseMatrix::zeros(q.rows(), q.cols());
    let mut dk = DenseMatrix::zeros(k_block.rows(), k_block.cols());
    let mut dv = DenseMatrix::zeros(v_block.rows(), v_block.cols());

    for i in 0..q.rows() {
        if lse[i] == f64::NEG_INFINITY {
            continue; // row attends to no keys anywhere; all gradients zero
        }
        // D_i = <dO_i, O_i>, with O the full-key-set output.
        let d_i = dot(d_out.row(i), out.row(i));
        let qi = q_ids[i];
        for j in 0..k_block.rows() {
            if !mask.allows(qi, k_ids[j]) {
                continue;
            }
            let s = scale * dot(q.row(i), k_block.row(j));
            let p = (s - lse[i]).exp();
            // dv_j += p * dO_i
            for (dvx, dox) in dv.row_mut(j).iter_mut().zip(d_out.row(i)) {
                *dvx += p * dox;
            }
            // ds = p * (<dO_i, v_j> - D_i)
            let ds = p * (dot(d_out.row(i), v_block.row(j)) - d_i);
            for (dqx, kx) in dq.row_mut(i).iter_mut().zip(k_block.row(j)) {
                *dqx += scale * ds * kx;
            }
            for (dkx, qx) in dk.row_mut(j).iter_mut().zip(q.row(i)) {
                *dkx += scale * ds * qx;
            }
        }
    }
    Ok((dq, dk, dv))
}

/// Central-difference gradient of a scalar function of a matrix, entry by
/// entry. The independent oracle for every analytic gradient in the repo.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&DenseMatrix) -> Result<f64>,
    x: &DenseMatrix,
    step: f64,
) -> Result<DenseMatrix> {
    if step <= 0.0 {
        return Err(Error::contract("finite difference step must be positive"));
    }
    let mut grad = DenseMatrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let orig = probe.get(i, j);
            probe.set(i, j, orig + step);
            let fp = f(&probe)?;
            probe.set(i, j, orig - step);
            let fm = f(&probe)?;
            probe.set(i, j, orig);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::oracle("non-finite function value in finite differences"));
            }
            grad.set(i, j, (fp - fm) / (2.0 * step));
        }
    }
    Ok(grad)
}
