//! Sequence sharding: contiguous splits for full-mask runs and zigzag
//! chunk pairing for causal runs, plus the causal workload counter used by
//! the balance checks.
//!
//! Shards carry explicit global token ranges through the whole pipeline so
//! causal masking is always computed from global indices.

use crate::error::{Error, Result};
use crate::tensor::MaskKind;
use serde::{Deserialize, Serialize};

/// One contiguous chunk of global tokens held by a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkRange {
    pub chunk_id: usize,
    /// Global token range [start, end).
    pub start: usize,
    pub end: usize,
}

impl ChunkRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Per-device chunk assignment over a sequence of `total_tokens`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardAssignment {
    pub per_device: Vec<Vec<ChunkRange>>,
    pub chunk_count: usize,
    pub tokens_per_chunk: usize,
    pub total_tokens: usize,
}

impl ShardAssignment {
    pub fn device_count(&self) -> usize {
        self.per_device.len()
    }

    pub fn tokens_per_device(&self) -> usize {
        self.total_tokens / self.per_device.len()
    }

    /// Global token ids held by a device, in chunk order.
    pub fn device_token_ids(&self, device: usize) -> Vec<usize> {
        self.per_device[device]
            .iter()
            .flat_map(|c| c.start..c.end)
            .collect()
    }

    /// One line per device: device id, then chunk_id:[start,end) entries.
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "# N={} P={} chunks={} tokens_per_chunk={}\n",
            self.total_tokens,
            self.per_device.len(),
            self.chunk_count,
            self.tokens_per_chunk
        );
        for (d, chunks) in self.per_device.iter().enumerate() {
            s.push_str(&format!("{}", d));
            for c in chunks {
                s.push_str(&format!(" {}:[{},{})", c.chunk_id, c.start, c.end));
            }
            s.push('\n');
        }
        s
    }
}

/// Contiguous equal split: device r holds [r*N/P, (r+1)*N/P).
pub fn split_naive(total_tokens: usize, devices: usize) -> Result<ShardAssignment> {
    if devices == 0 {
        return Err(Error::config("device count must be positive"));
    }
    if total_tokens % devices != 0 {
        return Err(Error::config(format!(
            "P={} does not divide N={}",
            devices, total_tokens
        )));
    }
    let per = total_tokens / devices;
    let per_device = (0..devices)
        .map(|r| {
            vec![ChunkRange {
                chunk_id: r,
                start: r * per,
                end: (r + 1) * per,
            }]
        })
        .collect();
    Ok(ShardAssignment {
        per_device,
        chunk_count: devices,
        tokens_per_chunk: per,
        total_tokens,
    })
}

/// Zigzag split for causal balance: the sequence is cut into 2P equal
/// chunks and device r holds chunks r and 2P-1-r.
pub fn split_zigzag(total_tokens: usize, devices: usize) -> Result<ShardAssignment> {
    if devices == 0 {
        return Err(Error::config("device count must be positive"));
    }
    let chunk_count = 2 * devices;
    if total_tokens % chunk_count != 0 {
        return Err(Error::config(format!(
            "2P={} does not divide N={}",
            chunk_count, total_tokens
        )));
    }
    let per = total_tokens / chunk_count;
    let range = |id: usize| ChunkRange {
        chunk_id: id,
        start: id * per,
        end: (id + 1) * per,
    };
    let per_device = (0..devices)
        .map(|r| vec![range(r), range(chunk_count - 1 - r)])
        .collect();
    Ok(ShardAssignment {
        per_device,
        chunk_count,
        tokens_per_chunk: per,
        total_tokens,
    })
}

/// Picks the dataloader scheme for a mask: contiguous for full attention,
/// zigzag for causal.
pub fn assignment_for_mask(mask: MaskKind, total_tokens: usize, devices: usize) -> Result<ShardAssignment> {
    match mask {
        MaskKind::Full => split_naive(total_tokens, devices),
        MaskKind::Causal => split_zigzag(total_tokens, devices),
    }
}

/// Per-device count of unmasked causal (q, k) pairs: for each query the
/// device owns, all global keys k <= q count. Closed-form sum per range.
pub fn causal_workload(assignment: &ShardAssignment, total_tokens: usize) -> Vec<u64> {
    debug_assert_eq!(assignment.total_tokens, total_tokens);
    assignment
        .per_device
        .iter()
        .map(|chunks| {
            chunks
                .iter()
                .map(|c| {
                    // sum_{q=start}^{end-1} (q + 1)
                    let s = c.start as u64;
                    let e = c.end as u64;
                    (e * (e + 1) - s * (s + 1)) / 2
                })
                .sum()
        })
        .collect()
}

/// Per-pair mask for one attention block between a contiguous query range
/// and a contiguous key range carrying global indices.
pub fn block_mask(
    q_range: (usize, usize),
    k_range: (usize, usize),
    mask: MaskKind,
) -> Vec<Vec<bool>> {
    (q_range.0..q_range.1)
        .map(|q| (k_range.0..k_range.1).map(|k| mask.allows(q, k)).collect())
        .collect()
}
