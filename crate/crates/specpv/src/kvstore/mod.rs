//! Block-paged key/value cache with per-block key summaries.
//!
//! Each layer stores its K/V rows in fixed-size blocks (token order equals
//! global position order). Every block carries a summary, the element-wise
//! maximum and minimum of its key rows, which the retrieval scorer uses to
//! rank blocks without touching the raw keys. Heads are stored concatenated
//! within a row, so a summary vector covers all heads at once.

pub mod offload;
pub mod partial;

use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

/// Default tokens per block.
pub const DEFAULT_BLOCK_SIZE: usize = 16;

/// Element-wise max/min over a block's key rows, per head dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSummary {
    pub k_max: Vec<f32>,
    pub k_min: Vec<f32>,
}

/// One block of K/V rows for a single layer.
#[derive(Debug, Clone)]
pub struct KVBlock {
    filled: usize,
    k: Vec<f32>,
    v: Vec<f32>,
    summary: Option<BlockSummary>,
}

impl KVBlock {
    fn new(capacity: usize, dim: usize) -> Self {
        KVBlock {
            filled: 0,
            k: Vec::with_capacity(capacity * dim),
            v: Vec::with_capacity(capacity * dim),
            summary: None,
        }
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn k_row(&self, i: usize, dim: usize) -> &[f32] {
        &self.k[i * dim..(i + 1) * dim]
    }

    pub fn v_row(&self, i: usize, dim: usize) -> &[f32] {
        &self.v[i * dim..(i + 1) * dim]
    }

    pub fn summary(&self) -> Option<&BlockSummary> {
        self.summary.as_ref()
    }

    fn truncate(&mut self, keep: usize, dim: usize) {
        self.filled = keep;
        self.k.truncate(keep * dim);
        self.v.truncate(keep * dim);
        self.summary = if keep == 0 {
            None
        } else {
            Some(compute_summary(&self.k, self.filled, dim))
        };
    }
}

fn compute_summary(k: &[f32], filled: usize, dim: usize) -> BlockSummary {
    let mut k_max = k[..dim].to_vec();
    let mut k_min = k[..dim].to_vec();
    for r in 1..filled {
        let row = &k[r * dim..(r + 1) * dim];
        for d in 0..dim {
            if row[d] > k_max[d] {
                k_max[d] = row[d];
            }
            if row[d] < k_min[d] {
                k_min[d] = row[d];
            }
        }
    }
    BlockSummary { k_max, k_min }
}

/// Recompute a block's summary from scratch.
pub fn summarize_block(block: &KVBlock, dim: usize) -> Result<BlockSummary> {
    if block.filled == 0 {
        return Err(Error::EmptyBlock);
    }
    Ok(compute_summary(&block.k, block.filled, dim))
}

/// Paged K/V store covering all layers of one sequence.
#[derive(Debug, Clone)]
pub struct PagedKVCache {
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    block_size: usize,
    layers: Vec<Vec<KVBlock>>,
}

impl PagedKVCache {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize, block_size: usize) -> Self {
        assert!(block_size > 0, "block size must be positive");
        PagedKVCache {
            n_layers,
            n_heads,
            head_dim,
            block_size,
            layers: vec![Vec::new(); n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Width of one K or V row (all heads concatenated).
    pub fn dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Token count; layers always advance together.
    pub fn len(&self) -> usize {
        self.layer_len(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        let blocks = &self.layers[layer];
        match blocks.last() {
            None => 0,
            Some(last) => (blocks.len() - 1) * self.block_size + last.filled,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn block(&self, layer: usize, idx: usize) -> &KVBlock {
        &self.layers[layer][idx]
    }

    /// Summary of block `idx` in `layer`; blocks gain a summary as soon as
    /// they hold a row.
    pub fn summary(&self, layer: usize, idx: usize) -> &BlockSummary {
        self.layers[layer][idx]
            .summary
            .as_ref()
            .expect("nonempty block always has a summary")
    }

    /// Append rows whose positions continue the layer's token count.
    pub fn append_kv(
        &mut self,
        layer: usize,
        k_rows: &Tensor2D,
        v_rows: &Tensor2D,
        positions: &[usize],
    ) -> Result<()> {
        let dim = self.dim();
        if k_rows.cols() != dim || v_rows.cols() != dim || k_rows.rows() != v_rows.rows() {
            return Err(Error::ShapeMismatch {
                context: "append_kv",
                expected: format!("K/V rows of width {dim}"),
                actual: format!("{}x{} / {}x{}", k_rows.rows(), k_rows.cols(), v_rows.rows(), v_rows.cols()),
            });
        }
        if positions.len() != k_rows.rows() {
            return Err(Error::ShapeMismatch {
                context: "append_kv positions",
                expected: format!("{}", k_rows.rows()),
                actual: format!("{}", positions.len()),
            });
        }
        let mut next = self.layer_len(layer);
        for &p in positions {
            if p != next {
                return Err(Error::NonContiguousAppend {
                    expected: next,
                    actual: p,
                });
            }
            next += 1;
        }
        let block_size = self.block_size;
        for r in 0..k_rows.rows() {
            let blocks = &mut self.layers[layer];
            if blocks.last().map_or(true, |b| b.filled == block_size) {
                blocks.push(KVBlock::new(block_size, dim));
            }
            let block = blocks.last_mut().unwrap();
            block.k.extend_from_slice(k_rows.row(r));
            block.v.extend_from_slice(v_rows.row(r));
            block.filled += 1;
            block.summary = Some(compute_summary(&block.k, block.filled, dim));
        }
        Ok(())
    }

    /// Drop every row at `first_invalid` and beyond, in all layers. The
    /// trailing block's summary is recomputed from its remaining rows.
    pub fn truncate(&mut self, first_invalid: usize) {
        let dim = self.dim();
        let block_size = self.block_size;
        for layer in 0..self.n_layers {
            if first_invalid >= self.layer_len(layer) {
                continue;
            }
            if first_invalid == 0 {
                self.layers[layer].clear();
                continue;
            }
            let keep_blocks = first_invalid.div_ceil(block_size);
            let blocks = &mut self.layers[layer];
            blocks.truncate(keep_blocks);
            let last = blocks.last_mut().expect("keep_blocks >= 1");
            let keep_rows = first_invalid - (keep_blocks - 1) * block_size;
            if keep_rows < last.filled {
                last.truncate(keep_rows, dim);
            }
        }
    }

    /// All rows of a layer in position order, as (K, V).
    pub fn gather_all(&self, layer: usize) -> (Tensor2D, Tensor2D) {
        self.gather_blocks(layer, 0..self.layers[layer].len())
    }

    /// Rows of the given blocks (ascending iteration order) as (K, V).
    pub fn gather_blocks(
        &self,
        layer: usize,
        ids: impl IntoIterator<Item = usize>,
    ) -> (Tensor2D, Tensor2D) {
        let dim = self.dim();
        let mut k = Tensor2D::with_cols(dim);
        let mut v = Tensor2D::with_cols(dim);
        for id in ids {
            let block = &self.layers[layer][id];
            for r in 0..block.filled {
                k.push_row(block.k_row(r, dim));
                v.push_row(block.v_row(r, dim));
            }
        }
        (k, v)
    }

    /// Positions covered by a block.
    pub fn block_positions(&self, idx: usize) -> std::ops::Range<usize> {
        let start = idx * self.block_size;
        start..start + self.layers[0][idx].filled
    }

    /// K/V row at an absolute (layer, position) coordinate.
    pub fn row_at(&self, layer: usize, position: usize) -> (&[f32], &[f32]) {
        let dim = self.dim();
        let block = &self.layers[layer][position / self.block_size];
        let r = position % self.block_size;
        (block.k_row(r, dim), block.v_row(r, dim))
    }

    /// Bytes held by one token's K/V rows across all layers.
    pub fn bytes_per_token(&self) -> u64 {
        (self.n_layers * 2 * self.dim() * std::mem::size_of::<f32>()) as u64
    }

    /// Debug dump, format documented in `docs/cache-dump.md`.
    pub fn dump(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(b"SPKV")?;
        w.write_all(&(self.n_layers as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&(self.block_size as u32).to_le_bytes())?;
        for layer in 0..self.n_layers {
            let blocks = &self.layers[layer];
            w.write_all(&(blocks.len() as u32).to_le_bytes())?;
            for (idx, block) in blocks.iter().enumerate() {
                w.write_all(&(idx as u32).to_le_bytes())?;
                w.write_all(&(block.filled as u32).to_le_bytes())?;
                for p in self.block_positions(idx) {
                    w.write_all(&(p as u64).to_le_bytes())?;
                }
                for value in block.k.iter().chain(block.v.iter()) {
                    w.write_all(&value.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeededRng;

    fn rows(n: usize, dim: usize, seed: u64) -> (Tensor2D, Tensor2D) {
        let mut rng = SeededRng::new(seed);
        let k = Tensor2D::from_vec(n, dim, (0..n * dim).map(|_| rng.uniform_symmetric(2.0)).collect()).unwrap();
        let v = Tensor2D::from_vec(n, dim, (0..n * dim).map(|_| rng.uniform_symmetric(2.0)).collect()).unwrap();
        (k, v)
    }

    #[test]
    fn sixteen_rows_fill_exactly_one_block() {
        let mut cache = PagedKVCache::new(1, 2, 2, 16);
        let (k, v) = rows(16, 4, 1);
        let positions: Vec<usize> = (0..16).collect();
        cache.append_kv(0, &k, &v, &positions).unwrap();
        assert_eq!(cache.n_blocks(), 1);
        assert_eq!(cache.block(0, 0).filled(), 16);
        assert_eq!(cache.len(), 16);
    }

    #[test]
    fn seventeen_rows_spill_into_second_block() {
        let mut cache = PagedKVCache::new(1, 2, 2, 16);
        let (k, v) = rows(17, 4, 2);
        let positions: Vec<usize> = (0..17).collect();
        cache.append_kv(0, &k, &v, &positions).unwrap();
        assert_eq!(cache.n_blocks(), 2);
        assert_eq!(cache.block(0, 1).filled(), 1);
    }

    #[test]
    fn read_back_is_bitwise_equal() {
        let mut cache = PagedKVCache::new(1, 2, 2, 4);
        let (k, v) = rows(11, 4, 3);
        let positions: Vec<usize> = (0..11).collect();
        cache.append_kv(0, &k, &v, &positions).unwrap();
        let (gk, gv) = cache.gather_all(0);
        assert_eq!(gk.data(), k.data());
        assert_eq!(gv.data(), v.data());
    }

    #[test]
    fn non_contiguous_append_rejected() {
        let mut cache = PagedKVCache::new(1, 1, 4, 4);
        let (k, v) = rows(2, 4, 4);
        let err = cache.append_kv(0, &k, &v, &[0, 2]).unwrap_err();
        assert!(matches!(err, Error::NonContiguousAppend { .. }));
    }

    #[test]
    fn single_row_summary_is_the_row() {
        let mut cache = PagedKVCache::new(1, 1, 4, 4);
        let (k, v) = rows(1, 4, 5);
        cache.append_kv(0, &k, &v, &[0]).unwrap();
        let s = cache.summary(0, 0);
        assert_eq!(s.k_max, k.row(0));
        assert_eq!(s.k_min, k.row(0));
    }

    #[test]
    fn summary_hand_case() {
        let mut cache = PagedKVCache::new(1, 1, 2, 4);
        let k = Tensor2D::from_vec(2, 2, vec![1.0, -2.0, 0.0, 5.0]).unwrap();
        let v = Tensor2D::zeros(2, 2);
        cache.append_kv(0, &k, &v, &[0, 1]).unwrap();
        let s = cache.summary(0, 0);
        assert_eq!(s.k_max, vec![1.0, 5.0]);
        assert_eq!(s.k_min, vec![0.0, -2.0]);
    }

    #[test]
    fn summary_bounds_every_row() {
        let mut cache = PagedKVCache::new(1, 2, 4, 8);
        let (k, v) = rows(8, 8, 6);
        let positions: Vec<usize> = (0..8).collect();
        cache.append_kv(0, &k, &v, &positions).unwrap();
        let s = cache.summary(0, 0);
        for r in 0..8 {
            for d in 0..8 {
                assert!(s.k_min[d] <= k.row(r)[d] && k.row(r)[d] <= s.k_max[d]);
            }
        }
    }

    #[test]
    fn summarize_empty_block_errors() {
        let block = KVBlock::new(4, 4);
        assert!(matches!(summarize_block(&block, 4), Err(Error::EmptyBlock)));
    }

    #[test]
    fn truncate_across_block_boundary_recomputes_summary() {
        let mut cache = PagedKVCache::new(1, 1, 4, 4);
        let (k, v) = rows(10, 4, 7);
        let positions: Vec<usize> = (0..10).collect();
        cache.append_kv(0, &k, &v, &positions).unwrap();
        cache.truncate(6);
        assert_eq!(cache.len(), 6);
        assert_eq!(cache.n_blocks(), 2);
        // trailing block now holds rows 4..6; summary must match a fresh scan
        let expected = summarize_block(cache.block(0, 1), 4).unwrap();
        assert_eq!(cache.summary(0, 1), &expected);
    }

    #[test]
    fn truncate_to_zero_empties_cache() {
        let mut cache = PagedKVCache::new(2, 1, 4, 4);
        let (k, v) = rows(5, 4, 8);
        let positions: Vec<usize> = (0..5).collect();
        cache.append_kv(0, &k, &v, &positions).unwrap();
        cache.append_kv(1, &k, &v, &positions).unwrap();
        cache.truncate(0);
        assert_eq!(cache.len(), 0);
        assert_eq!(cache.n_blocks(), 0);
    }

    #[test]
    fn dump_header_and_size() {
        let mut cache = PagedKVCache::new(2, 1, 4, 4);
        let (k, v) = rows(6, 4, 11);
        let positions: Vec<usize> = (0..6).collect();
        cache.append_kv(0, &k, &v, &positions).unwrap();
        cache.append_kv(1, &k, &v, &positions).unwrap();
        let mut out = Vec::new();
        cache.dump(&mut out).unwrap();
        assert_eq!(&out[..4], b"SPKV");
        assert_eq!(u32::from_le_bytes(out[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(out[8..12].try_into().unwrap()), 4);
        // header + per layer: count + 2 blocks of (idx, filled, positions, K, V)
        let per_layer = 4 + 2 * (4 + 4) + 6 * 8 + 6 * 4 * 4 * 2;
        assert_eq!(out.len(), 16 + 2 * per_layer);
    }

    #[test]
    fn full_rollback_restores_previous_state() {
        let mut cache = PagedKVCache::new(1, 1, 4, 4);
        let (k, v) = rows(6, 4, 9);
        let positions: Vec<usize> = (0..6).collect();
        cache.append_kv(0, &k, &v, &positions).unwrap();
        let snapshot = cache.clone();
        let (k2, v2) = rows(5, 4, 10);
        let more: Vec<usize> = (6..11).collect();
        cache.append_kv(0, &k2, &v2, &more).unwrap();
        cache.truncate(6);
        let (ak, av) = cache.gather_all(0);
        let (bk, bv) = snapshot.gather_all(0);
        assert_eq!(ak.data(), bk.data());
        assert_eq!(av.data(), bv.data());
        assert_eq!(cache.summary(0, 1), snapshot.summary(0, 1));
    }
}
