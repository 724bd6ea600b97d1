//! Four-segment partial cache view: sink | retrieval | local | buffer.
//!
//! Sink blocks (the earliest ones) and local blocks (the most recent window,
//! always including a partially filled trailing block) are kept
//! unconditionally. The middle blocks compete for the remaining token budget
//! by summary score. The buffer holds tokens that were verified against this
//! partial view and are awaiting correction at the next refresh; their K/V
//! rows live in the view itself, not in the paged cache.
//!
//! Scoring: for each query, per-head scores against a block summary are
//! summed over heads, and selection additionally sums them over layers
//! before the cross-query reduction is applied. `Last` reduces to the final
//! query in verification order.

use crate::error::{Error, Result};
use crate::kvstore::{BlockSummary, PagedKVCache};
use crate::numerics::Tensor2D;

/// How a query is scored against a block summary.
///
/// `AsWritten` takes the larger of the two full dot products q·K_max and
/// q·K_min. `Elementwise` picks the larger product per dimension before
/// summing, which upper-bounds q·k for every key row in the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreVariant {
    AsWritten,
    Elementwise,
}

/// Cross-query reduction for block scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryReduction {
    Max,
    Mean,
    Last,
}

/// Per-layer K/V rows for buffered tokens.
#[derive(Debug, Clone)]
struct BufferLayer {
    k: Tensor2D,
    v: Tensor2D,
}

/// Token slots awaiting correction, ordered by position.
#[derive(Debug, Clone)]
pub struct TokenBuffer {
    cap: usize,
    positions: Vec<usize>,
    layers: Vec<BufferLayer>,
}

impl TokenBuffer {
    pub fn new(n_layers: usize, dim: usize, cap: usize) -> Self {
        TokenBuffer {
            cap,
            positions: Vec::new(),
            layers: (0..n_layers)
                .map(|_| BufferLayer {
                    k: Tensor2D::with_cols(dim),
                    v: Tensor2D::with_cols(dim),
                })
                .collect(),
        }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn occupancy(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// First buffered position, if any.
    pub fn start_position(&self) -> Option<usize> {
        self.positions.first().copied()
    }

    pub fn end_position(&self) -> Option<usize> {
        self.positions.last().copied()
    }

    /// Push one token's rows across all layers.
    pub fn push(&mut self, position: usize, k_rows: &[&[f32]], v_rows: &[&[f32]]) -> Result<()> {
        if self.positions.len() + 1 > self.cap {
            return Err(Error::BufferOverflow {
                occupancy: self.positions.len(),
                incoming: 1,
                cap: self.cap,
            });
        }
        if let Some(&last) = self.positions.last() {
            if position <= last {
                return Err(Error::NonContiguousAppend {
                    expected: last + 1,
                    actual: position,
                });
            }
        }
        self.positions.push(position);
        for (layer, (k, v)) in k_rows.iter().zip(v_rows).enumerate() {
            self.layers[layer].k.push_row(k);
            self.layers[layer].v.push_row(v);
        }
        Ok(())
    }

    /// Drop entries with position >= `first_invalid`.
    pub fn truncate(&mut self, first_invalid: usize) {
        let keep = self.positions.partition_point(|&p| p < first_invalid);
        if keep == self.positions.len() {
            return;
        }
        self.positions.truncate(keep);
        for layer in &mut self.layers {
            layer.k = layer.k.slice_rows(0, keep);
            layer.v = layer.v.slice_rows(0, keep);
        }
    }

    pub fn clear(&mut self) {
        let n_layers = self.layers.len();
        let dim = self.layers.first().map_or(0, |l| l.k.cols());
        *self = TokenBuffer::new(n_layers, dim, self.cap);
    }

    pub fn layer_kv(&self, layer: usize) -> (&Tensor2D, &Tensor2D) {
        (&self.layers[layer].k, &self.layers[layer].v)
    }
}

/// Ordered view over a budgeted subset of the cache plus the buffer.
#[derive(Debug, Clone)]
pub struct PartialCacheView {
    pub sink_blocks: Vec<usize>,
    pub retrieval_blocks: Vec<usize>,
    pub local_blocks: Vec<usize>,
    pub buffer: TokenBuffer,
    pub budget: usize,
}

impl PartialCacheView {
    /// Block ids in segment order (sink, retrieval, local). Positions are
    /// strictly increasing across the concatenation by construction.
    pub fn block_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.sink_blocks
            .iter()
            .chain(&self.retrieval_blocks)
            .chain(&self.local_blocks)
            .copied()
    }

    /// Token count held by the block segments.
    pub fn block_token_count(&self, cache: &PagedKVCache) -> usize {
        self.block_ids()
            .map(|id| cache.block(0, id).filled())
            .sum()
    }

    /// Gathered (K, V) context for one layer: blocks then buffer.
    pub fn gather(&self, cache: &PagedKVCache, layer: usize) -> (Tensor2D, Tensor2D) {
        let (mut k, mut v) = cache.gather_blocks(layer, self.block_ids());
        let (bk, bv) = self.buffer.layer_kv(layer);
        for r in 0..bk.rows() {
            k.push_row(bk.row(r));
            v.push_row(bv.row(r));
        }
        (k, v)
    }

    /// Positions of the gathered context rows, in gather order.
    pub fn gather_positions(&self, cache: &PagedKVCache) -> Vec<usize> {
        let mut out = Vec::new();
        for id in self.block_ids() {
            out.extend(cache.block_positions(id));
        }
        out.extend_from_slice(self.buffer.positions());
        out
    }

    /// Total context rows visible through this view.
    pub fn context_len(&self, cache: &PagedKVCache) -> usize {
        self.block_token_count(cache) + self.buffer.occupancy()
    }
}

/// Per-query scores of a block summary: per-head scores summed over heads.
pub fn per_query_scores(
    queries: &Tensor2D,
    summary: &BlockSummary,
    n_heads: usize,
    variant: ScoreVariant,
) -> Result<Vec<f32>> {
    if queries.rows() == 0 {
        return Err(Error::EmptyInput("empty query set"));
    }
    let dim = summary.k_max.len();
    if queries.cols() != dim || dim % n_heads != 0 {
        return Err(Error::ShapeMismatch {
            context: "per_query_scores",
            expected: format!("queries of width {dim} divisible into {n_heads} heads"),
            actual: format!("{}", queries.cols()),
        });
    }
    let head_dim = dim / n_heads;
    let mut out = Vec::with_capacity(queries.rows());
    for r in 0..queries.rows() {
        let q = queries.row(r);
        let mut total = 0.0f64;
        for h in 0..n_heads {
            let lo = h * head_dim;
            let hi = lo + head_dim;
            match variant {
                ScoreVariant::AsWritten => {
                    let mut dot_max = 0.0f64;
                    let mut dot_min = 0.0f64;
                    for d in lo..hi {
                        dot_max += q[d] as f64 * summary.k_max[d] as f64;
                        dot_min += q[d] as f64 * summary.k_min[d] as f64;
                    }
                    total += dot_max.max(dot_min);
                }
                ScoreVariant::Elementwise => {
                    for d in lo..hi {
                        let a = q[d] as f64 * summary.k_max[d] as f64;
                        let b = q[d] as f64 * summary.k_min[d] as f64;
                        total += a.max(b);
                    }
                }
            }
        }
        out.push(total as f32);
    }
    Ok(out)
}

pub fn reduce_scores(per_query: &[f32], reduction: QueryReduction) -> f32 {
    match reduction {
        QueryReduction::Max => per_query.iter().copied().fold(f32::NEG_INFINITY, f32::max),
        QueryReduction::Mean => {
            (per_query.iter().map(|&s| s as f64).sum::<f64>() / per_query.len() as f64) as f32
        }
        QueryReduction::Last => *per_query.last().unwrap(),
    }
}

/// Importance of one block for a set of same-layer queries.
pub fn score_block(
    queries: &Tensor2D,
    summary: &BlockSummary,
    n_heads: usize,
    variant: ScoreVariant,
    reduction: QueryReduction,
) -> Result<f32> {
    let per_query = per_query_scores(queries, summary, n_heads, variant)?;
    Ok(reduce_scores(&per_query, reduction))
}

/// Selection parameters shared by `select_partial` and `refresh_partial`.
#[derive(Debug, Clone)]
pub struct SelectionParams {
    pub budget_tokens: usize,
    pub n_sink: usize,
    pub n_local: usize,
    pub buffer_cap: usize,
    pub variant: ScoreVariant,
    pub reduction: QueryReduction,
}

/// Build a partial view over `cache` for the given per-layer query sets.
///
/// Sink and local blocks are fixed; the middle blocks are ranked by their
/// reduced cross-layer score and the top `(budget - sink - local) / B` are
/// kept, ties broken toward the lower block id. The returned view has an
/// empty buffer.
pub fn select_partial(
    cache: &PagedKVCache,
    queries: &[Tensor2D],
    params: &SelectionParams,
) -> Result<PartialCacheView> {
    let block_size = cache.block_size();
    let floor = (params.n_sink + params.n_local) * block_size;
    if params.budget_tokens < floor {
        return Err(Error::BudgetTooSmall {
            budget: params.budget_tokens,
            minimum: floor,
        });
    }
    if queries.len() != cache.n_layers() {
        return Err(Error::ShapeMismatch {
            context: "select_partial queries",
            expected: format!("{} per-layer query sets", cache.n_layers()),
            actual: format!("{}", queries.len()),
        });
    }
    let n_blocks = cache.n_blocks();
    let sink_count = params.n_sink.min(n_blocks);
    let local_count = params.n_local.min(n_blocks - sink_count);
    let sink_blocks: Vec<usize> = (0..sink_count).collect();
    let local_blocks: Vec<usize> = (n_blocks - local_count..n_blocks).collect();
    let middle: Vec<usize> = (sink_count..n_blocks - local_count).collect();

    let sink_tokens: usize = sink_blocks.iter().map(|&b| cache.block(0, b).filled()).sum();
    let local_tokens: usize = local_blocks.iter().map(|&b| cache.block(0, b).filled()).sum();
    let retrieval_budget_blocks =
        params.budget_tokens.saturating_sub(sink_tokens + local_tokens) / block_size;

    let retrieval_blocks = if middle.len() <= retrieval_budget_blocks {
        middle
    } else {
        let m = queries[0].rows();
        let mut scored: Vec<(usize, f32)> = Vec::with_capacity(middle.len());
        for &idx in &middle {
            let mut totals = vec![0.0f64; m];
            for layer in 0..cache.n_layers() {
                let per_query = per_query_scores(
                    &queries[layer],
                    cache.summary(layer, idx),
                    cache.n_heads(),
                    params.variant,
                )?;
                if per_query.len() != m {
                    return Err(Error::ShapeMismatch {
                        context: "select_partial query counts",
                        expected: format!("{m}"),
                        actual: format!("{}", per_query.len()),
                    });
                }
                for (t, s) in totals.iter_mut().zip(per_query) {
                    *t += s as f64;
                }
            }
            let per_query: Vec<f32> = totals.into_iter().map(|t| t as f32).collect();
            scored.push((idx, reduce_scores(&per_query, params.reduction)));
        }
        // highest score first, lower block id wins ties
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut chosen: Vec<usize> = scored
            .into_iter()
            .take(retrieval_budget_blocks)
            .map(|(idx, _)| idx)
            .collect();
        chosen.sort_unstable();
        chosen
    };

    Ok(PartialCacheView {
        sink_blocks,
        retrieval_blocks,
        local_blocks,
        buffer: TokenBuffer::new(cache.n_layers(), cache.dim(), params.buffer_cap),
        budget: params.budget_tokens,
    })
}

/// Rebuild the view from an up-to-date cache, emptying the buffer.
///
/// Must only be called once the cache holds corrected rows for every
/// previously buffered position.
pub fn refresh_partial(
    cache: &PagedKVCache,
    view: &PartialCacheView,
    queries: &[Tensor2D],
    params: &SelectionParams,
) -> Result<PartialCacheView> {
    if let Some(end) = view.buffer.end_position() {
        if cache.len() <= end {
            return Err(Error::CacheLag {
                cache_len: cache.len(),
                required: end + 1,
            });
        }
    }
    select_partial(cache, queries, params)
}

/// Remove every entry at `first_invalid_position` and beyond from the full
/// cache, the view's buffer, and the draft cache.
pub fn evict_rejected(
    cache: &mut PagedKVCache,
    view: Option<&mut PartialCacheView>,
    draft_cache: Option<&mut PagedKVCache>,
    first_invalid_position: usize,
) -> Result<()> {
    if let Some(view) = &view {
        // block segments reference committed rows; cutting into them would
        // leave the view dangling
        let commit_floor = view
            .buffer
            .start_position()
            .unwrap_or_else(|| cache.len().min(first_invalid_position));
        if first_invalid_position < commit_floor {
            return Err(Error::EvictBeforeCommit {
                position: first_invalid_position,
                commit: commit_floor,
            });
        }
    }
    cache.truncate(first_invalid_position);
    if let Some(view) = view {
        view.buffer.truncate(first_invalid_position);
    }
    if let Some(draft) = draft_cache {
        draft.truncate(first_invalid_position);
    }
    Ok(())
}
