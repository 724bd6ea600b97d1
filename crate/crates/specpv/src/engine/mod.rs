//! Generation loop: chunked prefill, draft, mode selection, tree
//! verification in Full / Partial / Refresh modes, acceptance, eviction,
//! and per-step accounting.
//!
//! Sequence bookkeeping: the last emitted token is *pending*: it has been
//! chosen but its K/V has not been computed yet. Every verification step
//! therefore forwards `[pending] ++ candidates`; the pending row both
//! produces the logits that judge the root candidates and commits the
//! pending token's K/V. The committed length is `len(y) - 1`.
//!
//! During partial steps the full cache does not grow; the pending and
//! accepted rows go to the view's buffer instead, awaiting correction. A
//! refresh re-forwards the buffered tokens together with the new
//! candidates against the full cache, appends their corrected rows, and
//! rebuilds the partial view with that step's queries.
//!
//! Verification forwards stage rows without touching the stores; only rows
//! for the pending token and the accepted path are committed afterwards,
//! so rejected siblings never reach a cache. `evict_rejected` still runs
//! each step as the uniform rollback point for all three stores.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::drafter::{build_tree_mask, CandidateTree, Drafter, Sampling, TreeTemplate};
use crate::error::{Error, Result};
use crate::kvstore::offload::{modeled_step_time, OffloadCostModel, StepCost};
use crate::kvstore::partial::{
    evict_rejected, refresh_partial, select_partial, PartialCacheView, QueryReduction,
    ScoreVariant, SelectionParams,
};
use crate::kvstore::{PagedKVCache, DEFAULT_BLOCK_SIZE};
use crate::model::{
    FeatureBundle, ForwardOutput, FullCacheView, KvContext, StagedKv, TinyTransformer, Token,
};
use crate::numerics::rng::SeededRng;
use crate::numerics::{softmax, BoolMatrix, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifyMode {
    Full,
    Partial,
    Refresh,
}

/// Pick the verification mode for the next step.
///
/// Full while the sequence is shorter than the partial budget; Refresh to
/// initialize the partial view or when the buffered plus incoming tokens
/// would overflow the buffer; Partial otherwise.
pub fn select_mode(
    seq_len: usize,
    budget: usize,
    buffer_occupancy: usize,
    incoming_nodes: usize,
    buffer_cap: usize,
    partial_initialized: bool,
) -> VerifyMode {
    if seq_len < budget {
        VerifyMode::Full
    } else if !partial_initialized || buffer_occupancy + incoming_nodes > buffer_cap {
        VerifyMode::Refresh
    } else {
        VerifyMode::Partial
    }
}

/// Deterministic compute-time proxy used for modeled step times.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ComputeModel {
    pub flops_per_s: f64,
}

impl Default for ComputeModel {
    fn default() -> Self {
        // toy accelerator; absolute value only matters relative to transfers
        ComputeModel { flops_per_s: 1e11 }
    }
}

impl ComputeModel {
    /// Rough forward-pass flop count: projections plus attention over the
    /// visible rows, per layer, plus the output head.
    pub fn step_flops(
        &self,
        input_rows: usize,
        visible_rows: usize,
        dim: usize,
        ffn_dim: usize,
        vocab: usize,
        n_layers: usize,
    ) -> f64 {
        let proj = 2.0 * input_rows as f64 * dim as f64 * (4.0 * dim as f64 + 3.0 * ffn_dim as f64);
        let attn = 4.0 * input_rows as f64 * (visible_rows + input_rows) as f64 * dim as f64;
        let head = 2.0 * input_rows as f64 * dim as f64 * vocab as f64;
        (proj + attn) * n_layers as f64 + head
    }

    pub fn seconds(&self, flops: f64) -> f64 {
        flops / self.flops_per_s
    }
}

#[derive(Debug, Clone)]
pub struct GenerationConfig {
    /// Hard cap on the total sequence length.
    pub max_length: usize,
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    pub seed: u64,
    /// Partial-verification token budget; `usize::MAX` keeps every step on
    /// the full cache.
    pub budget: usize,
    /// Sink and local segment sizes, in blocks.
    pub n_sink: usize,
    pub n_local: usize,
    /// Buffer capacity; defaults to template nodes + 1 + BUFFER_MARGIN.
    pub buffer_cap: Option<usize>,
    pub block_size: usize,
    pub score_variant: ScoreVariant,
    pub reduction: QueryReduction,
    pub template: TreeTemplate,
    pub chunk_size: usize,
    pub eos_token: Option<Token>,
}

/// Extra buffer slots beyond one verification step's tokens.
pub const BUFFER_MARGIN: usize = 20;

impl GenerationConfig {
    pub fn greedy(template: TreeTemplate) -> Self {
        GenerationConfig {
            max_length: 1 << 16,
            max_new_tokens: 64,
            sampling: Sampling::Greedy,
            seed: 0,
            budget: usize::MAX,
            n_sink: 2,
            n_local: 4,
            buffer_cap: None,
            block_size: DEFAULT_BLOCK_SIZE,
            score_variant: ScoreVariant::AsWritten,
            reduction: QueryReduction::Mean,
            template,
            chunk_size: 64,
            eos_token: None,
        }
    }

    /// One verification step moves the pending token plus every tree node.
    pub fn tokens_per_step(&self) -> usize {
        self.template.len() + 1
    }

    pub fn effective_buffer_cap(&self) -> usize {
        self.buffer_cap
            .unwrap_or(self.tokens_per_step() + BUFFER_MARGIN)
    }

    pub fn validate(&self) -> Result<()> {
        if self.template.is_empty() {
            return Err(Error::InvalidConfig("empty tree template".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::InvalidConfig("chunk_size must be >= 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::InvalidConfig("block_size must be >= 1".into()));
        }
        let floor = (self.n_sink + self.n_local) * self.block_size;
        if self.budget != usize::MAX && self.budget < floor {
            return Err(Error::InvalidConfig(format!(
                "budget {} below sink+local floor {floor}",
                self.budget
            )));
        }
        if self.effective_buffer_cap() < self.tokens_per_step() {
            return Err(Error::InvalidConfig(format!(
                "buffer cap {} cannot hold one step of {} tokens",
                self.effective_buffer_cap(),
                self.tokens_per_step()
            )));
        }
        if let Sampling::Temperature(t) = self.sampling {
            if !(t > 0.0) {
                return Err(Error::InvalidConfig("temperature must be > 0".into()));
            }
            if !self.template.is_chain() {
                return Err(Error::Sampling(
                    "stochastic verification requires a chain template".into(),
                ));
            }
        }
        Ok(())
    }

    fn selection_params(&self) -> SelectionParams {
        SelectionParams {
            budget_tokens: self.budget,
            n_sink: self.n_sink,
            n_local: self.n_local,
            buffer_cap: self.effective_buffer_cap(),
            variant: self.score_variant,
            reduction: self.reduction,
        }
    }
}

/// Accounting for one verification step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub mode: VerifyMode,
    pub drafted: usize,
    pub accepted: usize,
    pub wall_draft_s: f64,
    pub wall_verify_s: f64,
    pub modeled_draft_s: f64,
    pub modeled_verify_s: f64,
    pub cumulative_len: usize,
    pub full_bytes_touched: u64,
    /// Rows fed through the verification forward.
    pub tokens_in_step: usize,
    /// Context rows visible to the verification attention.
    pub context_rows: usize,
}

/// Index of the largest value, ties toward the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn choose_token(logits: &[f32], sampling: Sampling, rng: &mut SeededRng) -> Result<Token> {
    match sampling {
        Sampling::Greedy => Ok(argmax(logits) as Token),
        Sampling::Temperature(t) => {
            let scaled: Vec<f32> = logits.iter().map(|&l| l / t).collect();
            let dist = softmax(&scaled)?;
            Ok(rng.categorical(&dist)? as Token)
        }
    }
}

/// Outcome of evaluating one verification step's logits.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Accepted node indices, root to deepest.
    pub path: Vec<usize>,
    /// Accepted tokens followed by the bonus (or resampled) token.
    pub emitted: Vec<Token>,
    pub accepted: usize,
}

/// Accept or reject candidates given verification logits.
///
/// `logits` has one row per tree node plus a leading row for the tree's
/// parent (the pending token). Greedy: walk from the root, accepting a node
/// iff its token is the argmax of its parent's row; the bonus token is the
/// argmax at the deepest accepted row. Stochastic (chain templates only):
/// accept node `k` with probability `min(1, p/q)`; on rejection draw from
/// `normalize(max(0, p - q))` and stop.
pub fn post_evaluate(
    tree: &CandidateTree,
    logits: &Tensor2D,
    sampling: Sampling,
    rng: &mut SeededRng,
) -> Result<Evaluation> {
    let n = tree.len();
    if logits.rows() != n + 1 {
        return Err(Error::ShapeMismatch {
            context: "post_evaluate logits",
            expected: format!("{} rows", n + 1),
            actual: format!("{}", logits.rows()),
        });
    }
    match sampling {
        Sampling::Greedy => {
            let mut path = Vec::new();
            let mut emitted = Vec::new();
            let mut cur_row = 0usize;
            let mut cur_node: Option<usize> = None;
            loop {
                let pick = argmax(logits.row(cur_row)) as Token;
                let child = (0..n).find(|&i| {
                    tree.template.parent(i) == cur_node && tree.tokens[i] == pick
                });
                emitted.push(pick);
                match child {
                    Some(i) => {
                        path.push(i);
                        cur_row = i + 1;
                        cur_node = Some(i);
                    }
                    None => break,
                }
            }
            let accepted = path.len();
            Ok(Evaluation {
                path,
                emitted,
                accepted,
            })
        }
        Sampling::Temperature(temp) => {
            if !tree.template.is_chain() {
                return Err(Error::Sampling(
                    "stochastic verification requires a chain template".into(),
                ));
            }
            let dists = tree.draft_dists.as_ref().ok_or_else(|| {
                Error::Sampling("candidate tree lacks draft distributions".into())
            })?;
            let mut path = Vec::new();
            let mut emitted = Vec::new();
            for k in 0..n {
                let scaled: Vec<f32> = logits.row(k).iter().map(|&l| l / temp).collect();
                let p = softmax(&scaled)?;
                let q = &dists[k];
                let tok = tree.tokens[k] as usize;
                if q[tok] <= 0.0 {
                    return Err(Error::Sampling(format!(
                        "drafted token {tok} has zero draft probability"
                    )));
                }
                let ratio = (p[tok] as f64 / q[tok] as f64).min(1.0);
                if rng.uniform() < ratio {
                    path.push(k);
                    emitted.push(tree.tokens[k]);
                } else {
                    let residual: Vec<f32> = p
                        .iter()
                        .zip(q)
                        .map(|(&pi, &qi)| (pi - qi).max(0.0))
                        .collect();
                    let z = rng.categorical(&residual)? as Token;
                    emitted.push(z);
                    let accepted = path.len();
                    return Ok(Evaluation {
                        path,
                        emitted,
                        accepted,
                    });
                }
            }
            // every candidate accepted: bonus from the deepest row
            let scaled: Vec<f32> = logits.row(n).iter().map(|&l| l / temp).collect();
            let p = softmax(&scaled)?;
            let bonus = rng.categorical(&p)? as Token;
            emitted.push(bonus);
            let accepted = path.len();
            Ok(Evaluation {
                path,
                emitted,
                accepted,
            })
        }
    }
}

/// Mask for a verification forward: `n_prefix` causally chained tokens
/// (buffered tokens plus the pending one) followed by the tree nodes.
pub fn verification_mask(
    context_len: usize,
    n_prefix: usize,
    template: &TreeTemplate,
) -> Result<BoolMatrix> {
    let n_nodes = template.len();
    let rows = n_prefix + n_nodes;
    let cols = context_len + rows;
    let mut mask = BoolMatrix::new(rows, cols, false);
    for i in 0..n_prefix {
        for j in 0..context_len + i + 1 {
            mask.set(i, j, true);
        }
    }
    let tree_mask = build_tree_mask(template, context_len + n_prefix)?;
    for i in 0..n_nodes {
        for j in 0..cols {
            mask.set(n_prefix + i, j, tree_mask.get(i, j));
        }
    }
    Ok(mask)
}

/// Context over the four-segment view; staged rows are destined for the
/// buffer, so their count is checked against the buffer cap up front.
struct PartialCtx<'c> {
    cache: &'c PagedKVCache,
    view: &'c PartialCacheView,
    staged: StagedKv,
}

impl<'c> PartialCtx<'c> {
    fn new(cache: &'c PagedKVCache, view: &'c PartialCacheView) -> Self {
        PartialCtx {
            cache,
            view,
            staged: StagedKv::new(cache.n_layers(), cache.dim()),
        }
    }
}

impl KvContext for PartialCtx<'_> {
    fn context_len(&self) -> usize {
        self.view.context_len(self.cache)
    }

    fn gather(&self, layer: usize) -> Result<(Tensor2D, Tensor2D)> {
        Ok(self.view.gather(self.cache, layer))
    }

    fn stage(&mut self, layer: usize, position: usize, k: &[f32], v: &[f32]) -> Result<()> {
        if layer == 0 {
            let incoming = self.staged.rows() + 1;
            let cap = self.view.buffer.cap();
            if self.view.buffer.occupancy() + incoming > cap {
                return Err(Error::BufferOverflow {
                    occupancy: self.view.buffer.occupancy(),
                    incoming,
                    cap,
                });
            }
        }
        self.staged.push(layer, position, k, v);
        Ok(())
    }
}

/// Result of a verification forward, before acceptance.
#[derive(Debug, Clone)]
pub struct VerifyOutput {
    pub fwd: ForwardOutput,
    pub staged: StagedKv,
    /// Buffered tokens re-forwarded ahead of the pending token (Refresh).
    pub n_prefix: usize,
    pub full_bytes_touched: u64,
    pub context_rows: usize,
    pub modeled_compute_s: f64,
}

/// Summary of one applied step.
#[derive(Debug, Clone)]
pub struct StepSummary {
    pub mode: VerifyMode,
    pub emitted: Vec<Token>,
    pub accepted: usize,
    pub finished: bool,
}

/// Populate the full cache and the drafter with the prompt; returns the
/// final prompt token's taps and the first generated token.
pub fn chunk_prefill(
    model: &TinyTransformer,
    drafter: &mut dyn Drafter,
    prompt: &[Token],
    chunk_size: usize,
    cache: &mut PagedKVCache,
    sampling: Sampling,
    rng: &mut SeededRng,
) -> Result<(FeatureBundle, Token)> {
    let (taps, last_logits) = crate::model::prefill_cache(model, cache, prompt, chunk_size)?;
    drafter.prefill(model, prompt, &taps)?;
    let first = choose_token(&last_logits, sampling, rng)?;
    Ok((taps.last().expect("nonempty prompt").clone(), first))
}

/// One generation session; owns its caches, shares the immutable model.
pub struct GenerationSession<'m> {
    model: &'m TinyTransformer,
    drafter: Box<dyn Drafter>,
    cfg: GenerationConfig,
    cost: OffloadCostModel,
    compute: ComputeModel,
    rng: SeededRng,
    y: Vec<Token>,
    prompt_len: usize,
    full: PagedKVCache,
    view: Option<PartialCacheView>,
    pending_feats: FeatureBundle,
    records: Vec<StepRecord>,
    finished: bool,
    prefill_wall_s: f64,
    decode_wall_s: f64,
}

impl<'m> GenerationSession<'m> {
    pub fn new(
        model: &'m TinyTransformer,
        mut drafter: Box<dyn Drafter>,
        prompt: &[Token],
        cfg: GenerationConfig,
        cost: OffloadCostModel,
        compute: ComputeModel,
    ) -> Result<Self> {
        cfg.validate()?;
        if prompt.is_empty() {
            return Err(Error::EmptyInput("empty prompt"));
        }
        if prompt.len() + 1 > cfg.max_length {
            return Err(Error::InvalidConfig(format!(
                "prompt of {} tokens exceeds max length {}",
                prompt.len(),
                cfg.max_length
            )));
        }
        let mcfg = model.config();
        let mut full = PagedKVCache::new(mcfg.n_layers, mcfg.n_heads, mcfg.head_dim, cfg.block_size);
        let mut rng = SeededRng::new(cfg.seed);
        let t0 = Instant::now();
        let (pending_feats, first) = chunk_prefill(
            model,
            drafter.as_mut(),
            prompt,
            cfg.chunk_size,
            &mut full,
            cfg.sampling,
            &mut rng,
        )?;
        let prefill_wall_s = t0.elapsed().as_secs_f64();
        let mut y = prompt.to_vec();
        y.push(first);
        let finished = cfg.eos_token == Some(first);
        Ok(GenerationSession {
            model,
            drafter,
            cfg,
            cost,
            compute,
            rng,
            y,
            prompt_len: prompt.len(),
            full,
            view: None,
            pending_feats,
            records: Vec::new(),
            finished,
            prefill_wall_s,
            decode_wall_s: 0.0,
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.y
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<StepRecord> {
        self.records
    }

    pub fn full_cache(&self) -> &PagedKVCache {
        &self.full
    }

    pub fn view(&self) -> Option<&PartialCacheView> {
        self.view.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Tokens whose K/V is owed to a cache: everything but the pending one.
    pub fn committed_len(&self) -> usize {
        self.y.len() - 1
    }

    pub fn drafter_committed_len(&self) -> usize {
        self.drafter.committed_len()
    }

    pub fn prefill_wall_s(&self) -> f64 {
        self.prefill_wall_s
    }

    pub fn decode_wall_s(&self) -> f64 {
        self.decode_wall_s
    }

    pub fn buffer_occupancy(&self) -> usize {
        self.view.as_ref().map_or(0, |v| v.buffer.occupancy())
    }

    /// Draft a candidate tree for the current pending token.
    pub fn draft(&mut self) -> Result<CandidateTree> {
        let last = *self.y.last().expect("nonempty sequence");
        self.drafter.tree_draft(
            self.model,
            &self.pending_feats,
            last,
            &self.cfg.template,
            self.cfg.sampling,
            &mut self.rng,
            self.cfg.max_length.saturating_sub(self.y.len()),
        )
    }

    pub fn next_mode(&self) -> VerifyMode {
        select_mode(
            self.y.len(),
            self.cfg.budget,
            self.buffer_occupancy(),
            self.cfg.tokens_per_step(),
            self.cfg.effective_buffer_cap(),
            self.view.is_some(),
        )
    }

    /// Run the verification forward for `tree` under `mode` without
    /// touching any store; commit happens in `apply`.
    pub fn verify(&self, tree: &CandidateTree, mode: VerifyMode) -> Result<VerifyOutput> {
        match mode {
            VerifyMode::Partial => {
                let view = self.view.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("partial verification before initialization".into())
                })?;
                self.verify_against_view(tree, view)
            }
            VerifyMode::Full | VerifyMode::Refresh => {
                let pending_pos = self.y.len() - 1;
                let full_len = self.full.len();
                // buffered tokens are re-forwarded ahead of the pending one
                let prefix: Vec<Token> = self.y[full_len..pending_pos].to_vec();
                let mut tokens = prefix.clone();
                tokens.push(self.y[pending_pos]);
                tokens.extend_from_slice(&tree.tokens);
                let mut positions: Vec<usize> = (full_len..=pending_pos).collect();
                positions.extend_from_slice(&tree.positions);
                let mask = verification_mask(full_len, prefix.len() + 1, &tree.template)?;
                let mut ctx = FullCacheView::new(&self.full);
                let fwd = self.model.forward_step(&tokens, &positions, &mut ctx, Some(&mask))?;
                let bytes = full_len as u64 * self.full.bytes_per_token();
                let mcfg = self.model.config();
                let compute = self.compute.seconds(self.compute.step_flops(
                    tokens.len(),
                    full_len,
                    mcfg.dim,
                    mcfg.ffn_dim,
                    mcfg.vocab_size,
                    mcfg.n_layers,
                ));
                Ok(VerifyOutput {
                    fwd,
                    staged: ctx.staged,
                    n_prefix: prefix.len(),
                    full_bytes_touched: bytes,
                    context_rows: full_len,
                    modeled_compute_s: compute,
                })
            }
        }
    }

    /// Partial verification against an explicit view (normally the
    /// session's own; exposed for equivalence checks).
    pub fn verify_against_view(
        &self,
        tree: &CandidateTree,
        view: &PartialCacheView,
    ) -> Result<VerifyOutput> {
        let pending_pos = self.y.len() - 1;
        let mut tokens = vec![self.y[pending_pos]];
        tokens.extend_from_slice(&tree.tokens);
        let mut positions = vec![pending_pos];
        positions.extend_from_slice(&tree.positions);
        let ctx_len = view.context_len(&self.full);
        let mask = verification_mask(ctx_len, 1, &tree.template)?;
        let mut ctx = PartialCtx::new(&self.full, view);
        let fwd = self.model.forward_step(&tokens, &positions, &mut ctx, Some(&mask))?;
        let mcfg = self.model.config();
        let compute = self.compute.seconds(self.compute.step_flops(
            tokens.len(),
            ctx_len,
            mcfg.dim,
            mcfg.ffn_dim,
            mcfg.vocab_size,
            mcfg.n_layers,
        ));
        Ok(VerifyOutput {
            fwd,
            staged: ctx.staged,
            n_prefix: 0,
            full_bytes_touched: 0,
            context_rows: ctx_len,
            modeled_compute_s: compute,
        })
    }

    /// Evaluate, commit accepted rows, evict, and record the step.
    pub fn apply(
        &mut self,
        tree: &CandidateTree,
        mode: VerifyMode,
        v: VerifyOutput,
        wall_draft_s: f64,
        wall_verify_s: f64,
    ) -> Result<StepSummary> {
        let pending_pos = self.y.len() - 1;
        let n_prefix = v.n_prefix;
        // rows n_prefix.. hold the pending token and the tree nodes
        let eval_logits = v.fwd.logits.slice_rows(n_prefix, v.fwd.logits.rows());
        let eval = post_evaluate(tree, &eval_logits, self.cfg.sampling, &mut self.rng)?;

        // rows to keep: re-forwarded buffer prefix, pending, accepted path
        let mut keep: Vec<usize> = (0..n_prefix + 1).collect();
        keep.extend(eval.path.iter().map(|&i| n_prefix + 1 + i));
        let committed_rows = v.staged.select_rows(&keep);

        match mode {
            VerifyMode::Full | VerifyMode::Refresh => {
                for layer in 0..self.full.n_layers() {
                    let (k, vv) = committed_rows.layer(layer);
                    self.full
                        .append_kv(layer, k, vv, committed_rows.positions())?;
                }
            }
            VerifyMode::Partial => {
                let view = self.view.as_mut().expect("partial mode has a view");
                let n_layers = self.full.n_layers();
                for (row, &pos) in committed_rows.positions().iter().enumerate() {
                    let mut k_rows = Vec::with_capacity(n_layers);
                    let mut v_rows = Vec::with_capacity(n_layers);
                    for layer in 0..n_layers {
                        let (k, vv) = committed_rows.layer(layer);
                        k_rows.push(k.row(row));
                        v_rows.push(vv.row(row));
                    }
                    view.buffer.push(pos, &k_rows, &v_rows)?;
                }
            }
        }

        let first_invalid = pending_pos + 1 + eval.accepted;
        evict_rejected(
            &mut self.full,
            self.view.as_mut(),
            self.drafter.draft_cache_mut(),
            first_invalid,
        )?;

        if mode == VerifyMode::Refresh {
            let params = self.cfg.selection_params();
            let new_view = match &self.view {
                Some(old) => refresh_partial(&self.full, old, &v.fwd.queries, &params)?,
                None => select_partial(&self.full, &v.fwd.queries, &params)?,
            };
            self.view = Some(new_view);
        }

        // draft slots for the pending token and the accepted path, each
        // paired with its predecessor's taps
        let mut commit_tokens = vec![self.y[pending_pos]];
        let mut pred_taps = vec![self.pending_feats.clone()];
        let mut parent_row = n_prefix; // pending row
        for &node in &eval.path {
            commit_tokens.push(tree.tokens[node]);
            pred_taps.push(v.fwd.taps[parent_row].clone());
            parent_row = n_prefix + 1 + node;
        }
        self.drafter.commit(self.model, &commit_tokens, &pred_taps)?;
        self.pending_feats = v.fwd.taps[parent_row].clone();

        self.y.extend_from_slice(&eval.emitted);

        let mcfg = self.model.config();
        // drafting ran against the pre-step committed context
        let draft_flops = self.compute.step_flops(
            tree.len() + 1,
            pending_pos,
            mcfg.dim,
            mcfg.ffn_dim,
            mcfg.vocab_size,
            1,
        );
        let step_cost = StepCost {
            tokens_in_step: n_prefix + 1 + tree.len(),
            full_cache_bytes_touched: v.full_bytes_touched,
            layer_transfers: if v.full_bytes_touched > 0 {
                mcfg.n_layers
            } else {
                0
            },
        };
        self.records.push(StepRecord {
            mode,
            drafted: tree.len(),
            accepted: eval.accepted,
            wall_draft_s,
            wall_verify_s,
            modeled_draft_s: self.compute.seconds(draft_flops),
            modeled_verify_s: modeled_step_time(&step_cost, &self.cost, v.modeled_compute_s),
            cumulative_len: self.y.len(),
            full_bytes_touched: v.full_bytes_touched,
            tokens_in_step: n_prefix + 1 + tree.len(),
            context_rows: v.context_rows,
        });

        if self.y.len() - self.prompt_len >= self.cfg.max_new_tokens {
            self.finished = true;
        }
        if let Some(eos) = self.cfg.eos_token {
            if let Some(hit) = self.y[pending_pos + 1..].iter().position(|&t| t == eos) {
                self.y.truncate(pending_pos + 1 + hit + 1);
                self.finished = true;
            }
        }

        Ok(StepSummary {
            mode,
            emitted: eval.emitted,
            accepted: eval.accepted,
            finished: self.finished,
        })
    }

    /// One draft-verify-accept step.
    pub fn step(&mut self) -> Result<StepSummary> {
        if self.finished {
            return Err(Error::InvalidConfig("generation already finished".into()));
        }
        if self.y.len() + self.cfg.template.max_depth() + 2 > self.cfg.max_length {
            self.finished = true;
            return Ok(StepSummary {
                mode: VerifyMode::Full,
                emitted: Vec::new(),
                accepted: 0,
                finished: true,
            });
        }
        let t0 = Instant::now();
        let tree = self.draft()?;
        let wall_draft = t0.elapsed().as_secs_f64();
        let mode = self.next_mode();
        let t1 = Instant::now();
        let v = self.verify(&tree, mode)?;
        let summary = self.apply(&tree, mode, v, wall_draft, t1.elapsed().as_secs_f64())?;
        self.decode_wall_s += t0.elapsed().as_secs_f64();
        Ok(summary)
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.finished {
            self.step()?;
        }
        Ok(())
    }
}

/// Finished run with accounting.
#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub tokens: Vec<Token>,
    pub records: Vec<StepRecord>,
    pub prefill_wall_s: f64,
    pub decode_wall_s: f64,
}

impl GenerationOutcome {
    pub fn new_tokens(&self, prompt_len: usize) -> usize {
        self.tokens.len() - prompt_len
    }

    pub fn decode_modeled_s(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.modeled_draft_s + r.modeled_verify_s)
            .sum()
    }
}

/// Run the full generation loop.
pub fn generate(
    model: &TinyTransformer,
    drafter: Box<dyn Drafter>,
    prompt: &[Token],
    cfg: GenerationConfig,
    cost: OffloadCostModel,
    compute: ComputeModel,
) -> Result<GenerationOutcome> {
    let mut session = GenerationSession::new(model, drafter, prompt, cfg, cost, compute)?;
    session.run()?;
    Ok(GenerationOutcome {
        tokens: session.y.clone(),
        prefill_wall_s: session.prefill_wall_s,
        decode_wall_s: session.decode_wall_s,
        records: session.records,
    })
}

/// Plain one-token-at-a-time decoding over the full cache; the speedup
/// denominator.
pub fn autoregressive_generate(
    model: &TinyTransformer,
    prompt: &[Token],
    cfg: &GenerationConfig,
    cost: &OffloadCostModel,
    compute: &ComputeModel,
) -> Result<GenerationOutcome> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("empty prompt"));
    }
    if prompt.len() + 1 > cfg.max_length {
        return Err(Error::InvalidConfig(format!(
            "prompt of {} tokens exceeds max length {}",
            prompt.len(),
            cfg.max_length
        )));
    }
    let mcfg = model.config();
    let mut cache = PagedKVCache::new(mcfg.n_layers, mcfg.n_heads, mcfg.head_dim, cfg.block_size);
    let mut rng = SeededRng::new(cfg.seed);
    let t0 = Instant::now();
    let (_, last_logits) = crate::model::prefill_cache(model, &mut cache, prompt, cfg.chunk_size)?;
    let prefill_wall_s = t0.elapsed().as_secs_f64();
    let mut y = prompt.to_vec();
    y.push(choose_token(&last_logits, cfg.sampling, &mut rng)?);
    let mut records = Vec::new();
    let t1 = Instant::now();
    while y.len() - prompt.len() < cfg.max_new_tokens
        && cfg.eos_token != Some(*y.last().unwrap())
        && y.len() < cfg.max_length
    {
        let pending_pos = y.len() - 1;
        let full_len = cache.len();
        let staged = {
            let mut ctx = FullCacheView::new(&cache);
            let out = model.forward_step(&[y[pending_pos]], &[pending_pos], &mut ctx, None)?;
            y.push(choose_token(out.logits.row(0), cfg.sampling, &mut rng)?);
            ctx.staged
        };
        for layer in 0..cache.n_layers() {
            let (k, v) = staged.layer(layer);
            cache.append_kv(layer, k, v, staged.positions())?;
        }
        let bytes = full_len as u64 * cache.bytes_per_token();
        let compute_s = compute.seconds(compute.step_flops(
            1,
            full_len,
            mcfg.dim,
            mcfg.ffn_dim,
            mcfg.vocab_size,
            mcfg.n_layers,
        ));
        let step_cost = StepCost {
            tokens_in_step: 1,
            full_cache_bytes_touched: bytes,
            layer_transfers: mcfg.n_layers,
        };
        records.push(StepRecord {
            mode: VerifyMode::Full,
            drafted: 0,
            accepted: 0,
            wall_draft_s: 0.0,
            wall_verify_s: 0.0,
            modeled_draft_s: 0.0,
            modeled_verify_s: modeled_step_time(&step_cost, cost, compute_s),
            cumulative_len: y.len(),
            full_bytes_touched: bytes,
            tokens_in_step: 1,
            context_rows: full_len,
        });
    }
    Ok(GenerationOutcome {
        tokens: y,
        records,
        prefill_wall_s,
        decode_wall_s: t1.elapsed().as_secs_f64(),
    })
}
