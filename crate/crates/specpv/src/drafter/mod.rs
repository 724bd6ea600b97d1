//! Draft-side machinery: tree templates, the feature-reuse draft module,
//! and mock drafters with controllable agreement.
//!
//! The draft module is a single decoder layer fed with a fusion of the
//! target model's tapped hidden states. To propose the token after `x_i`,
//! it combines the features of `x_{i-1}` with the embedding of `x_i`; for
//! tree nodes past the first level it reuses its own hidden state as the
//! feature, so drafting never runs the target model. The output head is
//! shared with the target.
//!
//! Mock drafters exist to exercise the acceptance machinery:
//! `MockIdentical` wraps the target itself (every greedy chain draft is
//! accepted), `MockNoisy(p)` copies the target's greedy token with
//! probability `p`, and `MockRandom` proposes uniformly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvstore::{PagedKVCache, DEFAULT_BLOCK_SIZE};
use crate::model::{
    causal_mask, prefill_cache, FeatureBundle, KvContext, LayerWeights, StagedKv,
    TinyTransformer, Token,
};
use crate::numerics::rng::SeededRng;
use crate::numerics::{softmax, BoolMatrix, Tensor2D};

/// Token-selection rule for drafting and verification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sampling {
    Greedy,
    /// Stochastic sampling at the given temperature (> 0).
    Temperature(f32),
}

/// Shape of a candidate tree: parent links only, no tokens.
///
/// `parent[i] = None` marks a root node, whose parent is the last emitted
/// token. Parents always precede children; depth is 0 at the roots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeTemplate {
    parents: Vec<Option<usize>>,
    depths: Vec<usize>,
}

impl TreeTemplate {
    pub fn from_parents(parents: Vec<Option<usize>>) -> Result<Self> {
        if parents.is_empty() {
            return Err(Error::Template("template has no nodes".into()));
        }
        let mut depths = Vec::with_capacity(parents.len());
        for (i, p) in parents.iter().enumerate() {
            match p {
                None => depths.push(0),
                Some(pi) => {
                    if *pi >= i {
                        return Err(Error::Template(format!(
                            "node {i} has forward or cyclic parent {pi}"
                        )));
                    }
                    depths.push(depths[*pi] + 1);
                }
            }
        }
        Ok(TreeTemplate { parents, depths })
    }

    /// Single path of `depth` nodes.
    pub fn chain(depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Template("chain depth must be >= 1".into()));
        }
        let parents = (0..depth)
            .map(|i| if i == 0 { None } else { Some(i - 1) })
            .collect();
        TreeTemplate::from_parents(parents)
    }

    /// Full binary tree with `depth` levels (2^depth - 1 nodes).
    pub fn binary(depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Template("binary depth must be >= 1".into()));
        }
        let mut parents = vec![None];
        let mut level: Vec<usize> = vec![0];
        for _ in 1..depth {
            let mut next = Vec::new();
            for &p in &level {
                for _ in 0..2 {
                    parents.push(Some(p));
                    next.push(parents.len() - 1);
                }
            }
            level = next;
        }
        TreeTemplate::from_parents(parents)
    }

    /// Fixed 10-node branching layout: three roots, then two children of the
    /// best node at each of the next two levels, then one. Used for greedy
    /// runs.
    pub fn eagle_like() -> Self {
        TreeTemplate::from_parents(vec![
            None,
            None,
            None,
            Some(0),
            Some(0),
            Some(1),
            Some(3),
            Some(3),
            Some(4),
            Some(6),
        ])
        .expect("static template")
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parents[i]
    }

    pub fn depth_of(&self, i: usize) -> usize {
        self.depths[i]
    }

    /// Deepest node depth (0-based).
    pub fn max_depth(&self) -> usize {
        self.depths.iter().copied().max().unwrap_or(0)
    }

    pub fn is_chain(&self) -> bool {
        self.parents
            .iter()
            .enumerate()
            .all(|(i, p)| (i == 0 && p.is_none()) || *p == Some(i - 1))
    }

    /// Rank of node `i` among the children of its parent, in node order.
    pub fn sibling_rank(&self, i: usize) -> usize {
        (0..i).filter(|&j| self.parents[j] == self.parents[i]).count()
    }

    /// Serialized form for config files: -1 marks a root.
    pub fn to_parent_list(&self) -> Vec<i64> {
        self.parents
            .iter()
            .map(|p| p.map_or(-1, |v| v as i64))
            .collect()
    }

    pub fn from_parent_list(list: &[i64]) -> Result<Self> {
        let parents = list
            .iter()
            .map(|&v| {
                if v < 0 {
                    Ok(None)
                } else {
                    Ok(Some(v as usize))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        TreeTemplate::from_parents(parents)
    }
}

/// Attention mask for the tree nodes alone: `[N_t x (context_len + N_t)]`.
/// Node rows admit the whole context, their ancestors, and themselves.
pub fn build_tree_mask(template: &TreeTemplate, context_len: usize) -> Result<BoolMatrix> {
    let n = template.len();
    let mut mask = BoolMatrix::new(n, context_len + n, false);
    for i in 0..n {
        for j in 0..context_len {
            mask.set(i, j, true);
        }
        mask.set(i, context_len + i, true);
        let mut p = template.parent(i);
        while let Some(pi) = p {
            mask.set(i, context_len + pi, true);
            p = template.parent(pi);
        }
    }
    Ok(mask)
}

/// Drafted candidate tokens laid over a template.
#[derive(Debug, Clone)]
pub struct CandidateTree {
    pub template: TreeTemplate,
    pub tokens: Vec<Token>,
    /// Absolute position per node: committed length + node depth.
    pub positions: Vec<usize>,
    /// Draft probability of each chosen token.
    pub draft_probs: Vec<f32>,
    /// Full draft distribution per node; present for stochastic runs, where
    /// the residual-resampling rule needs it.
    pub draft_dists: Option<Vec<Vec<f32>>>,
}

impl CandidateTree {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Concatenate tap features, project them down, and add the token
/// embedding. There is no bias, so zero inputs give zero output.
pub fn fuse_features(
    fusion: &Tensor2D,
    taps: &FeatureBundle,
    token_embedding: &[f32],
) -> Result<Vec<f32>> {
    if taps.features.len() != fusion.rows() {
        return Err(Error::ShapeMismatch {
            context: "fuse_features",
            expected: format!("{} tap values", fusion.rows()),
            actual: format!("{}", taps.features.len()),
        });
    }
    let mut out = crate::numerics::vec_matmul(&taps.features, fusion)?;
    if out.len() != token_embedding.len() {
        return Err(Error::ShapeMismatch {
            context: "fuse_features embedding",
            expected: format!("{}", out.len()),
            actual: format!("{}", token_embedding.len()),
        });
    }
    for (o, &e) in out.iter_mut().zip(token_embedding) {
        *o += e;
    }
    Ok(out)
}

/// A draft-token proposer driving one generation session.
pub trait Drafter {
    /// Synchronize with the prompt. `prompt_taps` holds the target's tap
    /// features for every prompt token.
    fn prefill(
        &mut self,
        model: &TinyTransformer,
        prompt: &[Token],
        prompt_taps: &[FeatureBundle],
    ) -> Result<()>;

    /// Propose a candidate tree following `last_token`. `features` are the
    /// taps of the last token that went through the target model (the
    /// predecessor of `last_token`). Read-only with respect to the draft
    /// cache; `remaining` is the room left before the length cap.
    fn tree_draft(
        &self,
        model: &TinyTransformer,
        features: &FeatureBundle,
        last_token: Token,
        template: &TreeTemplate,
        sampling: Sampling,
        rng: &mut SeededRng,
        remaining: usize,
    ) -> Result<CandidateTree>;

    /// Extend the draft cache with newly committed tokens. `pred_taps[i]`
    /// holds the tap features of `tokens[i]`'s predecessor.
    fn commit(
        &mut self,
        model: &TinyTransformer,
        tokens: &[Token],
        pred_taps: &[FeatureBundle],
    ) -> Result<()>;

    /// Tokens the draft state currently covers.
    fn committed_len(&self) -> usize;

    fn draft_cache_mut(&mut self) -> Option<&mut PagedKVCache>;

    fn name(&self) -> &'static str;
}

fn check_remaining(template: &TreeTemplate, remaining: usize) -> Result<()> {
    // a fully accepted pass commits max_depth + 1 candidates plus a bonus
    let needed = template.max_depth() + 2;
    if needed > remaining {
        return Err(Error::Template(format!(
            "template needs room for {needed} tokens but only {remaining} remain"
        )));
    }
    Ok(())
}

/// Token ids of `logits` sorted by descending logit, ties toward lower id.
fn ranked_tokens(logits: &[f32]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx
}

fn scaled_dist(logits: &[f32], temperature: f32) -> Result<Vec<f32>> {
    let scaled: Vec<f32> = logits.iter().map(|&l| l / temperature).collect();
    softmax(&scaled)
}

/// Pick the token for a node given its parent's draft logits.
fn choose_draft_token(
    logits: &[f32],
    rank: usize,
    sampling: Sampling,
    rng: &mut SeededRng,
) -> Result<(Token, f32, Option<Vec<f32>>)> {
    match sampling {
        Sampling::Greedy => {
            let ranked = ranked_tokens(logits);
            let tok = ranked[rank.min(ranked.len() - 1)];
            let dist = softmax(logits)?;
            Ok((tok as Token, dist[tok], None))
        }
        Sampling::Temperature(t) => {
            let dist = scaled_dist(logits, t)?;
            let tok = rng.categorical(&dist)?;
            Ok((tok as Token, dist[tok], Some(dist)))
        }
    }
}

// ---------------------------------------------------------------------------
// Feature-reuse draft module
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DraftModule {
    /// Projects concatenated tap features down to the model dim.
    pub fusion: Tensor2D,
    pub layer: LayerWeights,
    cache: PagedKVCache,
    committed: usize,
}

impl DraftModule {
    pub fn init_random(model: &TinyTransformer, seed: u64) -> Self {
        let cfg = model.config();
        let n_taps = cfg.feature_tap_layers.len();
        let mut rng = SeededRng::new(seed);
        let bound = 1.0 / ((n_taps * cfg.dim) as f32).sqrt();
        let fusion = Tensor2D::from_vec(
            n_taps * cfg.dim,
            cfg.dim,
            (0..n_taps * cfg.dim * cfg.dim)
                .map(|_| rng.uniform_symmetric(bound))
                .collect(),
        )
        .expect("sized");
        let layer = LayerWeights::init_random(cfg.dim, cfg.ffn_dim, &mut rng);
        DraftModule {
            fusion,
            layer,
            cache: PagedKVCache::new(1, cfg.n_heads, cfg.head_dim, DEFAULT_BLOCK_SIZE),
            committed: 0,
        }
    }

    /// Run a batch of slot inputs causally over the draft cache, appending
    /// their K/V. Returns the slot hidden states.
    fn absorb_slots(
        &mut self,
        model: &TinyTransformer,
        inputs: Vec<Vec<f32>>,
        positions: &[usize],
    ) -> Result<()> {
        let cfg = model.config();
        let mut hidden = inputs;
        let (ctx_k, ctx_v) = self.cache.gather_all(0);
        let mask = causal_mask(hidden.len(), ctx_k.rows());
        let rotations: Vec<_> = positions
            .iter()
            .map(|&p| cfg.rope.rotation(p))
            .collect::<Result<_>>()?;
        let lf = self.layer.forward(
            &mut hidden,
            &rotations,
            &[(&ctx_k, &ctx_v)],
            &mask,
            cfg.n_heads,
        )?;
        self.cache.append_kv(0, &lf.k_rows, &lf.v_rows, positions)?;
        self.committed = self.cache.len();
        Ok(())
    }

    fn slot_input(
        &self,
        model: &TinyTransformer,
        taps: &FeatureBundle,
        token: Token,
    ) -> Result<Vec<f32>> {
        fuse_features(&self.fusion, taps, &model.embed(token)?)
    }
}

/// One evaluated slot during tree expansion.
struct Slot {
    hidden: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    logits: Vec<f32>,
}

impl Drafter for DraftModule {
    fn prefill(
        &mut self,
        model: &TinyTransformer,
        prompt: &[Token],
        prompt_taps: &[FeatureBundle],
    ) -> Result<()> {
        if prompt.len() != prompt_taps.len() {
            return Err(Error::ShapeMismatch {
                context: "draft prefill",
                expected: format!("{} tap bundles", prompt.len()),
                actual: format!("{}", prompt_taps.len()),
            });
        }
        let cfg = model.config();
        let n_taps = cfg.feature_tap_layers.len();
        for chunk_start in (0..prompt.len()).step_by(64) {
            let chunk_end = (chunk_start + 64).min(prompt.len());
            let mut inputs = Vec::with_capacity(chunk_end - chunk_start);
            for i in chunk_start..chunk_end {
                let taps = if i == 0 {
                    FeatureBundle::zero(n_taps, cfg.dim, 0)
                } else {
                    prompt_taps[i - 1].clone()
                };
                inputs.push(self.slot_input(model, &taps, prompt[i])?);
            }
            let positions: Vec<usize> = (chunk_start..chunk_end).collect();
            self.absorb_slots(model, inputs, &positions)?;
        }
        Ok(())
    }

    fn tree_draft(
        &self,
        model: &TinyTransformer,
        features: &FeatureBundle,
        last_token: Token,
        template: &TreeTemplate,
        sampling: Sampling,
        rng: &mut SeededRng,
        remaining: usize,
    ) -> Result<CandidateTree> {
        check_remaining(template, remaining)?;
        let cfg = model.config();
        let committed = self.committed;
        let (base_k, base_v) = self.cache.gather_all(0);

        // slot 0 is the anchor for `last_token`; slot 1+i belongs to node i
        let mut slots: Vec<Slot> = Vec::with_capacity(1 + template.len());
        let run_slot = |input: Vec<f32>,
                            position: usize,
                            ancestors: &[usize],
                            slots: &[Slot]|
         -> Result<Slot> {
            let dim = base_k.cols();
            let mut anc_k = Tensor2D::with_cols(dim);
            let mut anc_v = Tensor2D::with_cols(dim);
            for &a in ancestors {
                anc_k.push_row(&slots[a].k);
                anc_v.push_row(&slots[a].v);
            }
            let ctx_rows = base_k.rows() + anc_k.rows();
            let mask = BoolMatrix::new(1, ctx_rows + 1, true);
            let mut hidden = vec![input];
            let rotations = vec![cfg.rope.rotation(position)?];
            let lf = self.layer.forward(
                &mut hidden,
                &rotations,
                &[(&base_k, &base_v), (&anc_k, &anc_v)],
                &mask,
                cfg.n_heads,
            )?;
            let logits = model.head(&hidden[0])?;
            Ok(Slot {
                hidden: hidden.into_iter().next().unwrap(),
                k: lf.k_rows.row(0).to_vec(),
                v: lf.v_rows.row(0).to_vec(),
                logits,
            })
        };

        let anchor_input = self.slot_input(model, features, last_token)?;
        slots.push(run_slot(anchor_input, committed, &[], &slots)?);

        let mut tokens = Vec::with_capacity(template.len());
        let mut positions = Vec::with_capacity(template.len());
        let mut draft_probs = Vec::with_capacity(template.len());
        let mut dists: Vec<Vec<f32>> = Vec::new();
        let record_dists = matches!(sampling, Sampling::Temperature(_));

        for i in 0..template.len() {
            let parent_slot = template.parent(i).map_or(0, |p| p + 1);
            let rank = template.sibling_rank(i);
            let (token, prob, dist) =
                choose_draft_token(&slots[parent_slot].logits, rank, sampling, rng)?;
            tokens.push(token);
            positions.push(committed + 1 + template.depth_of(i));
            draft_probs.push(prob);
            if record_dists {
                dists.push(dist.expect("sampling records distributions"));
            }

            // this node's slot: its own token embedding plus the parent
            // slot's hidden state as the feature
            let mut input = slots[parent_slot].hidden.clone();
            let emb = model.embed(token)?;
            for (x, &e) in input.iter_mut().zip(&emb) {
                *x += e;
            }
            let mut ancestors = vec![0usize];
            let mut chain = Vec::new();
            let mut p = template.parent(i);
            while let Some(pi) = p {
                chain.push(pi + 1);
                p = template.parent(pi);
            }
            chain.reverse();
            ancestors.extend(chain);
            let slot = run_slot(input, committed + 1 + template.depth_of(i), &ancestors, &slots)?;
            slots.push(slot);
        }

        Ok(CandidateTree {
            template: template.clone(),
            tokens,
            positions,
            draft_probs,
            draft_dists: record_dists.then_some(dists),
        })
    }

    fn commit(
        &mut self,
        model: &TinyTransformer,
        tokens: &[Token],
        pred_taps: &[FeatureBundle],
    ) -> Result<()> {
        if tokens.len() != pred_taps.len() {
            return Err(Error::ShapeMismatch {
                context: "draft commit",
                expected: format!("{} tap bundles", tokens.len()),
                actual: format!("{}", pred_taps.len()),
            });
        }
        if tokens.is_empty() {
            return Ok(());
        }
        let start = self.committed;
        let mut inputs = Vec::with_capacity(tokens.len());
        for (tok, taps) in tokens.iter().zip(pred_taps) {
            inputs.push(self.slot_input(model, taps, *tok)?);
        }
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        self.absorb_slots(model, inputs, &positions)
    }

    fn committed_len(&self) -> usize {
        self.committed
    }

    fn draft_cache_mut(&mut self) -> Option<&mut PagedKVCache> {
        Some(&mut self.cache)
    }

    fn name(&self) -> &'static str {
        "eagle-like"
    }
}

// ---------------------------------------------------------------------------
// Mock drafters
// ---------------------------------------------------------------------------

/// Context over a cache plus extra in-flight rows (tree ancestors).
struct AugmentedCtx<'c> {
    cache: &'c PagedKVCache,
    extra: &'c StagedKv,
    staged: StagedKv,
}

impl<'c> AugmentedCtx<'c> {
    fn new(cache: &'c PagedKVCache, extra: &'c StagedKv) -> Self {
        let staged = StagedKv::new(cache.n_layers(), cache.dim());
        AugmentedCtx {
            cache,
            extra,
            staged,
        }
    }
}

impl KvContext for AugmentedCtx<'_> {
    fn context_len(&self) -> usize {
        self.cache.len() + self.extra.rows()
    }

    fn gather(&self, layer: usize) -> Result<(Tensor2D, Tensor2D)> {
        let (mut k, mut v) = self.cache.gather_all(layer);
        let (ek, ev) = self.extra.layer(layer);
        for r in 0..ek.rows() {
            k.push_row(ek.row(r));
            v.push_row(ev.row(r));
        }
        Ok((k, v))
    }

    fn stage(&mut self, layer: usize, position: usize, k: &[f32], v: &[f32]) -> Result<()> {
        self.staged.push(layer, position, k, v);
        Ok(())
    }
}

/// How a mock turns the wrapped target's logits into a draft token.
enum MockPolicy {
    /// Take the target's choice outright.
    Identical,
    /// Copy the target's greedy token with probability `p`, else uniform.
    Noisy { p_copy: f32 },
}

/// Drafter that runs the target model on its own synchronized cache.
pub struct TargetMirrorDrafter {
    policy: MockPolicy,
    cache: PagedKVCache,
    committed: usize,
}

impl TargetMirrorDrafter {
    pub fn identical(model: &TinyTransformer) -> Self {
        Self::with_policy(model, MockPolicy::Identical)
    }

    pub fn noisy(model: &TinyTransformer, p_copy: f32) -> Self {
        Self::with_policy(model, MockPolicy::Noisy { p_copy })
    }

    fn with_policy(model: &TinyTransformer, policy: MockPolicy) -> Self {
        let cfg = model.config();
        TargetMirrorDrafter {
            policy,
            cache: PagedKVCache::new(cfg.n_layers, cfg.n_heads, cfg.head_dim, DEFAULT_BLOCK_SIZE),
            committed: 0,
        }
    }

    /// Token for a node, the target's pick possibly perturbed by noise.
    fn pick(
        &self,
        logits: &[f32],
        rank: usize,
        sampling: Sampling,
        rng: &mut SeededRng,
        vocab: usize,
    ) -> Result<(Token, f32, Option<Vec<f32>>)> {
        match &self.policy {
            MockPolicy::Identical => choose_draft_token(logits, rank, sampling, rng),
            MockPolicy::Noisy { p_copy } => {
                let ranked = ranked_tokens(logits);
                let copy_tok = ranked[rank.min(ranked.len() - 1)] as Token;
                let tok = if rng.uniform() < *p_copy as f64 {
                    copy_tok
                } else {
                    (rng.uniform() * vocab as f64).min(vocab as f64 - 1.0) as Token
                };
                let mut dist = vec![(1.0 - p_copy) / vocab as f32; vocab];
                dist[copy_tok as usize] += p_copy;
                let prob = dist[tok as usize];
                let record = matches!(sampling, Sampling::Temperature(_));
                Ok((tok, prob, record.then_some(dist)))
            }
        }
    }
}

impl Drafter for TargetMirrorDrafter {
    fn prefill(
        &mut self,
        model: &TinyTransformer,
        prompt: &[Token],
        _prompt_taps: &[FeatureBundle],
    ) -> Result<()> {
        prefill_cache(model, &mut self.cache, prompt, 64)?;
        self.committed = self.cache.len();
        Ok(())
    }

    fn tree_draft(
        &self,
        model: &TinyTransformer,
        _features: &FeatureBundle,
        last_token: Token,
        template: &TreeTemplate,
        sampling: Sampling,
        rng: &mut SeededRng,
        remaining: usize,
    ) -> Result<CandidateTree> {
        check_remaining(template, remaining)?;
        let committed = self.committed;
        let vocab = model.config().vocab_size;

        // slot 0 = last_token; slot 1+i = node i; rows accumulate in `extra`
        let mut extra = StagedKv::new(self.cache.n_layers(), self.cache.dim());
        let mut slot_rows: Vec<usize> = Vec::new(); // extra-row index per slot
        let mut slot_logits: Vec<Vec<f32>> = Vec::new();

        let run_slot = |token: Token,
                            position: usize,
                            visible_rows: &[usize],
                            extra: &mut StagedKv|
         -> Result<Vec<f32>> {
            // only ancestor rows may be visible, so feed them as the sole
            // extra context
            let narrowed = extra.select_rows(visible_rows);
            let mut ctx = AugmentedCtx::new(&self.cache, &narrowed);
            let out = model.forward_step(&[token], &[position], &mut ctx, None)?;
            for layer in 0..self.cache.n_layers() {
                let (k, v) = ctx.staged.layer(layer);
                extra.push(layer, position, k.row(0), v.row(0));
            }
            Ok(out.logits.row(0).to_vec())
        };

        slot_logits.push(run_slot(last_token, committed, &[], &mut extra)?);
        slot_rows.push(0);

        let mut tokens = Vec::with_capacity(template.len());
        let mut positions = Vec::with_capacity(template.len());
        let mut draft_probs = Vec::with_capacity(template.len());
        let mut dists: Vec<Vec<f32>> = Vec::new();
        let record_dists = matches!(sampling, Sampling::Temperature(_));

        for i in 0..template.len() {
            let parent_slot = template.parent(i).map_or(0, |p| p + 1);
            let rank = template.sibling_rank(i);
            let (token, prob, dist) =
                self.pick(&slot_logits[parent_slot], rank, sampling, rng, vocab)?;
            tokens.push(token);
            let position = committed + 1 + template.depth_of(i);
            positions.push(position);
            draft_probs.push(prob);
            if record_dists {
                dists.push(dist.unwrap_or_else(|| {
                    // identical policy under sampling: the target's own dist
                    scaled_dist(
                        &slot_logits[parent_slot],
                        match sampling {
                            Sampling::Temperature(t) => t,
                            Sampling::Greedy => 1.0,
                        },
                    )
                    .expect("finite logits")
                }));
            }

            let mut visible = vec![slot_rows[0]];
            let mut chain = Vec::new();
            let mut p = template.parent(i);
            while let Some(pi) = p {
                chain.push(slot_rows[pi + 1]);
                p = template.parent(pi);
            }
            chain.reverse();
            visible.extend(chain);
            let logits = run_slot(token, position, &visible, &mut extra)?;
            slot_rows.push(extra.rows() - 1);
            slot_logits.push(logits);
        }

        Ok(CandidateTree {
            template: template.clone(),
            tokens,
            positions,
            draft_probs,
            draft_dists: record_dists.then_some(dists),
        })
    }

    fn commit(
        &mut self,
        model: &TinyTransformer,
        tokens: &[Token],
        _pred_taps: &[FeatureBundle],
    ) -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let start = self.committed;
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let staged = {
            let empty = StagedKv::new(self.cache.n_layers(), self.cache.dim());
            let mut ctx = AugmentedCtx::new(&self.cache, &empty);
            model.forward_step(tokens, &positions, &mut ctx, None)?;
            ctx.staged
        };
        for layer in 0..self.cache.n_layers() {
            let (k, v) = staged.layer(layer);
            self.cache.append_kv(layer, k, v, staged.positions())?;
        }
        self.committed = self.cache.len();
        Ok(())
    }

    fn committed_len(&self) -> usize {
        self.committed
    }

    fn draft_cache_mut(&mut self) -> Option<&mut PagedKVCache> {
        Some(&mut self.cache)
    }

    fn name(&self) -> &'static str {
        match self.policy {
            MockPolicy::Identical => "mock-identical",
            MockPolicy::Noisy { .. } => "mock-noisy",
        }
    }
}

/// Uniform proposals, independent of any input.
pub struct MockRandom {
    committed: usize,
}

impl MockRandom {
    pub fn new() -> Self {
        MockRandom { committed: 0 }
    }
}

impl Default for MockRandom {
    fn default() -> Self {
        Self::new()
    }
}

impl Drafter for MockRandom {
    fn prefill(
        &mut self,
        _model: &TinyTransformer,
        prompt: &[Token],
        _prompt_taps: &[FeatureBundle],
    ) -> Result<()> {
        self.committed = prompt.len();
        Ok(())
    }

    fn tree_draft(
        &self,
        model: &TinyTransformer,
        _features: &FeatureBundle,
        _last_token: Token,
        template: &TreeTemplate,
        sampling: Sampling,
        rng: &mut SeededRng,
        remaining: usize,
    ) -> Result<CandidateTree> {
        check_remaining(template, remaining)?;
        let vocab = model.config().vocab_size;
        let committed = self.committed;
        let uniform = vec![1.0 / vocab as f32; vocab];
        let record_dists = matches!(sampling, Sampling::Temperature(_));
        let mut tokens = Vec::with_capacity(template.len());
        let mut positions = Vec::with_capacity(template.len());
        for i in 0..template.len() {
            tokens.push((rng.uniform() * vocab as f64).min(vocab as f64 - 1.0) as Token);
            positions.push(committed + 1 + template.depth_of(i));
        }
        Ok(CandidateTree {
            template: template.clone(),
            tokens,
            positions,
            draft_probs: vec![1.0 / vocab as f32; template.len()],
            draft_dists: record_dists.then(|| vec![uniform; template.len()]),
        })
    }

    fn commit(
        &mut self,
        _model: &TinyTransformer,
        tokens: &[Token],
        _pred_taps: &[FeatureBundle],
    ) -> Result<()> {
        self.committed += tokens.len();
        Ok(())
    }

    fn committed_len(&self) -> usize {
        self.committed
    }

    fn draft_cache_mut(&mut self) -> Option<&mut PagedKVCache> {
        None
    }

    fn name(&self) -> &'static str {
        "mock-random"
    }
}
