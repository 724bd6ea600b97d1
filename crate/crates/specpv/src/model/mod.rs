//! Decoder-only target model with per-layer feature taps.
//!
//! Pre-norm blocks with RMSNorm, rotary attention, and a SiLU-gated FFN.
//! Logits are produced for every input token, because verification needs a
//! distribution at each candidate. Hidden states at the configured tap
//! layers are returned alongside the logits so the draft module can reuse
//! them; the tap for token `x_i` is the one consumed to draft `x_{i+1}`.
//!
//! A model is immutable after construction and can be shared across
//! concurrent generation sessions, each of which owns its caches.

pub mod checkpoint;

use crate::error::{Error, Result};
use crate::kvstore::PagedKVCache;
use crate::numerics::rng::SeededRng;
use crate::numerics::rope::{self, RopeConfig};
use crate::numerics::{rmsnorm, silu, vec_matmul, BoolMatrix, Tensor2D};

pub type Token = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub rope: RopeConfig,
    /// Layers whose output hidden states feed the draft module.
    pub feature_tap_layers: Vec<usize>,
}

impl ModelConfig {
    /// Desk-scale default: 256 vocab, 64 dim, 4 layers, 4 heads.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 256,
            dim: 64,
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            ffn_dim: 256,
            rope: RopeConfig::standard(16).expect("even head dim"),
            feature_tap_layers: vec![0, 1, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != self.n_heads * self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "dim {} != n_heads {} * head_dim {}",
                self.dim, self.n_heads, self.head_dim
            )));
        }
        if self.vocab_size < 2 || self.n_layers == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidConfig(
                "vocab_size >= 2, n_layers >= 1 and ffn_dim >= 1 required".into(),
            ));
        }
        self.rope.validate()?;
        if self.rope.head_dim != self.head_dim {
            return Err(Error::InvalidConfig(format!(
                "rope head_dim {} != model head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        if self.feature_tap_layers.is_empty() {
            return Err(Error::InvalidConfig("at least one feature tap required".into()));
        }
        let mut prev: Option<usize> = None;
        for &t in &self.feature_tap_layers {
            if t >= self.n_layers {
                return Err(Error::InvalidConfig(format!(
                    "feature tap {t} out of range for {} layers",
                    self.n_layers
                )));
            }
            if prev.is_some_and(|p| p >= t) {
                return Err(Error::InvalidConfig(
                    "feature taps must be sorted and unique".into(),
                ));
            }
            prev = Some(t);
        }
        Ok(())
    }
}

/// Weights of one decoder block; also used verbatim by the draft module.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Tensor2D,
    pub wk: Tensor2D,
    pub wv: Tensor2D,
    pub wo: Tensor2D,
    pub ffn_norm: Vec<f32>,
    pub w_gate: Tensor2D,
    pub w_up: Tensor2D,
    pub w_down: Tensor2D,
}

/// K/V/Q rows a layer produced for the new tokens (keys and queries
/// post-rotation).
pub struct LayerForward {
    pub k_rows: Tensor2D,
    pub v_rows: Tensor2D,
    pub q_rows: Tensor2D,
}

const NORM_EPS: f32 = 1e-5;

impl LayerWeights {
    pub fn init_random(dim: usize, ffn_dim: usize, rng: &mut SeededRng) -> Self {
        let dim_bound = 1.0 / (dim as f32).sqrt();
        let ffn_bound = 1.0 / (ffn_dim as f32).sqrt();
        let mat = |rows: usize, cols: usize, bound: f32, rng: &mut SeededRng| {
            Tensor2D::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| rng.uniform_symmetric(bound)).collect(),
            )
            .expect("sized data")
        };
        LayerWeights {
            attn_norm: vec![1.0; dim],
            wq: mat(dim, dim, dim_bound, rng),
            wk: mat(dim, dim, dim_bound, rng),
            wv: mat(dim, dim, dim_bound, rng),
            wo: mat(dim, dim, dim_bound, rng),
            ffn_norm: vec![1.0; dim],
            w_gate: mat(dim, ffn_dim, dim_bound, rng),
            w_up: mat(dim, ffn_dim, dim_bound, rng),
            w_down: mat(ffn_dim, dim, ffn_bound, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.attn_norm.len()
            + self.ffn_norm.len()
            + [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_gate, &self.w_up, &self.w_down]
                .iter()
                .map(|t| t.rows() * t.cols())
                .sum::<usize>()
    }

    /// Advance `hidden` through attention and FFN. `ctx` holds the
    /// committed context rows as (K, V) segments in position order; the new
    /// tokens' K/V are computed here and form the final attention segment,
    /// matching the mask columns `[n x (ctx_len + n)]`. `rotations[i]`
    /// encodes token `i`'s position.
    pub fn forward(
        &self,
        hidden: &mut [Vec<f32>],
        rotations: &[rope::RopeRotation],
        ctx: &[(&Tensor2D, &Tensor2D)],
        mask: &BoolMatrix,
        n_heads: usize,
    ) -> Result<LayerForward> {
        if rotations.len() != hidden.len() {
            return Err(Error::ShapeMismatch {
                context: "LayerWeights::forward rotations",
                expected: format!("{}", hidden.len()),
                actual: format!("{}", rotations.len()),
            });
        }
        let dim = self.attn_norm.len();
        let head_dim = dim / n_heads;
        let mut q_rows = Tensor2D::with_cols(dim);
        let mut k_rows = Tensor2D::with_cols(dim);
        let mut v_rows = Tensor2D::with_cols(dim);
        for (i, h) in hidden.iter().enumerate() {
            let normed = rmsnorm(h, &self.attn_norm, NORM_EPS)?;
            let mut q = vec_matmul(&normed, &self.wq)?;
            let mut k = vec_matmul(&normed, &self.wk)?;
            let v = vec_matmul(&normed, &self.wv)?;
            for head in 0..n_heads {
                let lo = head * head_dim;
                let hi = lo + head_dim;
                rotations[i].apply_in_place(&mut q[lo..hi]);
                rotations[i].apply_in_place(&mut k[lo..hi]);
            }
            q_rows.push_row(&q);
            k_rows.push_row(&k);
            v_rows.push_row(&v);
        }

        let scale = 1.0 / (head_dim as f32).sqrt();
        let mut k_segments: Vec<&Tensor2D> = ctx.iter().map(|&(k, _)| k).collect();
        let mut v_segments: Vec<&Tensor2D> = ctx.iter().map(|&(_, v)| v).collect();
        k_segments.push(&k_rows);
        v_segments.push(&v_rows);
        let attn_concat =
            multi_head_attention(&q_rows, &k_segments, &v_segments, mask, n_heads, scale)?;
        for (h, attn) in hidden.iter_mut().zip(&attn_concat) {
            let proj = vec_matmul(attn, &self.wo)?;
            for (x, p) in h.iter_mut().zip(proj) {
                *x += p;
            }
        }

        for h in hidden.iter_mut() {
            let normed = rmsnorm(h, &self.ffn_norm, NORM_EPS)?;
            let gate = vec_matmul(&normed, &self.w_gate)?;
            let up = vec_matmul(&normed, &self.w_up)?;
            let mixed: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let down = vec_matmul(&mixed, &self.w_down)?;
            for (x, d) in h.iter_mut().zip(down) {
                *x += d;
            }
        }

        Ok(LayerForward {
            k_rows,
            v_rows,
            q_rows,
        })
    }
}

/// All heads of one attention pass. Keys and values arrive as row segments
/// in position order, so no concatenated matrix is materialized. Per head
/// this computes exactly what `masked_attention` would on the head's
/// column slice.
fn multi_head_attention(
    q_rows: &Tensor2D,
    k_segments: &[&Tensor2D],
    v_segments: &[&Tensor2D],
    mask: &BoolMatrix,
    n_heads: usize,
    scale: f32,
) -> Result<Vec<Vec<f32>>> {
    let n = q_rows.rows();
    let dim = q_rows.cols();
    let head_dim = dim / n_heads;
    let total: usize = k_segments.iter().map(|t| t.rows()).sum();
    if mask.rows() != n || mask.cols() != total {
        return Err(Error::ShapeMismatch {
            context: "multi_head_attention mask",
            expected: format!("{}x{}", n, total),
            actual: format!("{}x{}", mask.rows(), mask.cols()),
        });
    }
    let k_row = |mut j: usize| {
        for seg in k_segments {
            if j < seg.rows() {
                return seg.row(j);
            }
            j -= seg.rows();
        }
        unreachable!("index within total rows")
    };
    let v_row = |mut j: usize| {
        for seg in v_segments {
            if j < seg.rows() {
                return seg.row(j);
            }
            j -= seg.rows();
        }
        unreachable!("index within total rows")
    };
    let mut out = vec![vec![0.0f32; dim]; n];
    let mut visible: Vec<usize> = Vec::with_capacity(total);
    let mut scores: Vec<f32> = Vec::with_capacity(total);
    let mut weights: Vec<f64> = Vec::with_capacity(total);
    let mut acc = vec![0.0f64; head_dim];
    for i in 0..n {
        visible.clear();
        for j in 0..total {
            if mask.get(i, j) {
                visible.push(j);
            }
        }
        if visible.is_empty() {
            return Err(Error::IsolatedQuery { row: i });
        }
        let q = q_rows.row(i);
        for head in 0..n_heads {
            let lo = head * head_dim;
            let hi = lo + head_dim;
            let qh = &q[lo..hi];
            scores.clear();
            for &j in &visible {
                let kh = &k_row(j)[lo..hi];
                let mut dot = 0.0f64;
                for (a, b) in qh.iter().zip(kh.iter()) {
                    dot += *a as f64 * *b as f64;
                }
                scores.push(dot as f32 * scale);
            }
            let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            weights.clear();
            let mut denom = 0.0f64;
            for &s in &scores {
                let e = (s - max).exp() as f64;
                weights.push(e);
                denom += e;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (&j, &w) in visible.iter().zip(&weights) {
                let vw = w / denom;
                for (a, &vv) in acc.iter_mut().zip(&v_row(j)[lo..hi]) {
                    *a += vw * vv as f64;
                }
            }
            for (o, &a) in out[i][lo..hi].iter_mut().zip(acc.iter()) {
                *o = a as f32;
            }
        }
    }
    Ok(out)
}

/// Concatenated tap-layer hidden states for one token.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub features: Vec<f32>,
    pub position: usize,
}

impl FeatureBundle {
    /// All-zero bundle; used for the very first token, which has no
    /// predecessor features.
    pub fn zero(n_taps: usize, dim: usize, position: usize) -> Self {
        FeatureBundle {
            features: vec![0.0; n_taps * dim],
            position,
        }
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Next-token logits, one row per input token.
    pub logits: Tensor2D,
    pub taps: Vec<FeatureBundle>,
    /// Post-rotation query rows per layer, `[n_tokens x dim]`; consumed by
    /// retrieval scoring.
    pub queries: Vec<Tensor2D>,
}

/// Attention context a forward pass reads from and stages new rows into.
///
/// Staged rows are not visible through `gather`; they become part of the
/// context only when the caller commits them to the underlying store.
pub trait KvContext {
    fn context_len(&self) -> usize;
    fn gather(&self, layer: usize) -> Result<(Tensor2D, Tensor2D)>;
    fn stage(&mut self, layer: usize, position: usize, k: &[f32], v: &[f32]) -> Result<()>;
}

/// Staged K/V rows for one forward pass, all layers.
#[derive(Debug, Clone)]
pub struct StagedKv {
    positions: Vec<usize>,
    layers: Vec<(Tensor2D, Tensor2D)>,
}

impl StagedKv {
    pub fn new(n_layers: usize, dim: usize) -> Self {
        StagedKv {
            positions: Vec::new(),
            layers: (0..n_layers)
                .map(|_| (Tensor2D::with_cols(dim), Tensor2D::with_cols(dim)))
                .collect(),
        }
    }

    pub fn push(&mut self, layer: usize, position: usize, k: &[f32], v: &[f32]) {
        if layer == 0 {
            self.positions.push(position);
        } else {
            debug_assert_eq!(self.positions[self.layers[layer].0.rows()], position);
        }
        self.layers[layer].0.push_row(k);
        self.layers[layer].1.push_row(v);
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn layer(&self, layer: usize) -> (&Tensor2D, &Tensor2D) {
        (&self.layers[layer].0, &self.layers[layer].1)
    }

    /// Subset of staged rows, preserving the given index order.
    pub fn select_rows(&self, indices: &[usize]) -> StagedKv {
        let dim = self.layers.first().map_or(0, |(k, _)| k.cols());
        let mut out = StagedKv::new(self.layers.len(), dim);
        for (layer, (k, v)) in self.layers.iter().enumerate() {
            for &i in indices {
                out.push(layer, self.positions[i], k.row(i), v.row(i));
            }
        }
        out
    }
}

/// Context over the whole paged cache; stages into a scratch buffer.
pub struct FullCacheView<'c> {
    cache: &'c PagedKVCache,
    pub staged: StagedKv,
}

impl<'c> FullCacheView<'c> {
    pub fn new(cache: &'c PagedKVCache) -> Self {
        let staged = StagedKv::new(cache.n_layers(), cache.dim());
        FullCacheView { cache, staged }
    }
}

impl KvContext for FullCacheView<'_> {
    fn context_len(&self) -> usize {
        self.cache.len()
    }

    fn gather(&self, layer: usize) -> Result<(Tensor2D, Tensor2D)> {
        Ok(self.cache.gather_all(layer))
    }

    fn stage(&mut self, layer: usize, position: usize, k: &[f32], v: &[f32]) -> Result<()> {
        self.staged.push(layer, position, k, v);
        Ok(())
    }
}

/// The target model.
#[derive(Debug, Clone)]
pub struct TinyTransformer {
    cfg: ModelConfig,
    pub embedding: Tensor2D,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    pub lm_head: Tensor2D,
}

impl TinyTransformer {
    /// Weights drawn uniformly in ±1/sqrt(fan_in); norm weights start at 1.
    /// Identical (config, seed) pairs produce identical models.
    pub fn init_random(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let dim_bound = 1.0 / (cfg.dim as f32).sqrt();
        let embedding = Tensor2D::from_vec(
            cfg.vocab_size,
            cfg.dim,
            (0..cfg.vocab_size * cfg.dim)
                .map(|_| rng.uniform_symmetric(dim_bound))
                .collect(),
        )?;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights::init_random(cfg.dim, cfg.ffn_dim, &mut rng))
            .collect();
        let final_norm = vec![1.0; cfg.dim];
        let lm_head = Tensor2D::from_vec(
            cfg.dim,
            cfg.vocab_size,
            (0..cfg.dim * cfg.vocab_size)
                .map(|_| rng.uniform_symmetric(dim_bound))
                .collect(),
        )?;
        Ok(TinyTransformer {
            cfg,
            embedding,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.embedding.rows() * self.embedding.cols()
            + self.layers.iter().map(LayerWeights::param_count).sum::<usize>()
            + self.final_norm.len()
            + self.lm_head.rows() * self.lm_head.cols()
    }

    pub fn embed(&self, token: Token) -> Result<Vec<f32>> {
        if token as usize >= self.cfg.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "token {token} out of vocabulary (size {})",
                self.cfg.vocab_size
            )));
        }
        Ok(self.embedding.row(token as usize).to_vec())
    }

    /// Project a hidden state to vocabulary logits; shared with the drafter.
    pub fn head(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        let normed = rmsnorm(hidden, &self.final_norm, NORM_EPS)?;
        vec_matmul(&normed, &self.lm_head)
    }

    /// Run new tokens against the context in `view`, staging their K/V rows.
    ///
    /// With no `tree_mask`, the tokens form a causal chain after the full
    /// context. A tree mask has one row per token and `context_len + n`
    /// columns; token `j` then attends to whatever its row admits (context
    /// plus tree ancestors plus itself).
    pub fn forward_step(
        &self,
        tokens: &[Token],
        positions: &[usize],
        view: &mut dyn KvContext,
        tree_mask: Option<&BoolMatrix>,
    ) -> Result<ForwardOutput> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::EmptyInput("empty token batch"));
        }
        if positions.len() != n {
            return Err(Error::ShapeMismatch {
                context: "forward_step positions",
                expected: format!("{n}"),
                actual: format!("{}", positions.len()),
            });
        }
        let ctx_len = view.context_len();
        let mask = match tree_mask {
            Some(m) => {
                if m.rows() != n || m.cols() != ctx_len + n {
                    return Err(Error::ShapeMismatch {
                        context: "forward_step mask",
                        expected: format!("{}x{}", n, ctx_len + n),
                        actual: format!("{}x{}", m.rows(), m.cols()),
                    });
                }
                m.clone()
            }
            None => causal_mask(n, ctx_len),
        };

        let mut hidden: Vec<Vec<f32>> = tokens
            .iter()
            .map(|&t| self.embed(t))
            .collect::<Result<_>>()?;
        let rotations: Vec<rope::RopeRotation> = positions
            .iter()
            .map(|&p| self.cfg.rope.rotation(p))
            .collect::<Result<_>>()?;
        let mut queries = Vec::with_capacity(self.cfg.n_layers);
        let mut tap_rows: Vec<Vec<Vec<f32>>> = Vec::with_capacity(self.cfg.feature_tap_layers.len());

        for (layer_idx, layer) in self.layers.iter().enumerate() {
            let (ctx_k, ctx_v) = view.gather(layer_idx)?;
            let lf = layer.forward(
                &mut hidden,
                &rotations,
                &[(&ctx_k, &ctx_v)],
                &mask,
                self.cfg.n_heads,
            )?;
            for i in 0..n {
                view.stage(layer_idx, positions[i], lf.k_rows.row(i), lf.v_rows.row(i))?;
            }
            queries.push(lf.q_rows);
            if self.cfg.feature_tap_layers.contains(&layer_idx) {
                tap_rows.push(hidden.clone());
            }
        }

        let mut logits = Tensor2D::with_cols(self.cfg.vocab_size);
        for h in &hidden {
            logits.push_row(&self.head(h)?);
        }
        let taps = (0..n)
            .map(|i| {
                let mut features = Vec::with_capacity(tap_rows.len() * self.cfg.dim);
                for t in &tap_rows {
                    features.extend_from_slice(&t[i]);
                }
                FeatureBundle {
                    features,
                    position: positions[i],
                }
            })
            .collect();

        Ok(ForwardOutput {
            logits,
            taps,
            queries,
        })
    }
}

/// Chain-causal mask: every token sees the full context plus the staged
/// tokens at or before it.
pub fn causal_mask(n: usize, ctx_len: usize) -> BoolMatrix {
    let mut mask = BoolMatrix::new(n, ctx_len + n, false);
    for i in 0..n {
        for j in 0..ctx_len + i + 1 {
            mask.set(i, j, true);
        }
    }
    mask
}

/// Feed `tokens` through the model in causal chunks, committing their K/V
/// to `cache`. Returns the taps for every token and the last token's
/// logits row. The result is independent of `chunk_size`.
pub fn prefill_cache(
    model: &TinyTransformer,
    cache: &mut PagedKVCache,
    tokens: &[Token],
    chunk_size: usize,
) -> Result<(Vec<FeatureBundle>, Vec<f32>)> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("empty prompt"));
    }
    if chunk_size == 0 {
        return Err(Error::InvalidConfig("chunk_size must be >= 1".into()));
    }
    let mut taps = Vec::with_capacity(tokens.len());
    let mut last_logits: Vec<f32> = Vec::new();
    let mut start = cache.len();
    for chunk in tokens.chunks(chunk_size) {
        let positions: Vec<usize> = (start..start + chunk.len()).collect();
        let staged = {
            let mut view = FullCacheView::new(cache);
            let out = model.forward_step(chunk, &positions, &mut view, None)?;
            taps.extend(out.taps);
            last_logits = out.logits.row(out.logits.rows() - 1).to_vec();
            view.staged
        };
        for layer in 0..cache.n_layers() {
            let (k, v) = staged.layer(layer);
            cache.append_kv(layer, k, v, staged.positions())?;
        }
        start += chunk.len();
    }
    Ok((taps, last_logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_model(seed: u64) -> TinyTransformer {
        let mut cfg = ModelConfig::tiny();
        cfg.vocab_size = 32;
        cfg.dim = 16;
        cfg.n_heads = 2;
        cfg.head_dim = 8;
        cfg.ffn_dim = 32;
        cfg.rope = RopeConfig::standard(8).unwrap();
        cfg.feature_tap_layers = vec![0, 1, 3];
        TinyTransformer::init_random(cfg, seed).unwrap()
    }

    fn fresh_cache(model: &TinyTransformer) -> PagedKVCache {
        let cfg = model.config();
        PagedKVCache::new(cfg.n_layers, cfg.n_heads, cfg.head_dim, 16)
    }

    #[test]
    fn same_seed_same_logits() {
        let a = probe_model(42);
        let b = probe_model(42);
        let mut ca = fresh_cache(&a);
        let mut cb = fresh_cache(&b);
        let (_, la) = prefill_cache(&a, &mut ca, &[1, 2, 3], 8).unwrap();
        let (_, lb) = prefill_cache(&b, &mut cb, &[1, 2, 3], 8).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn different_seeds_differ() {
        let a = probe_model(1);
        let b = probe_model(2);
        let mut ca = fresh_cache(&a);
        let mut cb = fresh_cache(&b);
        let (_, la) = prefill_cache(&a, &mut ca, &[5, 6], 8).unwrap();
        let (_, lb) = prefill_cache(&b, &mut cb, &[5, 6], 8).unwrap();
        assert_ne!(la, lb);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = ModelConfig::tiny();
        let model = TinyTransformer::init_random(cfg.clone(), 7).unwrap();
        let per_layer = 2 * cfg.dim + 4 * cfg.dim * cfg.dim + 3 * cfg.dim * cfg.ffn_dim;
        let expected = cfg.vocab_size * cfg.dim
            + cfg.n_layers * per_layer
            + cfg.dim
            + cfg.dim * cfg.vocab_size;
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn chain_batch_equals_incremental() {
        // feeding 3 tokens at once must match feeding them one at a time
        let model = probe_model(9);
        let tokens = [4u32, 9, 17];

        let batch_cache = fresh_cache(&model);
        let mut view = FullCacheView::new(&batch_cache);
        let out_batch = model
            .forward_step(&tokens, &[0, 1, 2], &mut view, None)
            .unwrap();

        let mut inc_cache = fresh_cache(&model);
        let mut rows = Vec::new();
        for (i, &t) in tokens.iter().enumerate() {
            let staged = {
                let mut v = FullCacheView::new(&inc_cache);
                let out = model.forward_step(&[t], &[i], &mut v, None).unwrap();
                rows.push(out.logits.row(0).to_vec());
                v.staged
            };
            for layer in 0..inc_cache.n_layers() {
                let (k, vv) = staged.layer(layer);
                inc_cache.append_kv(layer, k, vv, staged.positions()).unwrap();
            }
        }
        for i in 0..3 {
            for (a, b) in out_batch.logits.row(i).iter().zip(&rows[i]) {
                assert!((a - b).abs() <= 1e-4, "row {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn prefill_chunk_size_does_not_matter() {
        let model = probe_model(21);
        let tokens: Vec<Token> = (0..40).map(|i| (i * 7 % 32) as Token).collect();
        let mut reference: Option<Vec<f32>> = None;
        for chunk in [1usize, 7, 64] {
            let mut cache = fresh_cache(&model);
            let (_, logits) = prefill_cache(&model, &mut cache, &tokens, chunk).unwrap();
            match &reference {
                None => reference = Some(logits),
                Some(r) => {
                    for (a, b) in r.iter().zip(&logits) {
                        assert!((a - b).abs() <= 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_prompt_rejected() {
        let model = probe_model(3);
        let mut cache = fresh_cache(&model);
        assert!(prefill_cache(&model, &mut cache, &[], 8).is_err());
    }

    #[test]
    fn sibling_tokens_get_identical_logits() {
        // two siblings with the same token, position, and ancestors
        let model = probe_model(33);
        let mut cache = fresh_cache(&model);
        prefill_cache(&model, &mut cache, &[1, 2, 3, 4], 8).unwrap();
        let ctx = cache.len();
        let mut mask = BoolMatrix::new(2, ctx + 2, false);
        for i in 0..2 {
            for j in 0..ctx {
                mask.set(i, j, true);
            }
            mask.set(i, ctx + i, true); // self only; siblings masked
        }
        let mut view = FullCacheView::new(&cache);
        let out = model
            .forward_step(&[7, 7], &[ctx, ctx], &mut view, Some(&mask))
            .unwrap();
        assert_eq!(out.logits.row(0), out.logits.row(1));
    }

    #[test]
    fn permuting_sibling_subtrees_permutes_logits() {
        // two 2-node chains hanging off the context; swapping their order in
        // the batch swaps their logits rows
        let model = probe_model(35);
        let mut cache = fresh_cache(&model);
        prefill_cache(&model, &mut cache, &[9, 8, 7], 8).unwrap();
        let ctx = cache.len();

        let run = |toks: [Token; 4], parents: [Option<usize>; 4]| {
            let mut mask = BoolMatrix::new(4, ctx + 4, false);
            for i in 0..4 {
                for j in 0..ctx {
                    mask.set(i, j, true);
                }
                mask.set(i, ctx + i, true);
                let mut p = parents[i];
                while let Some(pi) = p {
                    mask.set(i, ctx + pi, true);
                    p = parents[pi];
                }
            }
            let positions = [ctx, ctx, ctx + 1, ctx + 1];
            let mut view = FullCacheView::new(&cache);
            model
                .forward_step(&toks, &positions, &mut view, Some(&mask))
                .unwrap()
        };

        // subtree A = (5 -> 6), subtree B = (11 -> 12), laid out as
        // [rootA, rootB, childA, childB]
        let a = run([5, 11, 6, 12], [None, None, Some(0), Some(1)]);
        // permuted: [rootB, rootA, childB, childA]
        let b = run([11, 5, 12, 6], [None, None, Some(0), Some(1)]);
        assert_eq!(a.logits.row(0), b.logits.row(1));
        assert_eq!(a.logits.row(1), b.logits.row(0));
        assert_eq!(a.logits.row(2), b.logits.row(3));
        assert_eq!(a.logits.row(3), b.logits.row(2));
    }

    #[test]
    fn taps_align_with_tap_layers() {
        let model = probe_model(40);
        let mut cache = fresh_cache(&model);
        let (taps, _) = prefill_cache(&model, &mut cache, &[3, 1, 4], 64).unwrap();
        assert_eq!(taps.len(), 3);
        for (i, tap) in taps.iter().enumerate() {
            assert_eq!(tap.position, i);
            assert_eq!(tap.features.len(), 3 * model.config().dim);
        }
        // incremental pass produces the same taps for the same token
        let mut cache2 = fresh_cache(&model);
        let (taps2, _) = prefill_cache(&model, &mut cache2, &[3, 1, 4], 1).unwrap();
        for (a, b) in taps.iter().zip(&taps2) {
            for (x, y) in a.features.iter().zip(&b.features) {
                assert!((x - y).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn mask_shape_mismatch_rejected() {
        let model = probe_model(50);
        let cache = fresh_cache(&model);
        let mask = BoolMatrix::new(1, 5, true);
        let mut view = FullCacheView::new(&cache);
        let err = model
            .forward_step(&[1], &[0], &mut view, Some(&mask))
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn position_beyond_rope_limit_rejected() {
        let model = probe_model(51);
        let cache = fresh_cache(&model);
        let mut view = FullCacheView::new(&cache);
        let err = model
            .forward_step(&[1], &[rope::MAX_POSITION + 1], &mut view, None)
            .unwrap_err();
        assert!(matches!(err, Error::PositionOverflow { .. }));
    }
}
