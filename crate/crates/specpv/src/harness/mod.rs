//! Benchmark orchestration: synthetic corpora, sweep execution, reports.
//!
//! A bench sweeps (method x context length) cells. Methods are plain
//! autoregressive decoding, full verification (unbounded budget), and
//! partial verification at each configured budget. Every cell runs the same
//! seeded prompts, so partial outputs can be scored against the full
//! verification output with ROUGE-L. Identical configs produce identical
//! token outputs and modeled times; wall-clock fields are the only
//! nondeterministic report entries.

pub mod metrics;
pub mod plots;

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drafter::{DraftModule, Drafter, MockRandom, Sampling, TargetMirrorDrafter, TreeTemplate};
use crate::engine::{
    autoregressive_generate, generate, ComputeModel, GenerationConfig, StepRecord,
};
use crate::error::{Error, Result};
use crate::kvstore::offload::OffloadCostModel;
use crate::kvstore::partial::{QueryReduction, ScoreVariant};
use crate::model::{checkpoint, ModelConfig, TinyTransformer, Token};
use crate::numerics::rng::SeededRng;
use crate::numerics::rope::RopeConfig;

pub const REPORT_SCHEMA: &str = "specpv-report-v1";

const MOTIF_LEN: usize = 16;
const MOTIF_PERIOD: usize = 256;
const MOTIF_START: usize = 64;

/// Deterministic pseudo-text: uniform tokens with a motif planted every
/// `MOTIF_PERIOD` positions so retrieval has long-range structure to find.
pub fn gen_corpus(seed: u64, n_tokens: usize, vocab: usize) -> Vec<Token> {
    assert!(n_tokens >= 1, "corpus length must be >= 1");
    let mut rng = SeededRng::new(seed);
    let mut out: Vec<Token> = (0..n_tokens)
        .map(|_| (rng.uniform() * vocab as f64).min(vocab as f64 - 1.0) as Token)
        .collect();
    let motif: Vec<Token> = (0..MOTIF_LEN)
        .map(|_| (rng.uniform() * vocab as f64).min(vocab as f64 - 1.0) as Token)
        .collect();
    let mut start = MOTIF_START;
    while start + MOTIF_LEN <= n_tokens {
        out[start..start + MOTIF_LEN].copy_from_slice(&motif);
        start += MOTIF_PERIOD;
    }
    out
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Load from a checkpoint when set; otherwise seed a fresh model.
    pub path: Option<String>,
    pub seed: u64,
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub feature_tap_layers: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let cfg = ModelConfig::tiny();
        ModelSpec {
            path: None,
            seed: 7,
            vocab_size: cfg.vocab_size,
            dim: cfg.dim,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
            ffn_dim: cfg.ffn_dim,
            feature_tap_layers: cfg.feature_tap_layers,
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<TinyTransformer> {
        if let Some(path) = &self.path {
            return checkpoint::load_checkpoint(Path::new(path));
        }
        let cfg = ModelConfig {
            vocab_size: self.vocab_size,
            dim: self.dim,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            ffn_dim: self.ffn_dim,
            rope: RopeConfig::standard(self.head_dim)?,
            feature_tap_layers: self.feature_tap_layers.clone(),
        };
        TinyTransformer::init_random(cfg, self.seed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrafterSpec {
    /// eagle-like | mock-identical | mock-noisy | mock-random
    pub kind: String,
    pub p_copy: f32,
    pub seed: u64,
}

impl Default for DrafterSpec {
    fn default() -> Self {
        DrafterSpec {
            kind: "eagle-like".into(),
            p_copy: 0.9,
            seed: 3,
        }
    }
}

impl DrafterSpec {
    pub fn build(&self, model: &TinyTransformer) -> Result<Box<dyn Drafter>> {
        match self.kind.as_str() {
            "eagle-like" => Ok(Box::new(DraftModule::init_random(model, self.seed))),
            "mock-identical" => Ok(Box::new(TargetMirrorDrafter::identical(model))),
            "mock-noisy" => Ok(Box::new(TargetMirrorDrafter::noisy(model, self.p_copy))),
            "mock-random" => Ok(Box::new(MockRandom::new())),
            other => Err(Error::InvalidConfig(format!("unknown drafter kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSpec {
    pub max_new_tokens: usize,
    /// 0 means greedy decoding.
    pub temperature: f32,
    pub seed: u64,
    /// chain<d> | binary<d> | eagle | explicit parent list
    pub template: String,
    pub template_parents: Vec<i64>,
    pub chunk_size: usize,
    pub n_sink: usize,
    pub n_local: usize,
    pub block_size: usize,
    pub buffer_cap: Option<usize>,
    /// as-written | elementwise
    pub score_variant: String,
    /// max | mean | last
    pub reduction: String,
    pub eos_token: Option<Token>,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        GenerationSpec {
            max_new_tokens: 128,
            temperature: 0.0,
            seed: 11,
            template: "chain4".into(),
            template_parents: Vec::new(),
            chunk_size: 64,
            n_sink: 2,
            n_local: 4,
            block_size: 16,
            buffer_cap: None,
            score_variant: "as-written".into(),
            reduction: "mean".into(),
            eos_token: None,
        }
    }
}

pub fn parse_template(name: &str, parents: &[i64]) -> Result<TreeTemplate> {
    if !parents.is_empty() {
        return TreeTemplate::from_parent_list(parents);
    }
    if name == "eagle" {
        return Ok(TreeTemplate::eagle_like());
    }
    if let Some(d) = name.strip_prefix("chain") {
        let depth: usize = d
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad template '{name}'")))?;
        return TreeTemplate::chain(depth);
    }
    if let Some(d) = name.strip_prefix("binary") {
        let depth: usize = d
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad template '{name}'")))?;
        return TreeTemplate::binary(depth);
    }
    Err(Error::InvalidConfig(format!("unknown template '{name}'")))
}

pub fn parse_score_variant(name: &str) -> Result<ScoreVariant> {
    match name {
        "as-written" => Ok(ScoreVariant::AsWritten),
        "elementwise" => Ok(ScoreVariant::Elementwise),
        other => Err(Error::InvalidConfig(format!("unknown score variant '{other}'"))),
    }
}

pub fn parse_reduction(name: &str) -> Result<QueryReduction> {
    match name {
        "max" => Ok(QueryReduction::Max),
        "mean" => Ok(QueryReduction::Mean),
        "last" => Ok(QueryReduction::Last),
        other => Err(Error::InvalidConfig(format!("unknown reduction '{other}'"))),
    }
}

impl GenerationSpec {
    pub fn to_config(&self, budget: Option<usize>, context_len: usize) -> Result<GenerationConfig> {
        let template = parse_template(&self.template, &self.template_parents)?;
        let sampling = if self.temperature > 0.0 {
            Sampling::Temperature(self.temperature)
        } else {
            Sampling::Greedy
        };
        let cfg = GenerationConfig {
            max_length: context_len + self.max_new_tokens + template.max_depth() + 2,
            max_new_tokens: self.max_new_tokens,
            sampling,
            seed: self.seed,
            budget: budget.unwrap_or(usize::MAX),
            n_sink: self.n_sink,
            n_local: self.n_local,
            buffer_cap: self.buffer_cap,
            block_size: self.block_size,
            score_variant: parse_score_variant(&self.score_variant)?,
            reduction: parse_reduction(&self.reduction)?,
            template,
            chunk_size: self.chunk_size,
            eos_token: self.eos_token,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub context_lengths: Vec<usize>,
    /// "inf" selects full verification; numbers are partial budgets.
    pub budgets: Vec<String>,
    pub repetitions: usize,
    pub corpus_seed: u64,
    pub workers: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            context_lengths: vec![512],
            budgets: vec!["inf".into(), "256".into()],
            repetitions: 1,
            corpus_seed: 99,
            workers: 0,
        }
    }
}

impl SweepSpec {
    pub fn parsed_budgets(&self) -> Result<Vec<Option<usize>>> {
        self.budgets
            .iter()
            .map(|b| {
                if b == "inf" {
                    Ok(None)
                } else {
                    b.parse::<usize>()
                        .map(Some)
                        .map_err(|_| Error::InvalidConfig(format!("bad budget '{b}'")))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OffloadSpec {
    pub bandwidth_bytes_per_s: f64,
    pub per_transfer_latency_s: f64,
    pub full_cache_on_device: bool,
    pub flops_per_s: f64,
}

impl Default for OffloadSpec {
    fn default() -> Self {
        OffloadSpec {
            bandwidth_bytes_per_s: 16e9,
            per_transfer_latency_s: 10e-6,
            full_cache_on_device: false,
            flops_per_s: 1e11,
        }
    }
}

impl OffloadSpec {
    pub fn cost_model(&self) -> OffloadCostModel {
        OffloadCostModel {
            bandwidth_bytes_per_s: self.bandwidth_bytes_per_s,
            per_transfer_latency_s: self.per_transfer_latency_s,
            full_cache_on_device: self.full_cache_on_device,
            partial_cache_on_device: true,
            draft_cache_on_device: true,
        }
    }

    pub fn compute_model(&self) -> ComputeModel {
        ComputeModel {
            flops_per_s: self.flops_per_s,
        }
    }
}

/// Whole-bench configuration; schema documented in `docs/config.md`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub drafter: DrafterSpec,
    pub generation: GenerationSpec,
    pub sweep: SweepSpec,
    pub offload: OffloadSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweep.context_lengths.is_empty() {
            return Err(Error::InvalidConfig("no context lengths".into()));
        }
        if self.sweep.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be >= 1".into()));
        }
        self.sweep.parsed_budgets()?;
        self.generation
            .to_config(None, self.sweep.context_lengths[0])?;
        self.drafter.build(&self.model.build()?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellReport {
    pub method: String,
    pub context_len: usize,
    pub budget: Option<usize>,
    pub status: String,
    pub tokens: usize,
    pub steps: usize,
    pub decode_wall_s: f64,
    pub decode_modeled_s: f64,
    pub alpha_measured: Option<f64>,
    pub alpha_modeled: Option<f64>,
    pub tau: Option<f64>,
    pub rouge_l_vs_full: Option<f64>,
    pub output_hash: String,
    pub records: Vec<StepRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub cells: Vec<CellReport>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Bench(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Bench(format!("report parse: {e}")))
    }

    /// Flat CSV with one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,context_len,budget,alpha_measured,alpha_modeled,tau,rouge_l,steps,tokens\n",
        );
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for c in &self.cells {
            let budget = match (&c.method[..], c.budget) {
                ("ar", _) => String::new(),
                (_, Some(b)) => b.to_string(),
                (_, None) => "inf".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.method,
                c.context_len,
                budget,
                fmt_opt(c.alpha_measured),
                fmt_opt(c.alpha_modeled),
                fmt_opt(c.tau),
                fmt_opt(c.rouge_l_vs_full),
                c.steps,
                c.tokens,
            ));
        }
        out
    }

    /// All cells succeeded.
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.status == "ok")
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn hash_tokens(tokens: &[Token]) -> String {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for &t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    format!("{:016x}", fnv1a64(&bytes))
}

// ---------------------------------------------------------------------------
// Bench execution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CellKey {
    method: String,
    context_len: usize,
    budget: Option<usize>,
}

struct CellRun {
    key: CellKey,
    status: String,
    outputs: Vec<Vec<Token>>, // one per repetition
    records: Vec<StepRecord>,
    decode_wall_s: f64,
    decode_modeled_s: f64,
    tokens: usize,
}

fn run_cell(cfg: &RunConfig, model: &TinyTransformer, key: &CellKey) -> CellRun {
    let mut outputs = Vec::new();
    let mut records: Vec<StepRecord> = Vec::new();
    let mut decode_wall = 0.0;
    let mut tokens = 0usize;
    let mut status = "ok".to_string();
    let cost = cfg.offload.cost_model();
    let compute = cfg.offload.compute_model();

    for rep in 0..cfg.sweep.repetitions {
        let prompt = gen_corpus(
            cfg.sweep.corpus_seed.wrapping_add(rep as u64),
            key.context_len,
            model.config().vocab_size,
        );
        let run = (|| -> Result<_> {
            let gen_cfg = cfg.generation.to_config(key.budget, key.context_len)?;
            if key.method == "ar" {
                autoregressive_generate(model, &prompt, &gen_cfg, &cost, &compute)
            } else {
                let drafter = cfg.drafter.build(model)?;
                generate(model, drafter, &prompt, gen_cfg, cost.clone(), compute)
            }
        })();
        match run {
            Ok(outcome) => {
                tokens += outcome.new_tokens(prompt.len());
                decode_wall += outcome.decode_wall_s;
                outputs.push(outcome.tokens[prompt.len()..].to_vec());
                records.extend(outcome.records);
            }
            Err(e) => {
                status = format!("failed: {e}");
                break;
            }
        }
    }
    // flat sum over pooled records so the aggregate can be recomputed
    // from the report exactly
    let decode_modeled: f64 = records
        .iter()
        .map(|r| r.modeled_draft_s + r.modeled_verify_s)
        .sum();
    CellRun {
        key: key.clone(),
        status,
        outputs,
        records,
        decode_wall_s: decode_wall,
        decode_modeled_s: decode_modeled,
        tokens,
    }
}

/// Execute the sweep and assemble the report. Cell failures are recorded
/// and do not abort the run.
pub fn run_bench(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let model = Arc::new(cfg.model.build()?);
    let budgets = cfg.sweep.parsed_budgets()?;

    let mut keys = Vec::new();
    for &ctx in &cfg.sweep.context_lengths {
        keys.push(CellKey {
            method: "ar".into(),
            context_len: ctx,
            budget: None,
        });
        for budget in &budgets {
            keys.push(CellKey {
                method: match budget {
                    None => "full-verify".into(),
                    Some(_) => "partial".into(),
                },
                context_len: ctx,
                budget: *budget,
            });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.workers)
        .build()
        .map_err(|e| Error::Bench(format!("thread pool: {e}")))?;
    let runs: Vec<CellRun> = pool.install(|| {
        keys.par_iter()
            .map(|key| run_cell(cfg, &model, key))
            .collect()
    });

    // single-writer assembly: alpha against the ar cell, rouge against the
    // full-verify cell at the same context length
    let mut cells = Vec::with_capacity(runs.len());
    for run in &runs {
        let ar = runs
            .iter()
            .find(|r| r.key.method == "ar" && r.key.context_len == run.key.context_len);
        let full = runs
            .iter()
            .find(|r| r.key.method == "full-verify" && r.key.context_len == run.key.context_len);

        let ok = run.status == "ok";
        let alpha = |time: f64, ar_time: f64| -> Option<f64> {
            if ok && time > 0.0 && ar_time > 0.0 && run.tokens > 0 {
                metrics::speedup_alpha(run.tokens, time, ar_time).ok()
            } else {
                None
            }
        };
        let alpha_measured = ar
            .filter(|a| a.status == "ok")
            .and_then(|a| alpha(run.decode_wall_s, a.decode_wall_s));
        let alpha_modeled = ar
            .filter(|a| a.status == "ok")
            .and_then(|a| alpha(run.decode_modeled_s, a.decode_modeled_s));
        let tau = if ok && run.key.method != "ar" && !run.records.is_empty() {
            metrics::accept_length_tau(&run.records).ok()
        } else {
            None
        };
        let rouge = full.filter(|f| f.status == "ok" && ok).and_then(|f| {
            let mut scores = Vec::new();
            for (a, b) in run.outputs.iter().zip(&f.outputs) {
                if let Ok(s) = metrics::rouge_l(a, b) {
                    scores.push(s);
                }
            }
            if scores.is_empty() {
                None
            } else {
                Some(scores.iter().sum::<f64>() / scores.len() as f64)
            }
        });
        let mut all_tokens = Vec::new();
        for o in &run.outputs {
            all_tokens.extend_from_slice(o);
        }
        cells.push(CellReport {
            method: run.key.method.clone(),
            context_len: run.key.context_len,
            budget: run.key.budget,
            status: run.status.clone(),
            tokens: run.tokens,
            steps: run.records.len(),
            decode_wall_s: run.decode_wall_s,
            decode_modeled_s: run.decode_modeled_s,
            alpha_measured,
            alpha_modeled,
            tau,
            rouge_l_vs_full: rouge,
            output_hash: hash_tokens(&all_tokens),
            records: run.records.clone(),
        });
    }

    Ok(RunReport {
        schema: REPORT_SCHEMA.into(),
        cells,
    })
}
