//! Command-line driver: model initialization, one-off generation, bench
//! sweeps, partial-vs-full comparison, and plot rendering.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use specpv::engine::{autoregressive_generate, generate};
use specpv::harness::{self, metrics, plots, RunConfig, RunReport};
use specpv::model::{checkpoint, Token};

#[derive(Parser)]
#[command(name = "specpv", version, about = "Speculative decoding with partial KV-cache verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Load the target model from a checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Seed a fresh model instead of loading one.
    #[arg(long, default_value_t = 7)]
    model_seed: u64,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    ffn_dim: usize,
}

impl ModelArgs {
    fn spec(&self) -> harness::ModelSpec {
        harness::ModelSpec {
            path: self.model.as_ref().map(|p| p.display().to_string()),
            seed: self.model_seed,
            vocab_size: self.vocab,
            dim: self.dim,
            n_layers: self.layers,
            n_heads: self.heads,
            head_dim: self.dim / self.heads,
            ffn_dim: self.ffn_dim,
            feature_tap_layers: default_taps(self.layers),
        }
    }
}

fn default_taps(n_layers: usize) -> Vec<usize> {
    match n_layers {
        1 => vec![0],
        2 => vec![0, 1],
        3 => vec![0, 1, 2],
        n => vec![0, n / 2, n - 1],
    }
}

#[derive(Args, Clone)]
struct GenArgs {
    /// Comma-separated explicit prompt token ids.
    #[arg(long)]
    prompt: Option<String>,
    /// Synthetic prompt length when no explicit prompt is given.
    #[arg(long, default_value_t = 128)]
    prompt_len: usize,
    #[arg(long, default_value_t = 99)]
    corpus_seed: u64,
    #[arg(long, default_value_t = 64)]
    new_tokens: usize,
    /// Partial-verification budget in tokens, or "inf".
    #[arg(long, default_value = "inf")]
    budget: String,
    /// eagle-like | mock-identical | mock-noisy | mock-random
    #[arg(long, default_value = "eagle-like")]
    drafter: String,
    #[arg(long, default_value_t = 0.9)]
    noise_p: f32,
    #[arg(long, default_value_t = 3)]
    drafter_seed: u64,
    /// 0 disables sampling (greedy).
    #[arg(long, default_value_t = 0.0)]
    temperature: f32,
    #[arg(long, default_value_t = 11)]
    seed: u64,
    /// chain<d> | binary<d> | eagle
    #[arg(long, default_value = "chain4")]
    template: String,
    #[arg(long, default_value_t = 64)]
    chunk_size: usize,
    #[arg(long)]
    eos: Option<Token>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded model checkpoint.
    InitModel {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate tokens once and print them with step statistics.
    Generate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Run a bench sweep from a config file; writes report.json/report.csv.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: $SPECPV_OUT_DIR or ./out).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also render the charts.
        #[arg(long, default_value_t = false)]
        plot: bool,
    },
    /// Compare partial budgets against full verification at one context.
    Compare {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long, default_value_t = 1024)]
        context: usize,
        /// Comma-separated budgets to compare.
        #[arg(long, default_value = "512,256")]
        budgets: String,
    },
    /// Render charts from an existing report.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn out_dir_or_default(dir: Option<PathBuf>) -> PathBuf {
    dir.or_else(|| std::env::var_os("SPECPV_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn parse_budget(text: &str) -> specpv::Result<Option<usize>> {
    if text == "inf" {
        Ok(None)
    } else {
        text.parse::<usize>()
            .map(Some)
            .map_err(|_| specpv::Error::InvalidConfig(format!("bad budget '{text}'")))
    }
}

fn gen_spec(gen: &GenArgs) -> harness::GenerationSpec {
    harness::GenerationSpec {
        max_new_tokens: gen.new_tokens,
        temperature: gen.temperature,
        seed: gen.seed,
        template: gen.template.clone(),
        template_parents: Vec::new(),
        chunk_size: gen.chunk_size,
        eos_token: gen.eos,
        ..harness::GenerationSpec::default()
    }
}

fn drafter_spec(gen: &GenArgs) -> harness::DrafterSpec {
    harness::DrafterSpec {
        kind: gen.drafter.clone(),
        p_copy: gen.noise_p,
        seed: gen.drafter_seed,
    }
}

fn prompt_tokens(gen: &GenArgs, vocab: usize) -> specpv::Result<Vec<Token>> {
    match &gen.prompt {
        Some(text) => text
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<Token>()
                    .map_err(|_| specpv::Error::InvalidConfig(format!("bad token '{t}'")))
            })
            .collect(),
        None => Ok(harness::gen_corpus(gen.corpus_seed, gen.prompt_len, vocab)),
    }
}

fn run() -> specpv::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::InitModel { model, out } => {
            let m = model.spec().build()?;
            checkpoint::save_checkpoint(&m, &out)?;
            println!(
                "wrote {} ({} parameters)",
                out.display(),
                m.param_count()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate { model, gen } => {
            let m = model.spec().build()?;
            let prompt = prompt_tokens(&gen, m.config().vocab_size)?;
            let budget = parse_budget(&gen.budget)?;
            let cfg = gen_spec(&gen).to_config(budget, prompt.len())?;
            let offload = harness::OffloadSpec::default();
            let drafter = drafter_spec(&gen).build(&m)?;
            let out = generate(
                &m,
                drafter,
                &prompt,
                cfg,
                offload.cost_model(),
                offload.compute_model(),
            )?;
            let new = &out.tokens[prompt.len()..];
            println!(
                "{}",
                new.iter()
                    .map(|t| t.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            let tau = metrics::accept_length_tau(&out.records).unwrap_or(0.0);
            eprintln!(
                "steps={} tau={:.3} new_tokens={} prefill={:.3}s decode={:.3}s modeled_decode={:.6}s",
                out.records.len(),
                tau,
                new.len(),
                out.prefill_wall_s,
                out.decode_wall_s,
                out.decode_modeled_s(),
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { config, out_dir, plot } => {
            let text = std::fs::read_to_string(&config)?;
            let cfg = RunConfig::from_toml(&text)?;
            let report = harness::run_bench(&cfg)?;
            let dir = out_dir_or_default(out_dir);
            std::fs::create_dir_all(&dir)?;
            let json_path = dir.join("report.json");
            let csv_path = dir.join("report.csv");
            std::fs::write(&json_path, report.to_json()?)?;
            std::fs::write(&csv_path, report.to_csv())?;
            println!("wrote {} and {}", json_path.display(), csv_path.display());
            if plot {
                for p in plots::emit_plots(&report, &dir)? {
                    println!("wrote {}", p.display());
                }
            }
            for cell in &report.cells {
                if cell.status != "ok" {
                    eprintln!(
                        "cell {} ctx={} budget={:?}: {}",
                        cell.method, cell.context_len, cell.budget, cell.status
                    );
                }
            }
            Ok(if report.all_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Compare { model, gen, context, budgets } => {
            let m = model.spec().build()?;
            let prompt = harness::gen_corpus(gen.corpus_seed, context, m.config().vocab_size);
            let offload = harness::OffloadSpec::default();
            let cost = offload.cost_model();
            let compute = offload.compute_model();

            let full_cfg = gen_spec(&gen).to_config(None, context)?;
            let ar = autoregressive_generate(&m, &prompt, &full_cfg, &cost, &compute)?;
            let drafter = drafter_spec(&gen).build(&m)?;
            let full = generate(&m, drafter, &prompt, full_cfg, cost.clone(), compute)?;
            let full_new = &full.tokens[prompt.len()..];
            println!("method,budget,rouge_l_vs_full,tau,alpha_measured");
            let tau_full = metrics::accept_length_tau(&full.records)?;
            let alpha_full =
                metrics::speedup_alpha(full_new.len(), full.decode_wall_s, ar.decode_wall_s)?;
            println!("full-verify,inf,100.000,{tau_full:.3},{alpha_full:.3}");
            for b in budgets.split(',') {
                let budget: usize = b.trim().parse().map_err(|_| {
                    specpv::Error::InvalidConfig(format!("bad budget '{b}'"))
                })?;
                let cfg = gen_spec(&gen).to_config(Some(budget), context)?;
                let drafter = drafter_spec(&gen).build(&m)?;
                let out = generate(&m, drafter, &prompt, cfg, cost.clone(), compute)?;
                let new = &out.tokens[prompt.len()..];
                let rouge = metrics::rouge_l(new, full_new)?;
                let tau = metrics::accept_length_tau(&out.records)?;
                let alpha =
                    metrics::speedup_alpha(new.len(), out.decode_wall_s, ar.decode_wall_s)?;
                println!("partial,{budget},{rouge:.3},{tau:.3},{alpha:.3}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Plot { report, out_dir } => {
            let text = std::fs::read_to_string(&report)?;
            let parsed = RunReport::from_json(&text)?;
            let dir = out_dir_or_default(out_dir);
            let written = plots::emit_plots(&parsed, &dir)?;
            if written.is_empty() {
                eprintln!("warning: empty sweep, no charts written");
            }
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
