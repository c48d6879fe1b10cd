//! `tebopt`: encode prompts, optimize embeddings, compare attention maps and
//! score detector output.
//!
//! ```text
//! tebopt encode --prompt "a cat and a dog" --objects cat,dog --out emb.json
//! tebopt optimize --embeddings emb.json --out opt.json --trace trace.json
//! tebopt attn map --embeddings opt.json --token 2 --out cat-map.json
//! tebopt evaluate --detections det.jsonl --out report/
//! tebopt bench --k 2 --count 40 --seed 0 --out run/
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tebopt_core::attention::{
    cross_attention_map, read_map, sim_dist_correlation, sym_kl, synthetic_queries, token_sim_matrix, write_map,
    PairStats, DEFAULT_MAP_SIDE,
};
use tebopt_core::encoder::{mask_token_embeddings, parse_index_spec, AttentionScope, BlockKind};
use tebopt_core::eval::{compare_runs, read_detections, tally_run, EvalConfig, OverlapMeasure, RunReport};
use tebopt_core::harness::{generate_prompt_set, run_pipeline, PipelineConfig, CI_PROMPT_COUNT};
use tebopt_core::teb::{build_pure_embeddings, optimize, replace_with_pure, teb_loss, trace_records};
use tebopt_core::tokenizer::layout_for;
use tebopt_core::{
    read_embeddings, write_embeddings, AttentionMask, EncoderConfig, OptimizerConfig, Provenance, PureEmbeddingSet,
    TextEncoder,
};

#[derive(Parser)]
#[command(name = "tebopt", version, about = "Text-embedding balance toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a prompt with the toy causal encoder.
    Encode(EncodeArgs),
    /// Pure embeddings ("a photo of a <obj>") for a list of objects.
    Pure(PureArgs),
    /// Evaluate the balance loss of an embedding file.
    Loss(LossArgs),
    /// Run the balance optimizer on an embedding file.
    Optimize(OptimizeArgs),
    /// Replace later critical rows with their pure embeddings.
    Replace(ReplaceArgs),
    /// Attention-map utilities.
    #[command(subcommand)]
    Attn(AttnCommand),
    /// Score detector output (JSON Lines) into mixture/missing categories.
    Evaluate(EvaluateArgs),
    /// Generate a prompt benchmark and run it end to end.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct EncoderArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Maximum sequence length N.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Encoder weight seed.
    #[arg(long = "encoder-seed", default_value_t = 0)]
    encoder_seed: u64,
    /// Bare attention layers instead of the pre-norm block.
    #[arg(long)]
    attention_only: bool,
    /// Every token attends only to itself (no information flow).
    #[arg(long)]
    self_only: bool,
}

impl EncoderArgs {
    fn config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            d: self.d,
            n: self.n,
            seed: self.encoder_seed,
            block: if self.attention_only { BlockKind::AttentionOnly } else { BlockKind::PreNorm },
            scope: if self.self_only { AttentionScope::SelfOnly } else { AttentionScope::Causal },
        }
    }

    fn encoder(&self) -> Result<TextEncoder> {
        Ok(TextEncoder::new(self.config())?)
    }
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    prompt: String,
    /// Critical objects in mention order, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    objects: Vec<String>,
    /// Token positions to hide from downstream attention, e.g. "1-5" or "2,5";
    /// written next to the output as `<stem>.mask.json`.
    #[arg(long)]
    mask: Option<String>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PureArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    objects: Vec<String>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PureSource {
    /// Pure-embedding JSON from `tebopt pure`; built with the encoder flags
    /// when omitted.
    #[arg(long)]
    pure: Option<PathBuf>,
    #[command(flatten)]
    encoder: EncoderArgs,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    source: PureSource,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    source: PureSource,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    max_iters: usize,
    #[arg(long, default_value_t = -0.7, allow_negative_numbers = true)]
    target: f64,
    /// Rows to update (index spec); defaults to the critical set.
    #[arg(long)]
    update_rows: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration loss trace (JSON).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct ReplaceArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[command(flatten)]
    source: PureSource,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AttnCommand {
    /// Synthetic cross-attention map of one token.
    Map {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        token: usize,
        #[arg(long, default_value_t = DEFAULT_MAP_SIDE)]
        side: usize,
        /// Seed for the synthetic image queries.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Mask file from `encode --mask`, or an index spec.
        #[arg(long)]
        mask: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Symmetric KL distance between two maps.
    Dist { a: PathBuf, b: PathBuf },
    /// Token similarity matrix of single-word encodings.
    Simmat {
        #[arg(long, value_delimiter = ',', required = true)]
        words: Vec<String>,
        #[command(flatten)]
        encoder: EncoderArgs,
    },
    /// Pearson and Spearman correlation of token similarity vs map distance.
    Corr {
        /// JSON list of {a, b, token_sim, map_dist}.
        #[arg(long)]
        pairs: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value_t = 0.90)]
    overlap: f64,
    #[arg(long, default_value_t = 0.25)]
    single_conf: f64,
    #[arg(long, default_value_t = 0.15)]
    mixture_conf: f64,
    /// min-area | iou
    #[arg(long, default_value = "min-area")]
    measure: OverlapMeasure,
}

impl EvalArgs {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            overlap_threshold: self.overlap,
            single_conf: self.single_conf,
            mixture_conf: self.mixture_conf,
            measure: self.measure,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    detections: PathBuf,
    #[command(flatten)]
    eval: EvalArgs,
    /// Baseline detections; adds per-pair balance improvement.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Directory for report.md, report.csv and summary.json; markdown goes
    /// to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 400)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    detections: Option<PathBuf>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    out: PathBuf,
}

fn write_pretty<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn mask_path(out: &Path) -> PathBuf {
    out.with_extension("mask.json")
}

fn load_pure(source: &PureSource, embeddings: &tebopt_core::EmbeddingMatrix) -> Result<PureEmbeddingSet> {
    match &source.pure {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let set: PureEmbeddingSet = serde_json::from_str(&text)?;
            set.validate()?;
            Ok(set)
        }
        None => {
            let mut enc = source.encoder.config();
            enc.d = embeddings.d();
            Ok(build_pure_embeddings(embeddings.layout(), &TextEncoder::new(enc)?)?)
        }
    }
}

fn load_mask(spec: &str, n: usize) -> Result<AttentionMask> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = fs::read_to_string(path)?;
        let m: AttentionMask = serde_json::from_str(&text)?;
        if m.len() != n {
            bail!("mask covers {} tokens but embeddings have N = {n}", m.len());
        }
        return Ok(AttentionMask::new((0..m.len()).map(|i| m.keeps(i)).collect(), m.penalty())?);
    }
    Ok(AttentionMask::dropping(n, &parse_index_spec(spec)?)?)
}

fn encode(args: EncodeArgs) -> Result<()> {
    let objects: Vec<&str> = args.objects.iter().map(String::as_str).collect();
    let layout = layout_for(&args.prompt, &objects, args.encoder.n)?;
    let mat = args.encoder.encoder()?.encode(&layout, None)?;
    write_embeddings(&mat, &args.out, Provenance::Toy)?;
    if let Some(spec) = &args.mask {
        let mask = mask_token_embeddings(&mat, &parse_index_spec(spec)?)?;
        write_pretty(&mask_path(&args.out), &mask)?;
    }
    eprintln!("critical tokens {:?}, m = {}", layout.critical(), layout.m());
    Ok(())
}

fn run_optimize(args: OptimizeArgs) -> Result<()> {
    let (mat, _) = read_embeddings(&args.embeddings)?;
    let pure = load_pure(&args.source, &mat)?;
    let cfg = OptimizerConfig {
        max_iters: args.max_iters,
        target: args.target,
        learning_rate: args.lr,
        update_set: args.update_rows.as_deref().map(parse_index_spec).transpose()?,
    };
    let outcome = optimize(&mat, &pure, &cfg)?;
    write_embeddings(&outcome.matrix, &args.out, Provenance::Toy)?;
    if let Some(trace) = &args.trace {
        write_pretty(trace, &trace_records(&outcome.trace))?;
    }
    let first = outcome.trace.first().expect("non-empty trace");
    let last = outcome.trace.last().expect("non-empty trace");
    eprintln!(
        "{} iteration(s), total {:.4} -> {:.4}, target {}",
        outcome.trace.len(),
        first.total,
        last.total,
        if outcome.reached_target { "reached" } else { "not reached" }
    );
    Ok(())
}

fn attn(cmd: AttnCommand) -> Result<()> {
    match cmd {
        AttnCommand::Map { embeddings, token, side, seed, mask, out } => {
            let (mat, _) = read_embeddings(&embeddings)?;
            let mask = mask.as_deref().map(|m| load_mask(m, mat.n())).transpose()?;
            let queries = synthetic_queries(side * side, mat.d(), seed);
            let raw = cross_attention_map(&queries, &mat, token, mask.as_ref(), side, side)?;
            // A masked token's map underflows to zero and stays unnormalized.
            let map = if raw.sum() > 0.0 {
                raw.normalize()?
            } else {
                eprintln!("token {token} receives no attention; writing the raw map");
                raw
            };
            write_map(&map, &out, Some(token), None)?;
        }
        AttnCommand::Dist { a, b } => {
            let (a, _) = read_map(&a)?;
            let (b, _) = read_map(&b)?;
            println!("{}", sym_kl(&a.normalize()?, &b.normalize()?)?);
        }
        AttnCommand::Simmat { words, encoder } => {
            let refs: Vec<&str> = words.iter().map(String::as_str).collect();
            let m = token_sim_matrix(&refs, &encoder.encoder()?)?;
            let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
            print_json(&serde_json::json!({ "words": words, "matrix": rows }))?;
        }
        AttnCommand::Corr { pairs } => {
            let text = fs::read_to_string(&pairs).with_context(|| format!("reading {}", pairs.display()))?;
            let stats: Vec<PairStats> = serde_json::from_str(&text)?;
            print_json(&sim_dist_correlation(&stats)?)?;
        }
    }
    Ok(())
}

fn load_report(path: &Path, cfg: &EvalConfig) -> Result<RunReport> {
    let (records, unparsed) = read_detections(path)?;
    let mut report = tally_run(&records, cfg)?;
    report.add_unparsed(unparsed);
    Ok(report)
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = args.eval.config();
    let report = load_report(&args.detections, &cfg)?;
    let comparison = match &args.compare {
        Some(base) => Some(compare_runs(&load_report(base, &cfg)?, &report)?),
        None => None,
    };
    let mut md = report.to_markdown();
    if let Some(rows) = &comparison {
        md.push_str("\n| Pair | Bias before | Bias after | Balance improvement |\n|---|---:|---:|---:|\n");
        let fmt = |v: Option<f64>, suffix: &str| v.map_or_else(|| "undefined".into(), |x| format!("{x:.3}{suffix}"));
        for c in rows {
            md.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                c.pair,
                fmt(c.before, ""),
                fmt(c.after, ""),
                fmt(c.improvement_percent, "%")
            ));
        }
    }
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join("report.md"), md)?;
            fs::write(dir.join("report.csv"), report.to_csv())?;
            write_pretty(&dir.join("summary.json"), &serde_json::json!({ "report": report, "comparison": comparison }))?;
        }
        None => print!("{md}"),
    }
    if !report.invalid.is_empty() {
        eprintln!("{} invalid record(s)", report.invalid.len());
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    if args.count == 0 {
        bail!("--count must be at least 1 (CI runs typically use {CI_PROMPT_COUNT})");
    }
    let specs = generate_prompt_set(args.k, args.count, args.seed)?;
    let cfg = PipelineConfig {
        encoder: args.encoder.config(),
        eval: args.eval.config(),
        detections: args.detections,
        ..Default::default()
    };
    let summary = run_pipeline(&specs, &cfg, &args.out)?;
    eprintln!("{} of {} specs succeeded; results in {}", summary.succeeded, summary.specs, args.out.display());
    for f in &summary.failures {
        eprintln!("failed {}: {}", f.id, f.error);
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Encode(args) => encode(args),
        Command::Pure(args) => {
            let objects: Vec<&str> = args.objects.iter().map(String::as_str).collect();
            // Any layout naming the objects works; pure vectors depend only on the names.
            let text = objects.join(" ");
            let layout = layout_for(&text, &objects, args.encoder.n.max(objects.len() + 2))?;
            let set = build_pure_embeddings(&layout, &args.encoder.encoder()?)?;
            write_pretty(&args.out, &set)
        }
        Command::Loss(args) => {
            let (mat, _) = read_embeddings(&args.embeddings)?;
            print_json(&teb_loss(&mat, &load_pure(&args.source, &mat)?)?)
        }
        Command::Optimize(args) => run_optimize(args),
        Command::Replace(args) => {
            let (mat, _) = read_embeddings(&args.embeddings)?;
            let out = replace_with_pure(&mat, &load_pure(&args.source, &mat)?)?;
            Ok(write_embeddings(&out, &args.out, Provenance::Toy)?)
        }
        Command::Attn(cmd) => attn(cmd),
        Command::Evaluate(args) => evaluate(args),
        Command::Bench(args) => bench(args),
    }
}
