//! Prompt benchmark generation and end-to-end desk-scale runs.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |---|---|
//! | `run.json` | configs and every spec with its seed |
//! | `traces/<id>.json` | per-iteration loss trace |
//! | `embeddings/<id>-{pre,post}.json` | embeddings before and after optimization |
//! | `summary.json` | per-spec statistics, run means, failures, evaluation |
//! | `report.md`, `report.csv` | human-readable tables |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{cross_attention_map, sym_kl, synthetic_queries, DEFAULT_MAP_SIDE};
use crate::embedding::EmbeddingMatrix;
use crate::encoder::{EncoderConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::eval::{read_detections, tally_run, DetectionRecord, EvalConfig, RunReport};
use crate::interchange::{write_embeddings, write_json, Provenance};
use crate::rng::{self, domain};
use crate::teb::{build_pure_embeddings, mean_critical_similarity, optimize, trace_records, OptimizerConfig};
use crate::tokenizer::layout_for;

pub const ANIMALS: [&str; 17] = [
    "cat", "dog", "bird", "bear", "lion", "horse", "elephant", "monkey", "frog", "turtle", "rabbit", "mouse", "panda",
    "zebra", "gorilla", "penguin", "chicken",
];

pub const DEFAULT_PROMPT_COUNT: usize = 400;
pub const CI_PROMPT_COUNT: usize = 40;

/// Object orders per variant, as positions into the sampled tuple.
const ORDERS_2: [[usize; 2]; 2] = [[0, 1], [1, 0]];
const ORDERS_3: [[usize; 3]; 6] = [[0, 1, 2], [1, 0, 2], [2, 1, 0], [0, 2, 1], [1, 2, 0], [2, 0, 1]];

pub fn permutations(k: usize) -> Result<Vec<Vec<usize>>> {
    match k {
        2 => Ok(ORDERS_2.iter().map(|o| o.to_vec()).collect()),
        3 => Ok(ORDERS_3.iter().map(|o| o.to_vec()).collect()),
        _ => Err(Error::Config(format!("k = {k} unsupported (2 or 3)"))),
    }
}

pub fn article(name: &str) -> &'static str {
    match name.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// "a cat and an elephant", "a cat and a dog and a bird".
pub fn prompt_text(objects: &[&str]) -> String {
    objects.iter().map(|o| format!("{} {o}", article(o))).collect::<Vec<_>>().join(" and ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    /// `<tuple index><variant letter>`, e.g. `0007b`.
    pub id: String,
    pub tuple_index: usize,
    /// Variant letter: `a` is the sampled order.
    pub variant: char,
    /// The sampled tuple, shared by every variant.
    pub tuple: Vec<String>,
    /// Objects in prompt order.
    pub objects: Vec<String>,
    pub prompt: String,
    pub seed: u64,
}

impl PromptSpec {
    pub fn object_refs(&self) -> Vec<&str> {
        self.objects.iter().map(String::as_str).collect()
    }
}

/// Per-tuple seed: base seed mixed with the tuple index and a hash of the
/// tuple's names, so it depends only on the spec's own fields.
pub fn tuple_seed(base: u64, tuple_index: usize, tuple: &[&str]) -> u64 {
    rng::derive_seed(base, &[domain::PROMPT, tuple_index as u64, rng::fnv1a64(tuple.join(",").as_bytes())])
}

/// `count` tuples of `k` distinct animals, each emitted in every order
/// variant. Output is sorted by id.
pub fn generate_prompt_set(k: usize, count: usize, seed: u64) -> Result<Vec<PromptSpec>> {
    let orders = permutations(k)?;
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let mut r = rng::stream(seed, &[domain::PROMPT, k as u64]);
    let width = count.to_string().len().max(4);
    let mut out = Vec::with_capacity(count * orders.len());
    for t in 0..count {
        let tuple: Vec<&str> = sample(&mut r, ANIMALS.len(), k).iter().map(|i| ANIMALS[i]).collect();
        let spec_seed = tuple_seed(seed, t, &tuple);
        for (v, order) in orders.iter().enumerate() {
            let objects: Vec<&str> = order.iter().map(|&i| tuple[i]).collect();
            let variant = (b'a' + v as u8) as char;
            out.push(PromptSpec {
                id: format!("{t:0width$}{variant}"),
                tuple_index: t,
                variant,
                tuple: tuple.iter().map(|s| s.to_string()).collect(),
                prompt: prompt_text(&objects),
                objects: objects.iter().map(|s| s.to_string()).collect(),
                seed: spec_seed,
            });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub encoder: EncoderConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
    /// Side length of the synthetic cross-attention maps.
    pub map_side: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
            map_side: DEFAULT_MAP_SIDE,
            detections: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecResult {
    pub id: String,
    pub prompt: String,
    pub iterations: usize,
    pub reached_target: bool,
    pub initial_total: f64,
    pub final_total: f64,
    /// Mean pairwise cosine similarity between critical rows.
    pub token_sim_pre: f64,
    pub token_sim_post: f64,
    /// Mean pairwise symmetric KL between the objects' attention maps.
    pub map_dist_pre: f64,
    pub map_dist_post: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeans {
    pub token_sim_pre: f64,
    pub token_sim_post: f64,
    pub map_dist_pre: f64,
    pub map_dist_post: f64,
    pub reached_target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEvaluation {
    pub variant: String,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub specs: usize,
    pub succeeded: usize,
    pub means: Option<RunMeans>,
    pub failures: Vec<SpecFailure>,
    pub results: Vec<SpecResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evaluation: Vec<VariantEvaluation>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a PipelineConfig,
    specs: &'a [PromptSpec],
}

fn mean_map_distance(eps: &EmbeddingMatrix, queries: &ndarray::Array2<f64>, side: usize) -> Result<f64> {
    let maps = eps
        .layout()
        .critical()
        .iter()
        .map(|&i| cross_attention_map(queries, eps, i, None, side, side)?.normalize())
        .collect::<Result<Vec<_>>>()?;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..maps.len() {
        for b in a + 1..maps.len() {
            sum += sym_kl(&maps[a], &maps[b])?;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { sum / pairs as f64 })
}

fn run_spec(spec: &PromptSpec, encoder: &TextEncoder, cfg: &PipelineConfig, out: &Path) -> Result<SpecResult> {
    let layout = layout_for(&spec.prompt, &spec.object_refs(), cfg.encoder.n)?;
    let eps = encoder.encode(&layout, None)?;
    let pure = build_pure_embeddings(&layout, encoder)?;
    let outcome = optimize(&eps, &pure, &cfg.optimizer)?;
    let queries = synthetic_queries(cfg.map_side * cfg.map_side, cfg.encoder.d, spec.seed);

    write_json(&out.join("traces").join(format!("{}.json", spec.id)), &trace_records(&outcome.trace))?;
    let emb = out.join("embeddings");
    write_embeddings(&eps, &emb.join(format!("{}-pre.json", spec.id)), Provenance::Toy)?;
    write_embeddings(&outcome.matrix, &emb.join(format!("{}-post.json", spec.id)), Provenance::Toy)?;

    let first = outcome.trace.first().expect("optimize always evaluates once");
    let last = outcome.trace.last().expect("optimize always evaluates once");
    Ok(SpecResult {
        id: spec.id.clone(),
        prompt: spec.prompt.clone(),
        iterations: outcome.trace.len(),
        reached_target: outcome.reached_target,
        initial_total: first.total,
        final_total: last.total,
        token_sim_pre: mean_critical_similarity(&eps)?,
        token_sim_post: mean_critical_similarity(&outcome.matrix)?,
        map_dist_pre: mean_map_distance(&eps, &queries, cfg.map_side)?,
        map_dist_post: mean_map_distance(&outcome.matrix, &queries, cfg.map_side)?,
    })
}

fn means(results: &[SpecResult]) -> Option<RunMeans> {
    if results.is_empty() {
        return None;
    }
    let n = results.len() as f64;
    let avg = |f: fn(&SpecResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    Some(RunMeans {
        token_sim_pre: avg(|r| r.token_sim_pre),
        token_sim_post: avg(|r| r.token_sim_post),
        map_dist_pre: avg(|r| r.map_dist_pre),
        map_dist_post: avg(|r| r.map_dist_post),
        reached_target: results.iter().filter(|r| r.reached_target).count(),
    })
}

/// Split detection records by the variant of the spec whose prompt they
/// carry (first spec by id wins on duplicate prompts) and evaluate each
/// group plus the whole file.
fn evaluate(specs: &[PromptSpec], records: Vec<DetectionRecord>, cfg: &EvalConfig) -> Result<Vec<VariantEvaluation>> {
    let mut variant_of: BTreeMap<&str, char> = BTreeMap::new();
    for s in specs {
        variant_of.entry(s.prompt.as_str()).or_insert(s.variant);
    }
    let mut groups: BTreeMap<String, Vec<DetectionRecord>> = BTreeMap::new();
    for r in &records {
        let key = variant_of.get(r.prompt.as_str()).map_or_else(|| "unmatched".to_string(), |v| format!("({v})"));
        groups.entry(key).or_default().push(r.clone());
    }
    let mut out = vec![VariantEvaluation { variant: "all".into(), report: tally_run(&records, cfg)? }];
    for (variant, recs) in groups {
        out.push(VariantEvaluation { variant, report: tally_run(&recs, cfg)? });
    }
    Ok(out)
}

/// Run every spec (in parallel) and write the run directory. Failing specs
/// are recorded in the summary and do not stop the run.
pub fn run_pipeline(specs: &[PromptSpec], cfg: &PipelineConfig, out: &Path) -> Result<RunSummary> {
    cfg.encoder.validate()?;
    cfg.optimizer.validate()?;
    cfg.eval.validate()?;
    if cfg.map_side == 0 {
        return Err(Error::Config("map_side must be positive".into()));
    }
    for dir in [out.to_path_buf(), out.join("traces"), out.join("embeddings")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut specs = specs.to_vec();
    specs.sort_by(|a, b| a.id.cmp(&b.id));
    write_json(&out.join("run.json"), &RunManifest { config: cfg, specs: &specs })?;

    let encoder = TextEncoder::new(cfg.encoder.clone())?;
    let outcomes: Vec<(String, Result<SpecResult>)> =
        specs.par_iter().map(|s| (s.id.clone(), run_spec(s, &encoder, cfg, out))).collect();

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => failures.push(SpecFailure { id, error: e.to_string() }),
        }
    }

    let evaluation = match &cfg.detections {
        Some(path) => {
            let (records, unparsed) = read_detections(path)?;
            let mut evals = evaluate(&specs, records, &cfg.eval)?;
            evals[0].report.add_unparsed(unparsed);
            evals
        }
        None => Vec::new(),
    };

    let summary = RunSummary {
        specs: specs.len(),
        succeeded: results.len(),
        means: means(&results),
        failures,
        results,
        evaluation,
    };
    write_json(&out.join("summary.json"), &summary)?;
    let md = out.join("report.md");
    fs::write(&md, render_markdown(&summary)).map_err(|e| Error::io(&md, e))?;
    let csv = out.join("report.csv");
    fs::write(&csv, render_csv(&summary)).map_err(|e| Error::io(&csv, e))?;
    Ok(summary)
}

fn render_markdown(s: &RunSummary) -> String {
    let mut md = String::from("# Run report\n\n");
    let _ = writeln!(md, "Specs: {} ({} succeeded, {} failed)\n", s.specs, s.succeeded, s.failures.len());
    if let Some(m) = &s.means {
        let _ = writeln!(md, "| | Token sim | Map dist |\n|---|---:|---:|");
        let _ = writeln!(md, "| before optimization | {:.3} | {:.3} |", m.token_sim_pre, m.map_dist_pre);
        let _ = writeln!(md, "| after optimization | {:.3} | {:.3} |", m.token_sim_post, m.map_dist_post);
        let _ = writeln!(md, "\nReached target: {} of {}", m.reached_target, s.succeeded);
    }
    if !s.failures.is_empty() {
        md.push_str("\n## Failures\n\n");
        for f in &s.failures {
            let _ = writeln!(md, "- `{}`: {}", f.id, f.error);
        }
    }
    for e in &s.evaluation {
        let _ = writeln!(md, "\n## Detections: {}\n\n{}", e.variant, e.report.to_markdown());
    }
    md
}

fn render_csv(s: &RunSummary) -> String {
    let mut csv = String::from(
        "id,prompt,iterations,reached_target,initial_total,final_total,token_sim_pre,token_sim_post,map_dist_pre,map_dist_post\n",
    );
    for r in &s.results {
        let _ = writeln!(
            csv,
            "{},\"{}\",{},{},{},{},{},{},{},{}",
            r.id,
            r.prompt,
            r.iterations,
            r.reached_target,
            r.initial_total,
            r.final_total,
            r.token_sim_pre,
            r.token_sim_post,
            r.map_dist_pre,
            r.map_dist_post
        );
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn articles() {
        assert_eq!(prompt_text(&["cat", "elephant"]), "a cat and an elephant");
        assert_eq!(prompt_text(&["cat", "dog", "bird"]), "a cat and a dog and a bird");
    }

    #[test]
    fn variants_share_tuple_and_seed() {
        let specs = generate_prompt_set(3, 5, 11).unwrap();
        assert_eq!(specs.len(), 30);
        for chunk in specs.chunks(6) {
            assert!(chunk.iter().all(|s| s.tuple == chunk[0].tuple && s.seed == chunk[0].seed));
            let letters: String = chunk.iter().map(|s| s.variant).collect();
            assert_eq!(letters, "abcdef");
            // (c) reverses the tuple, (e) rotates it left.
            let t = &chunk[0].tuple;
            assert_eq!(chunk[2].objects, [t[2].clone(), t[1].clone(), t[0].clone()]);
            assert_eq!(chunk[4].objects, [t[1].clone(), t[2].clone(), t[0].clone()]);
        }
    }

    #[test]
    fn tuples_are_distinct_animals() {
        for s in generate_prompt_set(3, 200, 3).unwrap() {
            let mut o = s.objects.clone();
            o.sort();
            o.dedup();
            assert_eq!(o.len(), 3);
        }
    }

    #[test]
    fn unsupported_k() {
        assert!(generate_prompt_set(4, 1, 0).is_err());
        assert!(generate_prompt_set(2, 0, 0).is_err());
    }

    #[test]
    fn failing_spec_is_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let mut specs = generate_prompt_set(2, 2, 0).unwrap();
        specs[1].prompt = "a horse".into();
        let s = run_pipeline(&specs, &PipelineConfig::default(), dir.path()).unwrap();
        assert_eq!(s.succeeded, 3);
        assert_eq!(s.failures.len(), 1);
        assert_eq!(s.failures[0].id, specs[1].id);
    }
}
