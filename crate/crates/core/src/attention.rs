//! Cross-attention maps and the statistics used to compare them.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_sim, EmbeddingMatrix};
use crate::encoder::{AttentionMask, TextEncoder};
use crate::error::{Error, Result};
use crate::interchange::{blob_file_name, decode_f32le, encode_f32le, read_json, resolve_blob, write_json, DTYPE_F32LE};
use crate::rng::{self, domain};
use crate::teb::PureEmbeddingSet;
use crate::tokenizer::{pure_template_layout, PURE_TEMPLATE_OBJECT_INDEX};

pub const DEFAULT_SMOOTHING: f64 = 1e-10;
pub const DEFAULT_MAP_SIDE: usize = 16;
const NORMALIZED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl AttentionMap {
    /// Raw map; values must be finite and non-negative.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height * width != values.len() || values.is_empty() {
            return Err(Error::Shape(format!("{} values for a {height}x{width} map", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Shape(format!("attention map entry {v} is not a finite non-negative value")));
        }
        let sum: f64 = values.iter().sum();
        let normalized = (sum - 1.0).abs() <= NORMALIZED_TOL;
        Ok(Self { height, width, values, normalized })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Rescale so the entries sum to one.
    pub fn normalize(&self) -> Result<Self> {
        let sum = self.sum();
        if sum <= 0.0 {
            return Err(Error::Shape("cannot normalize an all-zero map".into()));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| v / sum).collect(),
            normalized: true,
        })
    }

    /// Entrywise mean of same-shaped maps, e.g. across denoising steps.
    pub fn average(maps: &[AttentionMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Shape("no maps to average".into()))?;
        let mut acc = vec![0.0; first.values.len()];
        for m in maps {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::Shape(format!(
                    "map {}x{} does not match {}x{}",
                    m.height, m.width, first.height, first.width
                )));
            }
            for (a, v) in acc.iter_mut().zip(&m.values) {
                *a += v;
            }
        }
        let n = maps.len() as f64;
        Self::new(first.height, first.width, acc.into_iter().map(|a| a / n).collect())
    }
}

/// Seeded Gaussian image-feature queries, one row per pixel.
pub fn synthetic_queries(pixels: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, &[domain::QUERY, pixels as u64, d as u64]);
    Array2::from_shape_vec((pixels, d), rng::gaussian_vec(&mut r, pixels * d, 1.0)).expect("shape matches length")
}

/// Softmax over tokens of `q·εᵀ/√D` (plus the mask penalty on dropped
/// tokens) for each query, keeping the `token_index` column as an
/// `height × width` map. Embedding rows act directly as keys.
pub fn cross_attention_map(
    queries: &Array2<f64>,
    eps: &EmbeddingMatrix,
    token_index: usize,
    mask: Option<&AttentionMask>,
    height: usize,
    width: usize,
) -> Result<AttentionMap> {
    let (p, d) = queries.dim();
    if p != height * width {
        return Err(Error::Shape(format!("{p} queries for a {height}x{width} map")));
    }
    if d != eps.d() {
        return Err(Error::Shape(format!("queries have D = {d}, embeddings D = {}", eps.d())));
    }
    if token_index >= eps.n() {
        return Err(Error::IndexOutOfRange { index: token_index, len: eps.n() });
    }
    if let Some(m) = mask {
        if m.len() != eps.n() {
            return Err(Error::Shape(format!("mask length {} for N = {}", m.len(), eps.n())));
        }
    }
    let scale = (d as f64).sqrt();
    let logits = queries.dot(&eps.data().t()) / scale;
    let mut values = Vec::with_capacity(p);
    for row in logits.rows() {
        let shifted: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(j, &l)| l + mask.map_or(0.0, |m| if m.keeps(j) { 0.0 } else { m.penalty() }))
            .collect();
        let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = shifted.iter().map(|l| (l - max).exp()).sum();
        values.push((shifted[token_index] - max).exp() / total);
    }
    AttentionMap::new(height, width, values)
}

fn kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * (p / q).ln()).sum()
}

fn smoothed(map: &AttentionMap, eps: f64) -> Vec<f64> {
    let total: f64 = map.values.iter().map(|v| v + eps).sum();
    map.values.iter().map(|v| (v + eps) / total).collect()
}

/// ½(KL(a‖b) + KL(b‖a)) with the default zero-mass smoothing.
pub fn sym_kl(a: &AttentionMap, b: &AttentionMap) -> Result<f64> {
    sym_kl_smoothed(a, b, DEFAULT_SMOOTHING)
}

/// Symmetric KL after adding `smoothing` to every entry and renormalizing.
pub fn sym_kl_smoothed(a: &AttentionMap, b: &AttentionMap, smoothing: f64) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    if !a.normalized || !b.normalized {
        return Err(Error::Shape("symmetric KL needs normalized maps".into()));
    }
    if !(smoothing > 0.0 && smoothing.is_finite()) {
        return Err(Error::Config(format!("smoothing must be positive, got {smoothing}")));
    }
    let pa = smoothed(a, smoothing);
    let pb = smoothed(b, smoothing);
    Ok((0.5 * (kl(&pa, &pb) + kl(&pb, &pa))).max(0.0))
}

/// Pure-template embedding of each word.
fn single_word_embeddings(words: &[&str], encoder: &TextEncoder) -> Result<PureEmbeddingSet> {
    let n = encoder.config().n;
    let mut names = Vec::with_capacity(words.len());
    let mut vectors = Vec::with_capacity(words.len());
    for w in words {
        let layout = pure_template_layout(w, n)?;
        let enc = encoder.encode(&layout, None)?;
        names.push(layout.object_names()[0].clone());
        vectors.push(enc.row(PURE_TEMPLATE_OBJECT_INDEX).to_owned());
    }
    PureEmbeddingSet::new(names, vectors)
}

/// Cosine similarity between single-word encodings; symmetric, unit diagonal.
pub fn token_sim_matrix(words: &[&str], encoder: &TextEncoder) -> Result<Array2<f64>> {
    let set = single_word_embeddings(words, encoder)?;
    let n = words.len();
    let mut out = Array2::<f64>::eye(n);
    for a in 0..n {
        for b in a + 1..n {
            let s = cosine_sim(set.vector(a), set.vector(b))?;
            out[[a, b]] = s;
            out[[b, a]] = s;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub a: String,
    pub b: String,
    pub token_sim: f64,
    pub map_dist: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson_r: f64,
    pub spearman_rho: f64,
    pub pairs: usize,
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let mean_rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            out[i] = mean_rank;
        }
        start = end;
    }
    out
}

/// Pearson and Spearman correlation between token similarity and map distance.
pub fn sim_dist_correlation(stats: &[PairStats]) -> Result<Correlation> {
    if stats.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("need at least 3 pairs, got {}", stats.len())));
    }
    let x: Vec<f64> = stats.iter().map(|s| s.token_sim).collect();
    let y: Vec<f64> = stats.iter().map(|s| s.map_dist).collect();
    if x.iter().chain(&y).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedCorrelation("non-finite input".into()));
    }
    Ok(Correlation {
        pearson_r: pearson(&x, &y)?,
        spearman_rho: pearson(&ranks(&x), &ranks(&y))?,
        pairs: stats.len(),
    })
}

pub const MAP_FORMAT: &str = "tebopt-attention-map";

/// Manifest of a serialized map; the grid is a row-major `f32le` blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapManifest {
    pub format: String,
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
    pub normalized: bool,
    #[serde(default)]
    pub token_index: Option<usize>,
    /// Denoising step for adapter-sourced maps.
    #[serde(default)]
    pub step: Option<usize>,
    pub blob: String,
}

pub fn write_map(map: &AttentionMap, path: &Path, token_index: Option<usize>, step: Option<usize>) -> Result<()> {
    let blob = blob_file_name(path);
    let manifest = MapManifest {
        format: MAP_FORMAT.into(),
        version: 1,
        height: map.height,
        width: map.width,
        dtype: DTYPE_F32LE.into(),
        normalized: map.normalized,
        token_index,
        step,
        blob: blob.clone(),
    };
    let blob_path = resolve_blob(path, &blob);
    fs::write(&blob_path, encode_f32le(map.values.iter().copied())).map_err(|e| Error::io(&blob_path, e))?;
    write_json(path, &manifest)
}

pub fn read_map(path: &Path) -> Result<(AttentionMap, MapManifest)> {
    let manifest: MapManifest = read_json(path)?;
    if manifest.format != MAP_FORMAT {
        return Err(Error::Manifest(format!("unexpected format {:?}", manifest.format)));
    }
    if manifest.dtype != DTYPE_F32LE {
        return Err(Error::Dtype(manifest.dtype.clone()));
    }
    let blob_path = resolve_blob(path, &manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let expected = manifest.height * manifest.width * 4;
    if bytes.len() != expected {
        return Err(Error::BlobLength { expected, found: bytes.len() });
    }
    let mut map = AttentionMap::new(manifest.height, manifest.width, decode_f32le(&bytes))?;
    // f32 storage perturbs the sum; restore exact normalization if it was set.
    if manifest.normalized {
        map = map.normalize()?;
    }
    Ok((map, manifest))
}
