//! Toy multi-layer causal transformer text encoder.
//!
//! Hidden states are the sum of a seeded token table and a seeded positional
//! table. Each layer projects them to per-head queries, keys and values and
//! applies causal-masked scaled dot-product attention; the default block wraps
//! that in pre-normalization, a residual add and a two-layer feed-forward.

use ndarray::{s, Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, PromptLayout};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Additive logit penalty for masked tokens.
pub const DEFAULT_MASK_PENALTY: f64 = -10_000.0;

const WEIGHT_STD: f64 = 0.02;
const TOKEN_STD: f64 = 1.0;
const POSITION_STD: f64 = 0.5;
const NORM_EPS: f64 = 1e-5;
const FFN_MULT: usize = 4;

/// Composition of one encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// norm → attention → residual → norm → feed-forward → residual, final norm.
    #[default]
    PreNorm,
    /// Bare attention: the layer output is the attention output.
    AttentionOnly,
}

/// Which earlier positions a query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionScope {
    /// Token i sees tokens 0..=i.
    #[default]
    Causal,
    /// Token i sees only itself; no information flows between positions.
    SelfOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub block: BlockKind,
    #[serde(default)]
    pub scope: AttentionScope,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 2, heads: 2, d: 16, n: 16, seed: 0, block: BlockKind::PreNorm, scope: AttentionScope::Causal }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || self.d == 0 {
            return Err(Error::Config("heads and d must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d = {} not divisible by heads = {}", self.d, self.heads)));
        }
        if self.n < 3 {
            return Err(Error::Config(format!("N = {} leaves no room for a token between sot and eot", self.n)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// Encoder input: token embedding plus positional embedding, N×D.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates(pub Array2<f64>);

/// Per-token keep flags plus the additive penalty applied to dropped tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMask {
    keep: Vec<bool>,
    penalty: f64,
}

impl AttentionMask {
    pub fn new(keep: Vec<bool>, penalty: f64) -> Result<Self> {
        if !(penalty < 0.0 && penalty.is_finite()) {
            return Err(Error::Config(format!("mask penalty must be finite and negative, got {penalty}")));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Config("mask drops every token".into()));
        }
        Ok(Self { keep, penalty })
    }

    /// Keep everything except `dropped`, with the default penalty.
    pub fn dropping(n: usize, dropped: &[usize]) -> Result<Self> {
        let mut keep = vec![true; n];
        for &i in dropped {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            keep[i] = false;
        }
        Self::new(keep, DEFAULT_MASK_PENALTY)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keeps(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| !self.keep[i]).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }

    /// Additive term for key position `j`.
    pub(crate) fn bias(&self, j: usize) -> f64 {
        if self.keep[j] {
            0.0
        } else {
            self.penalty
        }
    }
}

/// Mask hiding the given embedding rows from downstream attention.
///
/// `indices` reproduces the token masking settings used to study where prompt
/// information lives, e.g. `1..=5` hides every word of "a cat and a dog" while
/// keeping `<sot>`, `<eot>` and the pads.
pub fn mask_token_embeddings(mat: &EmbeddingMatrix, indices: &[usize]) -> Result<AttentionMask> {
    AttentionMask::dropping(mat.n(), indices)
}

/// Parse `"1-5"`, `"2,5"` or mixtures like `"1-3,7"` into sorted unique indices.
pub fn parse_index_spec(spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || Error::Config(format!("bad index spec {part:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Weights for one layer. Projections act on row vectors: `Q = h · wq`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

fn gaussian_matrix(seed: u64, labels: &[u64], rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let mut r = rng::stream(seed, labels);
    Array2::from_shape_vec((rows, cols), rng::gaussian_vec(&mut r, rows * cols, std))
        .expect("shape matches length")
}

impl LayerWeights {
    /// Seeded init: N(0, 0.02²) everywhere, except the value projection which
    /// is identity plus that noise so attention moves token content between
    /// positions.
    pub fn seeded(d: usize, seed: u64, layer: usize) -> Self {
        let l = layer as u64;
        let hidden = FFN_MULT * d;
        let wv = Array2::eye(d) + gaussian_matrix(seed, &[domain::LAYER, l, 2], d, d, WEIGHT_STD);
        Self {
            wq: gaussian_matrix(seed, &[domain::LAYER, l, 0], d, d, WEIGHT_STD),
            wk: gaussian_matrix(seed, &[domain::LAYER, l, 1], d, d, WEIGHT_STD),
            wv,
            w1: gaussian_matrix(seed, &[domain::LAYER, l, 3], d, hidden, WEIGHT_STD),
            b1: Array1::zeros(hidden),
            w2: gaussian_matrix(seed, &[domain::LAYER, l, 4], hidden, d, WEIGHT_STD),
            b2: Array1::zeros(d),
        }
    }

    /// Identity projections and a zero feed-forward.
    pub fn identity(d: usize) -> Self {
        Self {
            wq: Array2::eye(d),
            wk: Array2::eye(d),
            wv: Array2::eye(d),
            w1: Array2::zeros((d, FFN_MULT * d)),
            b1: Array1::zeros(FFN_MULT * d),
            w2: Array2::zeros((FFN_MULT * d, d)),
            b2: Array1::zeros(d),
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if w.dim() != (d, d) {
                return Err(Error::Shape(format!("{name} is {:?}, expected ({d}, {d})", w.dim())));
            }
        }
        let hidden = self.w1.ncols();
        if self.w1.nrows() != d || self.b1.len() != hidden || self.w2.dim() != (hidden, d) || self.b2.len() != d {
            return Err(Error::Shape("feed-forward weights inconsistent with d".into()));
        }
        Ok(())
    }
}

/// Split the last axis of an N×D product into `heads` slices: heads × N × D/heads.
fn split_heads(x: &Array2<f64>, heads: usize) -> Array3<f64> {
    let (n, d) = x.dim();
    let dh = d / heads;
    Array3::from_shape_fn((heads, n, dh), |(h, i, c)| x[[i, h * dh + c]])
}

/// Eq. Q = ℓ_Q(h_s) etc., each reshaped to heads × N × D/heads.
pub fn project_qkv(
    hidden: &HiddenStates,
    weights: &LayerWeights,
    heads: usize,
) -> Result<(Array3<f64>, Array3<f64>, Array3<f64>)> {
    let d = hidden.0.ncols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!("d = {d} not divisible by heads = {heads}")));
    }
    for (name, w) in [("wq", &weights.wq), ("wk", &weights.wk), ("wv", &weights.wv)] {
        if w.nrows() != d || w.ncols() != d {
            return Err(Error::Shape(format!("{name} is {:?}, expected ({d}, {d})", w.dim())));
        }
    }
    let q = hidden.0.dot(&weights.wq);
    let k = hidden.0.dot(&weights.wk);
    let v = hidden.0.dot(&weights.wv);
    Ok((split_heads(&q, heads), split_heads(&k, heads), split_heads(&v, heads)))
}

fn check_qkv(q: &Array3<f64>, k: &Array3<f64>, v: &Array3<f64>, mask: Option<&AttentionMask>) -> Result<()> {
    if q.dim() != k.dim() || q.dim().0 != v.dim().0 || q.dim().1 != v.dim().1 {
        return Err(Error::Shape(format!("q {:?}, k {:?}, v {:?}", q.dim(), k.dim(), v.dim())));
    }
    if let Some(m) = mask {
        if m.len() != q.dim().1 {
            return Err(Error::Shape(format!("mask length {} for sequence length {}", m.len(), q.dim().1)));
        }
    }
    Ok(())
}

/// Post-softmax attention weights, heads × N × N. Entries outside the scope
/// (future tokens under the causal mask) are exactly zero.
///
/// The extra mask penalty is added after the 1/√d_k scaling.
pub fn attention_weights(
    q: &Array3<f64>,
    k: &Array3<f64>,
    mask: Option<&AttentionMask>,
    scope: AttentionScope,
    layer: usize,
) -> Result<Array3<f64>> {
    let (heads, n, dk) = q.dim();
    let scale = (dk as f64).sqrt();
    let mut w = Array3::<f64>::zeros((heads, n, n));
    let mut logits = Vec::with_capacity(n);
    for h in 0..heads {
        for i in 0..n {
            let keys: &[usize] = &match scope {
                AttentionScope::Causal => (0..=i).collect::<Vec<_>>(),
                AttentionScope::SelfOnly => vec![i],
            };
            logits.clear();
            for &j in keys {
                let mut s = 0.0;
                for c in 0..dk {
                    s += q[[h, i, c]] * k[[h, j, c]];
                }
                let mut l = s / scale;
                if let Some(m) = mask {
                    l += m.bias(j);
                }
                if !l.is_finite() {
                    return Err(Error::NonFiniteLogits { layer });
                }
                logits.push(l);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                total += *l;
            }
            for (&j, &e) in keys.iter().zip(logits.iter()) {
                w[[h, i, j]] = e / total;
            }
        }
    }
    Ok(w)
}

fn attend(
    q: &Array3<f64>,
    k: &Array3<f64>,
    v: &Array3<f64>,
    mask: Option<&AttentionMask>,
    scope: AttentionScope,
    layer: usize,
) -> Result<Array2<f64>> {
    check_qkv(q, k, v, mask)?;
    let (heads, n, _) = q.dim();
    let dv = v.dim().2;
    let w = attention_weights(q, k, mask, scope, layer)?;
    let mut out = Array2::<f64>::zeros((n, heads * dv));
    for h in 0..heads {
        for i in 0..n {
            let js: Vec<usize> = match scope {
                AttentionScope::Causal => (0..=i).collect(),
                AttentionScope::SelfOnly => vec![i],
            };
            for c in 0..dv {
                let mut acc = 0.0;
                for &j in &js {
                    acc += w[[h, i, j]] * v[[h, j, c]];
                }
                out[[i, h * dv + c]] = acc;
            }
        }
    }
    Ok(out)
}

/// softmax((QKᵀ)/√d_k + M)·V per head with the causal mask M, heads
/// concatenated back to N×D. `extra_mask` adds its penalty to every query's
/// logit for each dropped key.
pub fn causal_attention(
    q: &Array3<f64>,
    k: &Array3<f64>,
    v: &Array3<f64>,
    extra_mask: Option<&AttentionMask>,
) -> Result<Array2<f64>> {
    attend(q, k, v, extra_mask, AttentionScope::Causal, 0)
}

fn row_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Seeded toy encoder. Immutable after construction; `encode` is pure.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: EncoderConfig,
    layers: Vec<LayerWeights>,
}

impl TextEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers).map(|l| LayerWeights::seeded(config.d, config.seed, l)).collect();
        Ok(Self { config, layers })
    }

    pub fn with_weights(config: EncoderConfig, layers: Vec<LayerWeights>) -> Result<Self> {
        config.validate()?;
        if layers.len() != config.layers {
            return Err(Error::Config(format!("{} weight sets for {} layers", layers.len(), config.layers)));
        }
        for w in &layers {
            w.check(config.d)?;
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layer_weights(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// Context-free embedding of one token string.
    pub fn token_embedding(&self, token: &str) -> Array1<f64> {
        let mut r = rng::stream(self.config.seed, &[domain::TOKEN, rng::fnv1a64(token.as_bytes())]);
        Array1::from(rng::gaussian_vec(&mut r, self.config.d, TOKEN_STD))
    }

    pub fn position_embedding(&self, position: usize) -> Array1<f64> {
        let mut r = rng::stream(self.config.seed, &[domain::POSITION, position as u64]);
        Array1::from(rng::gaussian_vec(&mut r, self.config.d, POSITION_STD))
    }

    pub fn hidden_states(&self, layout: &PromptLayout) -> Result<HiddenStates> {
        if layout.n() != self.config.n {
            return Err(Error::Shape(format!("layout N = {} but encoder N = {}", layout.n(), self.config.n)));
        }
        let mut h = Array2::zeros((self.config.n, self.config.d));
        for (i, tok) in layout.tokens().iter().enumerate() {
            let row = self.token_embedding(tok) + self.position_embedding(i);
            h.slice_mut(s![i, ..]).assign(&row);
        }
        Ok(HiddenStates(h))
    }

    fn attention_layer(&self, x: &Array2<f64>, layer: usize, mask: Option<&AttentionMask>) -> Result<Array2<f64>> {
        let (q, k, v) = project_qkv(&HiddenStates(x.clone()), &self.layers[layer], self.config.heads)?;
        attend(&q, &k, &v, mask, self.config.scope, layer)
    }

    fn feed_forward(&self, x: &Array2<f64>, layer: usize) -> Array2<f64> {
        let w = &self.layers[layer];
        let hidden = (x.dot(&w.w1) + &w.b1).mapv(gelu);
        hidden.dot(&w.w2) + &w.b2
    }

    /// Encode a layout. Row i depends only on tokens 0..=i.
    pub fn encode(&self, layout: &PromptLayout, mask: Option<&AttentionMask>) -> Result<EmbeddingMatrix> {
        if let Some(m) = mask {
            if m.len() != self.config.n {
                return Err(Error::Shape(format!("mask length {} for N = {}", m.len(), self.config.n)));
            }
        }
        let mut x = self.hidden_states(layout)?.0;
        for layer in 0..self.config.layers {
            x = match self.config.block {
                BlockKind::AttentionOnly => self.attention_layer(&x, layer, mask)?,
                BlockKind::PreNorm => {
                    let x1 = &x + &self.attention_layer(&row_norm(&x), layer, mask)?;
                    &x1 + &self.feed_forward(&row_norm(&x1), layer)
                }
            };
        }
        if self.config.block == BlockKind::PreNorm {
            x = row_norm(&x);
        }
        EmbeddingMatrix::new(x, layout.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::layout_for;

    fn naive_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        let (n, m) = a.dim();
        let p = b.ncols();
        let mut out = Array2::zeros((n, p));
        for i in 0..n {
            for j in 0..p {
                let mut s = 0.0;
                for t in 0..m {
                    s += a[[i, t]] * b[[t, j]];
                }
                out[[i, j]] = s;
            }
        }
        out
    }

    fn gaussian(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        gaussian_matrix(seed, &[], rows, cols, 1.0)
    }

    #[test]
    fn identity_projection() {
        let h = HiddenStates(gaussian(1, 3, 4));
        let (q, k, v) = project_qkv(&h, &LayerWeights::identity(4), 1).unwrap();
        for t in [&q, &k, &v] {
            assert_eq!(t.index_axis(Axis(0), 0), h.0);
        }
    }

    #[test]
    fn zero_projection() {
        let h = HiddenStates(gaussian(1, 3, 4));
        let mut w = LayerWeights::identity(4);
        w.wq.fill(0.0);
        w.wk.fill(0.0);
        w.wv.fill(0.0);
        let (q, k, v) = project_qkv(&h, &w, 2).unwrap();
        assert!(q.iter().chain(k.iter()).chain(v.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn projection_matches_naive_matmul() {
        let h = HiddenStates(gaussian(11, 3, 4));
        let mut w = LayerWeights::identity(4);
        w.wq = gaussian(12, 4, 4);
        w.wk = gaussian(13, 4, 4);
        w.wv = gaussian(14, 4, 4);
        let (q, k, v) = project_qkv(&h, &w, 2).unwrap();
        for (got, weight) in [(&q, &w.wq), (&k, &w.wk), (&v, &w.wv)] {
            let want = naive_matmul(&h.0, weight);
            for head in 0..2 {
                for i in 0..3 {
                    for c in 0..2 {
                        assert!((got[[head, i, c]] - want[[i, head * 2 + c]]).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn projection_shape_mismatch() {
        let h = HiddenStates(gaussian(1, 3, 4));
        assert!(project_qkv(&h, &LayerWeights::identity(4), 3).is_err());
        assert!(project_qkv(&h, &LayerWeights::identity(5), 1).is_err());
    }

    #[test]
    fn single_token_returns_value_row() {
        let q = Array3::from_shape_vec((1, 1, 2), vec![0.3, -1.2]).unwrap();
        let k = Array3::from_shape_vec((1, 1, 2), vec![2.0, 0.5]).unwrap();
        let v = Array3::from_shape_vec((1, 1, 2), vec![0.7, 9.0]).unwrap();
        let out = causal_attention(&q, &k, &v, None).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![0.7, 9.0]);
    }

    #[test]
    fn three_token_hand_case_matches_direct_sum() {
        let q = Array3::from_shape_vec((1, 3, 2), vec![1.0, 0.0, 0.5, 0.5, -1.0, 2.0]).unwrap();
        let k = Array3::from_shape_vec((1, 3, 2), vec![0.2, 0.1, 1.0, -1.0, 0.3, 0.3]).unwrap();
        let v = Array3::from_shape_vec((1, 3, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = causal_attention(&q, &k, &v, None).unwrap();
        let scale = 2f64.sqrt();
        for i in 0..3 {
            let logits: Vec<f64> =
                (0..=i).map(|j| (q[[0, i, 0]] * k[[0, j, 0]] + q[[0, i, 1]] * k[[0, j, 1]]) / scale).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..=i).map(|j| logits[j].exp() / z * v[[0, j, c]]).sum();
                assert!((out[[i, c]] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn masked_token_receives_negligible_weight() {
        let q = gaussian_matrix(5, &[], 4, 2, 1.0);
        let k = gaussian_matrix(6, &[], 4, 2, 1.0);
        let q = q.into_shape_with_order((1, 4, 2)).unwrap();
        let k = k.into_shape_with_order((1, 4, 2)).unwrap();
        let mask = AttentionMask::dropping(4, &[2]).unwrap();
        let w = attention_weights(&q, &k, Some(&mask), AttentionScope::Causal, 0).unwrap();
        for i in 2..4 {
            assert!(w[[0, i, 2]] < 1e-12);
        }
    }

    #[test]
    fn weights_rows_sum_to_one() {
        let q = gaussian_matrix(7, &[], 12, 4, 1.0).into_shape_with_order((2, 6, 4)).unwrap();
        let k = gaussian_matrix(8, &[], 12, 4, 1.0).into_shape_with_order((2, 6, 4)).unwrap();
        let w = attention_weights(&q, &k, None, AttentionScope::Causal, 0).unwrap();
        for h in 0..2 {
            for i in 0..6 {
                let s: f64 = w.slice(s![h, i, ..]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(w.slice(s![h, i, i + 1..]).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn nan_logits_report_layer() {
        let mut q = Array3::zeros((1, 2, 2));
        q[[0, 1, 0]] = f64::NAN;
        let k = Array3::ones((1, 2, 2));
        let v = Array3::ones((1, 2, 2));
        assert!(matches!(causal_attention(&q, &k, &v, None), Err(Error::NonFiniteLogits { layer: 0 })));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { d: 10, heads: 3, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig { layers: 0, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
    }

    #[test]
    fn encode_is_deterministic_and_prefix_stable() {
        let enc = TextEncoder::new(EncoderConfig::default()).unwrap();
        let a = layout_for("a cat and a dog", &["cat", "dog"], 16).unwrap();
        let b = layout_for("a cat and a horse", &["cat", "horse"], 16).unwrap();
        let ea = enc.encode(&a, None).unwrap();
        assert_eq!(ea, enc.encode(&a, None).unwrap());
        let eb = enc.encode(&b, None).unwrap();
        for i in 0..5 {
            assert_eq!(ea.row(i), eb.row(i));
        }
        assert_ne!(ea.row(5), eb.row(5));
    }

    #[test]
    fn single_bare_layer_equals_attention_of_hidden_states() {
        let cfg = EncoderConfig { layers: 1, heads: 2, block: BlockKind::AttentionOnly, ..Default::default() };
        let enc = TextEncoder::with_weights(cfg.clone(), vec![LayerWeights::identity(cfg.d)]).unwrap();
        let layout = layout_for("a cat and a dog", &["cat", "dog"], 16).unwrap();
        let h = enc.hidden_states(&layout).unwrap();
        let q = split_heads(&h.0, 2);
        let want = causal_attention(&q, &q, &q, None).unwrap();
        assert_eq!(enc.encode(&layout, None).unwrap().data(), &want);
    }

    #[test]
    fn mask_settings() {
        let enc = TextEncoder::new(EncoderConfig::default()).unwrap();
        let layout = layout_for("a cat and a dog", &["cat", "dog"], 16).unwrap();
        let mat = enc.encode(&layout, None).unwrap();
        let m = mask_token_embeddings(&mat, &parse_index_spec("1-5").unwrap()).unwrap();
        let mut kept = vec![0, 6];
        kept.extend(7..16);
        assert_eq!(m.kept_indices(), kept);
        let m = mask_token_embeddings(&mat, &parse_index_spec("3-5").unwrap()).unwrap();
        assert_eq!(m.masked_indices(), vec![3, 4, 5]);
        let m = mask_token_embeddings(&mat, &[]).unwrap();
        assert!(m.is_identity());
        assert!(matches!(mask_token_embeddings(&mat, &[16]), Err(Error::IndexOutOfRange { index: 16, len: 16 })));
    }

    #[test]
    fn index_spec_parsing() {
        assert_eq!(parse_index_spec("1-3,7").unwrap(), vec![1, 2, 3, 7]);
        assert_eq!(parse_index_spec("5,2,2").unwrap(), vec![2, 5]);
        assert!(parse_index_spec("").unwrap().is_empty());
        assert!(parse_index_spec("4-2").is_err());
        assert!(parse_index_spec("x").is_err());
    }

    #[test]
    fn mask_validation() {
        assert!(AttentionMask::new(vec![false, false], -1.0).is_err());
        assert!(AttentionMask::new(vec![true], 0.0).is_err());
        assert!(AttentionMask::new(vec![true], f64::NEG_INFINITY).is_err());
    }
}
