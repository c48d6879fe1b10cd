//! Text-embedding balance optimization.
//!
//! For a prompt with critical set O (object tokens) and effective token
//! count m the loss is
//!
//! ```text
//! pos   = min_{i∈O} sim(ε_i, p(i))
//! neg   = 1/(k(m-1)) · Σ_{i∈O} Σ_{j=1..m-1, j≠i} sim(ε_i, ε_j)
//! total = -pos + neg
//! ```
//!
//! where p(i) is the pure embedding of the object at i, the object's row in
//! the encoding of `"a photo of a <obj>"`. Indices in the inner sum are
//! absolute token positions.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_sim, dot, norm, EmbeddingMatrix, PromptLayout};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::tokenizer::{pure_template_layout, PURE_TEMPLATE_OBJECT_INDEX};

/// One pure vector per critical token, in the order of O.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PureEmbeddingSet {
    objects: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

impl PureEmbeddingSet {
    pub fn new(objects: Vec<String>, vectors: Vec<Array1<f64>>) -> Result<Self> {
        if objects.len() != vectors.len() {
            return Err(Error::Shape(format!("{} objects but {} pure vectors", objects.len(), vectors.len())));
        }
        let set = Self { objects, vectors: vectors.into_iter().map(|v| v.to_vec()).collect() };
        set.validate()?;
        Ok(set)
    }

    /// Check invariants; used after deserializing.
    pub fn validate(&self) -> Result<()> {
        if self.objects.len() != self.vectors.len() {
            return Err(Error::Shape(format!("{} objects but {} pure vectors", self.objects.len(), self.vectors.len())));
        }
        if let Some(d) = self.vectors.first().map(Vec::len) {
            if let Some(bad) = self.vectors.iter().position(|v| v.len() != d) {
                return Err(Error::Shape(format!("pure vector {bad} has length {} (expected {d})", self.vectors[bad].len())));
            }
        }
        for (row, v) in self.vectors.iter().enumerate() {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Shape(format!("pure vector {row} has non-finite entries")));
            }
            if v.iter().all(|&x| x == 0.0) {
                return Err(Error::ZeroNorm { row });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn vector(&self, n: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.vectors[n].as_slice())
    }

    fn check_against(&self, layout: &PromptLayout, d: usize) -> Result<()> {
        if self.len() != layout.k() {
            return Err(Error::Layout(format!("{} pure vectors for k = {} objects", self.len(), layout.k())));
        }
        if let Some(v) = self.vectors.first() {
            if v.len() != d {
                return Err(Error::Shape(format!("pure vectors have D = {} but embeddings D = {d}", v.len())));
            }
        }
        Ok(())
    }
}

/// Encode `"a photo of a <obj>"` for each object in the layout and keep the
/// object row.
pub fn build_pure_embeddings(layout: &PromptLayout, encoder: &TextEncoder) -> Result<PureEmbeddingSet> {
    let n = encoder.config().n;
    let mut vectors = Vec::with_capacity(layout.k());
    for name in layout.object_names() {
        let template = pure_template_layout(name, n)?;
        let enc = encoder.encode(&template, None)?;
        vectors.push(enc.row(PURE_TEMPLATE_OBJECT_INDEX).to_owned());
    }
    PureEmbeddingSet::new(layout.object_names().to_vec(), vectors)
}

/// Replace every critical row except the first-mentioned one with its pure
/// vector; all other rows pass through untouched.
pub fn replace_with_pure(eps: &EmbeddingMatrix, pure: &PureEmbeddingSet) -> Result<EmbeddingMatrix> {
    let layout = eps.layout();
    pure.check_against(layout, eps.d())?;
    let mut data = eps.data().clone();
    let first = layout.critical()[0];
    for (n, &i) in layout.critical().iter().enumerate() {
        if i != first {
            data.row_mut(i).assign(&pure.vector(n));
        }
    }
    EmbeddingMatrix::new(data, layout.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TebLossValue {
    pub pos: f64,
    pub neg: f64,
    pub total: f64,
    /// Token index in O attaining the minimum of the positive term.
    pub argmin_index: usize,
}

impl TebLossValue {
    pub fn from_terms(pos: f64, neg: f64, argmin_index: usize) -> Self {
        Self { pos, neg, total: -pos + neg, argmin_index }
    }
}

/// Positions j of the negative term's inner sum (before excluding j = i).
fn negative_partners(layout: &PromptLayout) -> std::ops::Range<usize> {
    1..layout.m()
}

fn check_loss_preconditions(eps: &EmbeddingMatrix, pure: &PureEmbeddingSet) -> Result<()> {
    pure.check_against(eps.layout(), eps.d())?;
    if eps.layout().m() < 2 {
        return Err(Error::Layout(format!("loss needs m >= 2, got m = {}", eps.layout().m())));
    }
    Ok(())
}

fn pure_cosine(eps: &EmbeddingMatrix, pure: &PureEmbeddingSet, n: usize, i: usize) -> Result<f64> {
    cosine_sim(eps.row(i), pure.vector(n)).map_err(|e| match e {
        Error::ZeroNorm { row: 0 } => Error::ZeroNorm { row: i },
        other => other,
    })
}

/// Positive term with its argmin. Ties go to the lowest token index.
fn positive_term(eps: &EmbeddingMatrix, pure: &PureEmbeddingSet) -> Result<(f64, usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for (n, &i) in eps.layout().critical().iter().enumerate() {
        let s = pure_cosine(eps, pure, n, i)?;
        if best.is_none_or(|(b, _, _)| s < b) {
            best = Some((s, i, n));
        }
    }
    Ok(best.expect("critical set is non-empty"))
}

pub fn teb_loss(eps: &EmbeddingMatrix, pure: &PureEmbeddingSet) -> Result<TebLossValue> {
    check_loss_preconditions(eps, pure)?;
    let layout = eps.layout();
    let (pos, argmin, _) = positive_term(eps, pure)?;
    let mut sum = 0.0;
    for &i in layout.critical() {
        for j in negative_partners(layout).filter(|&j| j != i) {
            sum += eps.row_cosine(i, j)?;
        }
    }
    let denom = (layout.k() * (layout.m() - 1)) as f64;
    Ok(TebLossValue::from_terms(pos, sum / denom, argmin))
}

/// d sim(u, v) / du = v/(‖u‖‖v‖) − sim(u,v)·u/‖u‖².
fn cosine_grad_wrt_first(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Array1<f64> {
    let nu = norm(u);
    let nv = norm(v);
    let sim = dot(u, v) / (nu * nv);
    &v.mapv(|x| x / (nu * nv)) - &u.mapv(|x| x * sim / (nu * nu))
}

/// Gradient of the total loss with respect to every row of the matrix.
fn full_gradient(eps: &EmbeddingMatrix, pure: &PureEmbeddingSet) -> Result<Array2<f64>> {
    check_loss_preconditions(eps, pure)?;
    let layout = eps.layout();
    let mut grad = Array2::<f64>::zeros((eps.n(), eps.d()));

    let (_, argmin, n) = positive_term(eps, pure)?;
    let g = cosine_grad_wrt_first(eps.row(argmin), pure.vector(n));
    grad.row_mut(argmin).scaled_add(-1.0, &g);

    let scale = 1.0 / (layout.k() * (layout.m() - 1)) as f64;
    for &i in layout.critical() {
        for j in negative_partners(layout).filter(|&j| j != i) {
            for (row, other) in [(i, j), (j, i)] {
                if norm(eps.row(row)) == 0.0 {
                    return Err(Error::ZeroNorm { row });
                }
                let g = cosine_grad_wrt_first(eps.row(row), eps.row(other));
                grad.row_mut(row).scaled_add(scale, &g);
            }
        }
    }
    Ok(grad)
}

/// Analytic gradient of the total loss for the rows in `update_set`.
///
/// The minimum in the positive term contributes a subgradient through its
/// argmin row only. Pure vectors are constants.
pub fn teb_loss_gradient(
    eps: &EmbeddingMatrix,
    pure: &PureEmbeddingSet,
    update_set: &[usize],
) -> Result<BTreeMap<usize, Array1<f64>>> {
    if let Some(&bad) = update_set.iter().find(|&&r| r >= eps.n()) {
        return Err(Error::IndexOutOfRange { index: bad, len: eps.n() });
    }
    let grad = full_gradient(eps, pure)?;
    Ok(update_set.iter().map(|&r| (r, grad.row(r).to_owned())).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub target: f64,
    pub learning_rate: f64,
    /// Rows to update; `None` means the critical set O.
    #[serde(default)]
    pub update_set: Option<Vec<usize>>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { max_iters: 20, target: -0.7, learning_rate: 0.1, update_set: None }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !self.target.is_finite() {
            return Err(Error::Config("target must be finite".into()));
        }
        Ok(())
    }

    fn rows(&self, layout: &PromptLayout) -> Vec<usize> {
        let mut rows = self.update_set.clone().unwrap_or_else(|| layout.critical().to_vec());
        rows.sort_unstable();
        rows.dedup();
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub matrix: EmbeddingMatrix,
    /// One loss evaluation per iteration; the last entry is the loss of `matrix`.
    pub trace: Vec<TebLossValue>,
    pub reached_target: bool,
}

/// One serialized trace line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub pos: f64,
    pub neg: f64,
    pub total: f64,
    pub argmin_index: usize,
}

pub fn trace_records(trace: &[TebLossValue]) -> Vec<TraceRecord> {
    trace
        .iter()
        .enumerate()
        .map(|(iteration, v)| TraceRecord { iteration, pos: v.pos, neg: v.neg, total: v.total, argmin_index: v.argmin_index })
        .collect()
}

/// Plain gradient descent on the update rows.
///
/// Each iteration evaluates the loss, stops if it is at or below the target
/// or if `max_iters` evaluations have been made, and otherwise takes one step
/// `row ← row − lr·grad`.
pub fn optimize(eps: &EmbeddingMatrix, pure: &PureEmbeddingSet, cfg: &OptimizerConfig) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    let rows = cfg.rows(eps.layout());
    if let Some(&bad) = rows.iter().find(|&&r| r >= eps.n()) {
        return Err(Error::IndexOutOfRange { index: bad, len: eps.n() });
    }
    let layout = eps.layout().clone();
    let mut current = eps.clone();
    let mut trace = Vec::with_capacity(cfg.max_iters);
    for iteration in 0..cfg.max_iters {
        let loss = teb_loss(&current, pure)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged { iteration });
        }
        trace.push(loss);
        if loss.total <= cfg.target {
            return Ok(OptimizeOutcome { matrix: current, trace, reached_target: true });
        }
        if iteration + 1 == cfg.max_iters {
            break;
        }
        let grad = full_gradient(&current, pure)?;
        let (mut data, _) = current.into_parts();
        for &r in &rows {
            data.row_mut(r).scaled_add(-cfg.learning_rate, &grad.row(r));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration: iteration + 1 });
        }
        current = EmbeddingMatrix::new(data, layout.clone())?;
    }
    Ok(OptimizeOutcome { matrix: current, trace, reached_target: false })
}

/// Mean pairwise cosine similarity between critical rows (1.0 when k = 1).
pub fn mean_critical_similarity(eps: &EmbeddingMatrix) -> Result<f64> {
    let o = eps.layout().critical();
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..o.len() {
        for b in a + 1..o.len() {
            sum += eps.row_cosine(o[a], o[b])?;
            count += 1;
        }
    }
    Ok(if count == 0 { 1.0 } else { sum / count as f64 })
}
