//! Prompt layouts, embedding matrices and cosine similarity.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SOT: &str = "<sot>";
pub const EOT: &str = "<eot>";
pub const PAD: &str = "<pad>";

/// Token sequence of one prompt with its special-token positions and the
/// critical (object) token set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    tokens: Vec<String>,
    eot_index: usize,
    critical: Vec<usize>,
    object_names: Vec<String>,
}

impl PromptLayout {
    /// `tokens` must hold the full padded sequence (length N) with the start
    /// token at 0 and the end token at `eot_index`.
    pub fn new(
        tokens: Vec<String>,
        eot_index: usize,
        critical: Vec<usize>,
        object_names: Vec<String>,
    ) -> Result<Self> {
        let n = tokens.len();
        if eot_index >= n {
            return Err(Error::Layout(format!("eot index {eot_index} outside sequence of length {n}")));
        }
        if eot_index < 1 {
            return Err(Error::Layout("eot must follow sot".into()));
        }
        if critical.is_empty() {
            return Err(Error::Layout("critical set is empty".into()));
        }
        if critical.len() != object_names.len() {
            return Err(Error::Layout(format!(
                "{} critical indices but {} object names",
                critical.len(),
                object_names.len()
            )));
        }
        if !critical.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Layout(format!("critical indices not strictly increasing: {critical:?}")));
        }
        if let Some(&bad) = critical.iter().find(|&&i| i == 0 || i >= eot_index) {
            return Err(Error::Layout(format!(
                "critical index {bad} must lie strictly between sot (0) and eot ({eot_index})"
            )));
        }
        Ok(Self { tokens, eot_index, critical, object_names })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maximum sequence length N.
    pub fn n(&self) -> usize {
        self.tokens.len()
    }

    pub fn sot_index(&self) -> usize {
        0
    }

    pub fn eot_index(&self) -> usize {
        self.eot_index
    }

    /// Pad positions, `eot_index + 1 .. N`. Empty when the prompt fills the sequence.
    pub fn pad_range(&self) -> std::ops::Range<usize> {
        self.eot_index + 1..self.tokens.len()
    }

    /// Critical token set O, strictly increasing.
    pub fn critical(&self) -> &[usize] {
        &self.critical
    }

    pub fn object_names(&self) -> &[String] {
        &self.object_names
    }

    /// Number of objects k = |O|.
    pub fn k(&self) -> usize {
        self.critical.len()
    }

    /// Effective token count m: tokens strictly between sot and eot. Pads
    /// never count.
    pub fn m(&self) -> usize {
        self.eot_index - 1
    }
}

/// N×D per-token embedding matrix bound to its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
    layout: PromptLayout,
}

impl EmbeddingMatrix {
    pub fn new(data: Array2<f64>, layout: PromptLayout) -> Result<Self> {
        if data.nrows() != layout.n() {
            return Err(Error::Shape(format!(
                "matrix has {} rows but layout has N = {}",
                data.nrows(),
                layout.n()
            )));
        }
        if data.ncols() == 0 {
            return Err(Error::Shape("embedding dimension is zero".into()));
        }
        if let Some(((r, c), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite entry at ({r}, {c})")));
        }
        for row in 0..=layout.eot_index() {
            if data.row(row).iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroNorm { row });
            }
        }
        Ok(Self { data, layout })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn layout(&self) -> &PromptLayout {
        &self.layout
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn into_parts(self) -> (Array2<f64>, PromptLayout) {
        (self.data, self.layout)
    }

    /// Cosine similarity between two rows; a zero row is reported by index.
    pub fn row_cosine(&self, i: usize, j: usize) -> Result<f64> {
        cosine_sim(self.data.row(i), self.data.row(j)).map_err(|e| match e {
            Error::ZeroNorm { row: 0 } => Error::ZeroNorm { row: i },
            Error::ZeroNorm { .. } => Error::ZeroNorm { row: j },
            other => other,
        })
    }
}

pub(crate) fn dot(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
    u.iter().zip(v.iter()).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: ArrayView1<'_, f64>) -> f64 {
    dot(u, u).sqrt()
}

/// `u·v / (‖u‖‖v‖)`, clamped to [-1, 1].
///
/// A zero-norm argument yields [`Error::ZeroNorm`] whose `row` is the
/// argument position (0 for `u`, 1 for `v`).
pub fn cosine_sim(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vector lengths {} and {}", u.len(), v.len())));
    }
    let nu = norm(u);
    if nu == 0.0 {
        return Err(Error::ZeroNorm { row: 0 });
    }
    let nv = norm(v);
    if nv == 0.0 {
        return Err(Error::ZeroNorm { row: 1 });
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2};
    use proptest::prelude::*;

    fn layout(words: &[&str], critical: Vec<usize>, n: usize) -> PromptLayout {
        let mut tokens = vec![SOT.to_string()];
        tokens.extend(words.iter().map(|w| w.to_string()));
        tokens.push(EOT.into());
        let eot = tokens.len() - 1;
        tokens.resize(n, PAD.into());
        let names = critical.iter().map(|&i| tokens[i].clone()).collect();
        PromptLayout::new(tokens, eot, critical, names).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let e1 = arr1(&[1.0, 0.0, 0.0]);
        assert_eq!(cosine_sim(e1.view(), e1.view()).unwrap(), 1.0);
        let a = arr1(&[1.0, 0.0]);
        let b = arr1(&[0.0, 1.0]);
        assert_eq!(cosine_sim(a.view(), b.view()).unwrap(), 0.0);
        let c = arr1(&[1.0, 1.0]);
        let got = cosine_sim(c.view(), a.view()).unwrap();
        assert!((got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        let z = arr1(&[0.0, 0.0]);
        let a = arr1(&[1.0, 0.0]);
        assert!(matches!(cosine_sim(z.view(), a.view()), Err(Error::ZeroNorm { row: 0 })));
        assert!(matches!(cosine_sim(a.view(), z.view()), Err(Error::ZeroNorm { row: 1 })));
    }

    #[test]
    fn layout_counts() {
        let l = layout(&["a", "cat", "and", "a", "dog"], vec![2, 5], 16);
        assert_eq!(l.eot_index(), 6);
        assert_eq!(l.m(), 5);
        assert_eq!(l.k(), 2);
        assert_eq!(l.pad_range(), 7..16);
    }

    #[test]
    fn layout_rejects_bad_critical_sets() {
        let toks: Vec<String> = [SOT, "a", "cat", EOT].iter().map(|s| s.to_string()).collect();
        assert!(PromptLayout::new(toks.clone(), 3, vec![], vec![]).is_err());
        assert!(PromptLayout::new(toks.clone(), 3, vec![3], vec!["x".into()]).is_err());
        assert!(PromptLayout::new(toks.clone(), 3, vec![0], vec!["x".into()]).is_err());
        assert!(PromptLayout::new(toks.clone(), 3, vec![2, 1], vec!["x".into(), "y".into()]).is_err());
        assert!(PromptLayout::new(toks, 3, vec![2], vec![]).is_err());
    }

    #[test]
    fn matrix_rejects_zero_row_before_eot() {
        let l = layout(&["a", "cat"], vec![2], 6);
        let mut data = Array2::from_elem((6, 3), 1.0);
        data.row_mut(5).fill(0.0);
        assert!(EmbeddingMatrix::new(data.clone(), l.clone()).is_ok());
        data.row_mut(2).fill(0.0);
        assert!(matches!(EmbeddingMatrix::new(data, l), Err(Error::ZeroNorm { row: 2 })));
    }

    proptest! {
        #[test]
        fn cosine_self_is_one_and_symmetric(
            u in proptest::collection::vec(-10.0f64..10.0, 1..32),
            seed in proptest::collection::vec(-10.0f64..10.0, 32),
        ) {
            let u = arr1(&u);
            prop_assume!(norm(u.view()) > 1e-6);
            let v = arr1(&seed[..u.len()]);
            prop_assume!(norm(v.view()) > 1e-6);
            prop_assert!((cosine_sim(u.view(), u.view()).unwrap() - 1.0).abs() < 1e-12);
            let ab = cosine_sim(u.view(), v.view()).unwrap();
            let ba = cosine_sim(v.view(), u.view()).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-15);
        }
    }
}
