//! The lexicon space: a word vocabulary whose dimensions carry meaning, and
//! the operations that turn per-position projections into one sparse,
//! nonnegative vector per video or caption.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const MASK: usize = 2;

pub const PAD_TOKEN: &str = "[PAD]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const MASK_TOKEN: &str = "[MASK]";

/// What a lexicon dimension stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordKind {
    /// `[PAD]`, `[CLS]`, `[MASK]`.
    Reserved,
    /// Template filler ("a", "with", ...). A real token but not a concept.
    Function,
    /// A visual concept word.
    Concept,
}

impl WordKind {
    pub fn is_semantic(self) -> bool {
        matches!(self, WordKind::Concept)
    }
}

/// Ordered word vocabulary. Dimension `i` of every lexicon vector is word `i`.
///
/// The three reserved tokens always occupy dimensions 0..3 so token ids are
/// stable across lexicons built from different word lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    words: Vec<String>,
    kinds: Vec<WordKind>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn new<S: AsRef<str>>(function_words: &[S], concept_words: &[S]) -> Result<Self> {
        let mut words = vec![PAD_TOKEN.to_string(), CLS_TOKEN.to_string(), MASK_TOKEN.to_string()];
        let mut kinds = vec![WordKind::Reserved; 3];
        for w in function_words {
            words.push(w.as_ref().to_string());
            kinds.push(WordKind::Function);
        }
        for w in concept_words {
            words.push(w.as_ref().to_string());
            kinds.push(WordKind::Concept);
        }
        Self::from_parts(words, kinds)
    }

    pub fn from_parts(words: Vec<String>, kinds: Vec<WordKind>) -> Result<Self> {
        if words.len() != kinds.len() {
            return Err(shape_err("lexicon kinds", words.len(), kinds.len()));
        }
        if words.len() < 2 {
            return Err(Error::Config("lexicon needs at least two words".into()));
        }
        for (i, (w, k)) in [PAD_TOKEN, CLS_TOKEN, MASK_TOKEN].iter().zip(&kinds).enumerate() {
            if words.get(i).map(String::as_str) != Some(*w) || *k != WordKind::Reserved {
                return Err(Error::Config(format!("dimension {i} must be reserved token {w}")));
            }
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid lexicon word {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate lexicon word `{w}`")));
            }
        }
        Ok(Self { words, kinds, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn kinds(&self) -> &[WordKind] {
        &self.kinds
    }

    pub fn word(&self, idx: usize) -> &str {
        &self.words[idx]
    }

    pub fn kind(&self, idx: usize) -> WordKind {
        self.kinds[idx]
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn is_semantic(&self, idx: usize) -> bool {
        self.kinds[idx].is_semantic()
    }

    pub fn semantic_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.is_semantic(i))
    }

    pub fn semantic_len(&self) -> usize {
        self.semantic_indices().count()
    }
}

/// Per-position lexicon logits, `positions × |W|`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenProjection {
    positions: usize,
    width: usize,
    logits: Vec<f64>,
}

impl TokenProjection {
    pub fn new(positions: usize, width: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != positions * width {
            return Err(shape_err("token projection", positions * width, logits.len()));
        }
        Ok(Self { positions, width, logits })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(shape_err("token projection row", width, bad.len()));
        }
        Self::new(rows.len(), width, rows.concat())
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.logits[pos * self.width..(pos + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.logits.chunks(self.width.max(1)).take(self.positions)
    }
}

/// How per-position activations collapse into one lexicon vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Max,
    Sum,
}

/// Shared behaviour of dense representation vectors.
pub trait DenseVector: Sized {
    fn values(&self) -> &[f64];
    fn from_values_unchecked(values: Vec<f64>) -> Self;

    fn l2_norm(&self) -> f64 {
        self.values().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn dim(&self) -> usize {
        self.values().len()
    }
}

/// Nonnegative `|W|`-dimensional representation of one video or caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconVector(Vec<f64>);

impl LexiconVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite(index));
            }
            if value < 0.0 {
                return Err(Error::NegativeActivation { index, value });
            }
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl DenseVector for LexiconVector {
    fn values(&self) -> &[f64] {
        &self.0
    }

    fn from_values_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Dense `d̂`-dimensional global representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl DenseVector for LatentVector {
    fn values(&self) -> &[f64] {
        &self.0
    }

    fn from_values_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// ReLU each position, then pool coordinate-wise over positions.
pub fn aggregate(proj: &TokenProjection, mode: PoolMode) -> Result<LexiconVector> {
    if proj.positions() == 0 {
        return Err(Error::Empty("token projection has no positions"));
    }
    let mut out = vec![0.0f64; proj.width()];
    for row in proj.rows() {
        for (acc, &x) in out.iter_mut().zip(row) {
            let x = x.max(0.0);
            match mode {
                PoolMode::Max => *acc = acc.max(x),
                PoolMode::Sum => *acc += x,
            }
        }
    }
    LexiconVector::new(out)
}

/// Batched, differentiable form of [`aggregate`].
///
/// `logits` is `(B, L, |W|)`; `keep` is a `(B, L)` 0/1 mask of positions that
/// take part in pooling. Masked positions contribute zero, which is neutral
/// for both pooling modes because activations are already nonnegative.
pub fn aggregate_tensor(logits: &Tensor, keep: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let act = logits.relu()?.broadcast_mul(&keep.unsqueeze(D::Minus1)?)?;
    let pooled = match mode {
        PoolMode::Max => act.max(1)?,
        PoolMode::Sum => act.sum(1)?,
    };
    Ok(pooled)
}

/// Scale `v` to unit L2 norm.
pub fn l2_normalize<V: DenseVector>(v: &V) -> Result<V> {
    if let Some(i) = v.values().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let norm = v.l2_norm();
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(V::from_values_unchecked(v.values().iter().map(|x| x / norm).collect()))
}

/// Row-wise L2 normalisation of a `(B, n)` tensor, differentiable.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    // The floor only matters for dead (all-zero) rows, which then stay zero.
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.clamp(1e-12, f64::INFINITY)?;
    Ok(x.broadcast_div(&norm)?)
}

/// The `k` strongest semantic dimensions, value descending, ties by index.
pub fn top_activations(v: &LexiconVector, lexicon: &Lexicon, k: usize) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(Error::Config("top_activations needs k >= 1".into()));
    }
    if v.dim() != lexicon.len() {
        return Err(shape_err("lexicon vector", lexicon.len(), v.dim()));
    }
    Ok(ranked_semantic_dims(v, lexicon)
        .into_iter()
        .take(k)
        .map(|i| (lexicon.word(i).to_string(), v.values()[i]))
        .collect())
}

/// All semantic dimensions in activation order (value descending, index ascending).
pub(crate) fn ranked_semantic_dims(v: &LexiconVector, lexicon: &Lexicon) -> Vec<usize> {
    let vals = v.values();
    let mut dims: Vec<usize> = lexicon.semantic_indices().collect();
    dims.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    dims
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    pub mean_active_dims: f64,
    pub mean_l1: f64,
    pub mean_l2: f64,
}

pub fn sparsity_stats(batch: &[LexiconVector], threshold: f64) -> Result<SparsityStats> {
    if batch.is_empty() {
        return Err(Error::Empty("sparsity_stats batch"));
    }
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::Config(format!("threshold must be >= 0, got {threshold}")));
    }
    let n = batch.len() as f64;
    let (mut active, mut l1, mut l2) = (0.0, 0.0, 0.0);
    for v in batch {
        active += v.values().iter().filter(|&&x| x > threshold).count() as f64;
        l1 += v.values().iter().sum::<f64>();
        l2 += v.l2_norm();
    }
    Ok(SparsityStats {
        mean_active_dims: active / n,
        mean_l1: l1 / n,
        mean_l2: l2 / n,
    })
}

/// Write the nonzero entries of `v` as `dim<TAB>word<TAB>value` lines,
/// value descending (ties by dimension).
pub fn write_sparse<W: Write>(v: &LexiconVector, lexicon: &Lexicon, mut out: W) -> Result<()> {
    if v.dim() != lexicon.len() {
        return Err(shape_err("lexicon vector", lexicon.len(), v.dim()));
    }
    let vals = v.values();
    let mut dims: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] != 0.0).collect();
    dims.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    for i in dims {
        writeln!(out, "{i}\t{}\t{}", lexicon.word(i), vals[i])?;
    }
    Ok(())
}

/// Inverse of [`write_sparse`]. Word columns are checked against `lexicon`.
pub fn read_sparse<R: BufRead>(input: R, lexicon: &Lexicon) -> Result<LexiconVector> {
    let mut values = vec![0.0; lexicon.len()];
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = || Error::Config(format!("sparse line {}: malformed `{line}`", lineno + 1));
        let mut cols = line.split('\t');
        let (Some(dim), Some(word), Some(value), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
            return Err(bad());
        };
        let dim: usize = dim.parse().map_err(|_| bad())?;
        let value: f64 = value.parse().map_err(|_| bad())?;
        if lexicon.index_of(word) != Some(dim) {
            return Err(bad());
        }
        values[dim] = value;
    }
    LexiconVector::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn abc() -> Lexicon {
        Lexicon::new::<&str>(&[], &["a", "b", "c"]).unwrap()
    }

    fn lexvec(v: &[f64]) -> LexiconVector {
        LexiconVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn lexicon_rejects_duplicates() {
        assert!(Lexicon::new(&["a"], &["a"]).is_err());
        let lex = Lexicon::new(&["with"], &["dog"]).unwrap();
        assert_eq!(lex.len(), 5);
        assert_eq!(lex.index_of("dog"), Some(4));
        assert_eq!(lex.semantic_len(), 1);
        assert!(!lex.is_semantic(MASK));
    }

    #[test]
    fn aggregate_max_and_sum() {
        let p = TokenProjection::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        assert_eq!(aggregate(&p, PoolMode::Max).unwrap().values(), &[1.0, 3.0]);
        let p = TokenProjection::from_rows(&[vec![-1.0, 2.0], vec![-3.0, 4.0]]).unwrap();
        assert_eq!(aggregate(&p, PoolMode::Sum).unwrap().values(), &[0.0, 6.0]);
        let p = TokenProjection::from_rows(&[vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert_eq!(aggregate(&p, PoolMode::Max).unwrap().values(), &[0.0; 3]);
    }

    #[test]
    fn aggregate_empty_is_error() {
        let p = TokenProjection::new(0, 4, vec![]).unwrap();
        assert!(matches!(aggregate(&p, PoolMode::Max), Err(Error::Empty(_))));
    }

    #[test]
    fn tensor_pooling_matches_scalar_path() {
        let rows = [vec![1.0, -2.0, 0.3], vec![0.5, 3.0, -1.0], vec![9.0, 9.0, 9.0]];
        let flat: Vec<f32> = rows.concat().iter().map(|&x| x as f32).collect();
        let t = Tensor::from_vec(flat, (1, 3, 3), &Device::Cpu).unwrap();
        // third position excluded
        let keep = Tensor::new(&[[1f32, 1., 0.]], &Device::Cpu).unwrap();
        let p = TokenProjection::from_rows(&rows[..2]).unwrap();
        for mode in [PoolMode::Max, PoolMode::Sum] {
            let got = aggregate_tensor(&t, &keep, mode).unwrap().to_dtype(DType::F64).unwrap();
            let want = aggregate(&p, mode).unwrap();
            let got: Vec<f64> = got.squeeze(0).unwrap().to_vec1().unwrap();
            for (g, w) in got.iter().zip(want.values()) {
                assert!((g - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&LatentVector::new(vec![3.0, 4.0]).unwrap()).unwrap();
        assert!((v.values()[0] - 0.6).abs() < 1e-15 && (v.values()[1] - 0.8).abs() < 1e-15);
        let v = l2_normalize(&lexvec(&[1.0; 4])).unwrap();
        assert_eq!(v.values(), &[0.5; 4]);
        let u = lexvec(&[0.0, 1.0]);
        assert_eq!(l2_normalize(&u).unwrap(), u);
        assert!(matches!(l2_normalize(&lexvec(&[0.0, 0.0])), Err(Error::ZeroNorm)));
    }

    #[test]
    fn top_activation_examples() {
        let lex = Lexicon::new::<&str>(&[], &["cat", "dog"]).unwrap();
        let mut v = vec![0.0; lex.len()];
        v[lex.index_of("dog").unwrap()] = 2.0;
        assert_eq!(top_activations(&lexvec(&v), &lex, 1).unwrap(), vec![("dog".to_string(), 2.0)]);

        let lex = abc();
        let zero = LexiconVector::zeros(lex.len());
        let names: Vec<_> = top_activations(&zero, &lex, 3).unwrap().into_iter().map(|p| p.0).collect();
        assert_eq!(names, ["a", "b", "c"]);

        let v = lexvec(&[5.0, 5.0, 5.0, 0.1, 0.9, 0.5]);
        let top = top_activations(&v, &lex, 2).unwrap();
        assert_eq!(top, vec![("b".to_string(), 0.9), ("c".to_string(), 0.5)]);
        // reserved dims never reported, k beyond semantic count truncates
        assert_eq!(top_activations(&v, &lex, 10).unwrap().len(), 3);
    }

    #[test]
    fn sparsity_examples() {
        let s = sparsity_stats(&[lexvec(&[1.0, 0.0, 2.0])], 0.0).unwrap();
        assert_eq!(s.mean_active_dims, 2.0);
        assert_eq!(s.mean_l1, 3.0);
        assert!((s.mean_l2 - 5f64.sqrt()).abs() < 1e-12);
        let s = sparsity_stats(&[lexvec(&[1.0, 0.0, 2.0])], 1.5).unwrap();
        assert_eq!(s.mean_active_dims, 1.0);
        let s = sparsity_stats(&[LexiconVector::zeros(4), LexiconVector::zeros(4)], 0.0).unwrap();
        assert_eq!(s.mean_active_dims, 0.0);
        assert!(sparsity_stats(&[], 0.0).is_err());
    }

    #[test]
    fn sparse_export_format() {
        let lex = abc();
        let v = lexvec(&[0.0, 0.0, 0.0, 0.25, 1.5, 0.25]);
        let mut buf = Vec::new();
        write_sparse(&v, &lex, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "4\tb\t1.5\n3\ta\t0.25\n5\tc\t0.25\n");
        assert_eq!(read_sparse(&buf[..], &lex).unwrap(), v);
        assert!(read_sparse(&b"4\tc\t1.0\n"[..], &lex).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_nonnegative_and_monotone(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..6),
            bump_row in 0usize..6, bump_col in 0usize..4, bump in 0.0f64..3.0,
        ) {
            let p = TokenProjection::from_rows(&rows).unwrap();
            let base = aggregate(&p, PoolMode::Max).unwrap();
            prop_assert!(base.values().iter().all(|&x| x >= 0.0));
            let mut bumped = rows.clone();
            let r = bump_row % rows.len();
            bumped[r][bump_col] += bump;
            let after = aggregate(&TokenProjection::from_rows(&bumped).unwrap(), PoolMode::Max).unwrap();
            for (a, b) in after.values().iter().zip(base.values()) {
                prop_assert!(a >= b);
            }
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(-100.0f64..100.0, 1..16)) {
            prop_assume!(v.iter().any(|&x| x.abs() > 1e-6));
            let once = l2_normalize(&LatentVector::new(v).unwrap()).unwrap();
            let twice = l2_normalize(&once).unwrap();
            prop_assert!((once.l2_norm() - 1.0).abs() < 1e-12);
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn top_activations_deterministic(v in prop::collection::vec(0.0f64..2.0, 6), k in 1usize..5) {
            let lex = abc();
            let v = LexiconVector::new(v).unwrap();
            let a = top_activations(&v, &lex, k).unwrap();
            prop_assert_eq!(&a, &top_activations(&v, &lex, k).unwrap());
            for w in a.windows(2) {
                prop_assert!(w[0].1 >= w[1].1);
            }
        }
    }
}
