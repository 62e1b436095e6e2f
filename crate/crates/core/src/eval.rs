//! Retrieval evaluation: similarity matrices, 1:1 score fusion, R@K / MedR,
//! and lexicon grounding reports.
//!
//! Ranking rule: the rank of the ground-truth candidate `g` for a query is
//! `1 + #{j : s_j > s_g} + #{j < g : s_j = s_g}`, i.e. ties are broken by
//! ascending candidate index. MedR is the lower median of the ranks.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{shape_err, Error, Result};
use crate::lexicon::{l2_normalize, top_activations, DenseVector, Lexicon, LexiconVector};
use crate::model::{DualStreamModel, EncoderConfig};

/// Row-major dense score matrix.
pub type Matrix = Vec<Vec<f64>>;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Normalised embeddings of a retrieval benchmark: captions are queries and
/// videos are candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalIndex {
    pub latent_queries: Matrix,
    pub latent_candidates: Matrix,
    pub lexicon_queries: Matrix,
    pub lexicon_candidates: Matrix,
    /// Query `i` → index of its paired candidate.
    pub ground_truth: Vec<usize>,
    /// Raw (unnormalised) lexicon vectors, for sparsity and grounding.
    pub video_lexicon: Vec<LexiconVector>,
    pub text_lexicon: Vec<LexiconVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreBranch {
    Latent,
    Lexicon,
    #[default]
    Fused,
}

impl ScoreBranch {
    pub const ALL: [ScoreBranch; 3] = [ScoreBranch::Latent, ScoreBranch::Lexicon, ScoreBranch::Fused];

    pub fn name(self) -> &'static str {
        match self {
            ScoreBranch::Latent => "latent",
            ScoreBranch::Lexicon => "lexicon",
            ScoreBranch::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::UnknownVariant(format!("branch '{s}' (expected latent, lexicon or fused)")))
    }
}

/// Unit-normalise, leaving an all-zero vector at zero (it then scores 0
/// against everything).
fn unit_or_zero<V: DenseVector>(v: &V) -> Vec<f64> {
    match l2_normalize(v) {
        Ok(n) => n.values().to_vec(),
        Err(_) => vec![0.0; v.values().len()],
    }
}

impl EvalIndex {
    pub fn build(model: &DualStreamModel, pairs: &[Pair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("evaluation pairs"));
        }
        let mut idx = EvalIndex {
            latent_queries: Vec::with_capacity(pairs.len()),
            latent_candidates: Vec::with_capacity(pairs.len()),
            lexicon_queries: Vec::with_capacity(pairs.len()),
            lexicon_candidates: Vec::with_capacity(pairs.len()),
            ground_truth: (0..pairs.len()).collect(),
            video_lexicon: Vec::with_capacity(pairs.len()),
            text_lexicon: Vec::with_capacity(pairs.len()),
        };
        for chunk in pairs.chunks(128) {
            let videos: Vec<_> = chunk.iter().map(|p| p.video.clone()).collect();
            for v in model.encode_videos(&videos)? {
                idx.latent_candidates.push(unit_or_zero(&v.f_lat));
                idx.lexicon_candidates.push(unit_or_zero(&v.f_lex));
                idx.video_lexicon.push(v.f_lex);
            }
            let texts: Vec<&[u32]> = chunk.iter().map(|p| p.text.token_ids.as_slice()).collect();
            for t in model.encode_texts(&texts)? {
                idx.latent_queries.push(unit_or_zero(&t.f_lat));
                idx.lexicon_queries.push(unit_or_zero(&t.f_lex));
                idx.text_lexicon.push(t.f_lex);
            }
        }
        Ok(idx)
    }

    /// Text-to-video scores for one branch.
    pub fn scores(&self, branch: ScoreBranch) -> Result<Matrix> {
        let lat = || similarity_matrix(&self.latent_queries, &self.latent_candidates);
        let lex = || similarity_matrix(&self.lexicon_queries, &self.lexicon_candidates);
        match branch {
            ScoreBranch::Latent => lat(),
            ScoreBranch::Lexicon => lex(),
            ScoreBranch::Fused => fuse_scores(&lat()?, &lex()?),
        }
    }

    pub fn report(&self, branch: ScoreBranch) -> Result<RetrievalReport> {
        retrieval_metrics(&self.scores(branch)?, &self.ground_truth)
    }
}

/// `M[i][j] = q_i · c_j`. Rows are expected to be unit-norm (or zero).
pub fn similarity_matrix(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Result<Matrix> {
    let width = queries.first().or(candidates.first()).map_or(0, Vec::len);
    for (what, rows) in [("query", queries), ("candidate", candidates)] {
        if let Some(r) = rows.iter().find(|r| r.len() != width) {
            return Err(shape_err(what, width, r.len()));
        }
    }
    Ok(queries
        .iter()
        .map(|q| candidates.iter().map(|c| q.iter().zip(c).map(|(a, b)| a * b).sum()).collect())
        .collect())
}

/// Score fusion: `S = S_lat + S_lex` elementwise.
pub fn fuse_scores(latent: &Matrix, lexicon: &Matrix) -> Result<Matrix> {
    if latent.len() != lexicon.len() {
        return Err(shape_err("fused score rows", latent.len(), lexicon.len()));
    }
    latent
        .iter()
        .zip(lexicon)
        .map(|(a, b)| {
            if a.len() != b.len() {
                return Err(shape_err("fused score columns", a.len(), b.len()));
            }
            Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
        })
        .collect()
}

pub fn transpose(m: &Matrix) -> Matrix {
    let cols = m.first().map_or(0, Vec::len);
    (0..cols).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub median_rank: usize,
    pub per_query_ranks: Vec<usize>,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        recall(&self.per_query_ranks, k)
    }
}

fn recall(ranks: &[usize], k: usize) -> f64 {
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Rank of the ground truth `g` within one score row.
pub fn rank_of(row: &[f64], g: usize) -> usize {
    let s = row[g];
    1 + row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < g)).count()
}

pub fn retrieval_metrics(scores: &Matrix, ground_truth: &[usize]) -> Result<RetrievalReport> {
    if scores.is_empty() {
        return Err(Error::Empty("score matrix"));
    }
    if ground_truth.len() != scores.len() {
        return Err(Error::MissingGroundTruth(ground_truth.len().min(scores.len())));
    }
    let mut ranks = Vec::with_capacity(scores.len());
    for (i, (row, &g)) in scores.iter().zip(ground_truth).enumerate() {
        if g >= row.len() {
            return Err(Error::MissingGroundTruth(i));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        ranks.push(rank_of(row, g));
    }
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    Ok(RetrievalReport {
        r_at_1: recall(&ranks, 1),
        r_at_5: recall(&ranks, 5),
        r_at_10: recall(&ranks, 10),
        median_rank: sorted[(sorted.len() - 1) / 2],
        per_query_ranks: ranks,
    })
}

// ---- grounding -------------------------------------------------------------

/// How many top dimensions to compare per video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroundingK {
    /// k = number of concepts in the paired scene.
    #[default]
    ConceptCount,
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub videos: usize,
}

/// Precision/recall of each vector's top-k semantic words against its
/// concept list.
pub fn grounding_from_vectors(vectors: &[LexiconVector], concepts: &[Vec<String>], lexicon: &Lexicon, k: GroundingK) -> Result<GroundingReport> {
    if vectors.len() != concepts.len() {
        return Err(shape_err("grounding concept lists", vectors.len(), concepts.len()));
    }
    if vectors.is_empty() {
        return Err(Error::Empty("grounding vectors"));
    }
    let (mut p, mut r) = (0.0, 0.0);
    for (v, words) in vectors.iter().zip(concepts) {
        let truth: BTreeSet<&str> = words.iter().map(String::as_str).collect();
        let k = match k {
            GroundingK::ConceptCount => truth.len().max(1),
            GroundingK::Fixed(k) => k,
        };
        let top = top_activations(v, lexicon, k)?;
        let hits = top.iter().filter(|(w, _)| truth.contains(w.as_str())).count() as f64;
        p += hits / k as f64;
        r += if truth.is_empty() { 1.0 } else { hits / truth.len() as f64 };
    }
    let n = vectors.len() as f64;
    Ok(GroundingReport { mean_precision: p / n, mean_recall: r / n, videos: vectors.len() })
}

pub fn grounding_report(model: &DualStreamModel, pairs: &[Pair], lexicon: &Lexicon, k: GroundingK) -> Result<GroundingReport> {
    let mut vectors = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(128) {
        let videos: Vec<_> = chunk.iter().map(|p| p.video.clone()).collect();
        vectors.extend(model.encode_videos(&videos)?.into_iter().map(|e| e.f_lex));
    }
    let concepts: Vec<Vec<String>> = pairs.iter().map(|p| p.scene.concepts.clone()).collect();
    grounding_from_vectors(&vectors, &concepts, lexicon, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceBaseline {
    pub seeds: usize,
    pub mean_precision: f64,
    pub std_precision: f64,
    pub mean_recall: f64,
}

/// Grounding of untrained models, averaged over `seeds` initialisations.
pub fn chance_grounding(config: &EncoderConfig, pairs: &[Pair], lexicon: &Lexicon, k: GroundingK, seeds: usize) -> Result<ChanceBaseline> {
    if seeds == 0 {
        return Err(Error::Config("chance baseline needs >= 1 seed".into()));
    }
    let mut precisions = Vec::with_capacity(seeds);
    let mut recall = 0.0;
    for s in 0..seeds {
        let model = DualStreamModel::new(config.clone(), crate::seed::derive(0xC4A1CE, "chance", s as u64))?;
        let rep = grounding_report(&model, pairs, lexicon, k)?;
        precisions.push(rep.mean_precision);
        recall += rep.mean_recall;
    }
    let n = seeds as f64;
    let mean = precisions.iter().sum::<f64>() / n;
    let var = precisions.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    Ok(ChanceBaseline { seeds, mean_precision: mean, std_precision: var.sqrt(), mean_recall: recall / n })
}

/// One video's listing: top-k words, each flagged as relevant
/// (in the paired scene) or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexiconListing {
    pub scene_id: u64,
    pub concepts: Vec<String>,
    pub caption: String,
    pub top: Vec<(String, f64, bool)>,
}

pub fn inspect_lexicon(model: &DualStreamModel, pairs: &[Pair], lexicon: &Lexicon, k: usize) -> Result<Vec<LexiconListing>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(128) {
        let videos: Vec<_> = chunk.iter().map(|p| p.video.clone()).collect();
        for (pair, enc) in chunk.iter().zip(model.encode_videos(&videos)?) {
            let truth: BTreeSet<&str> = pair.scene.concepts.iter().map(String::as_str).collect();
            let top = top_activations(&enc.f_lex, lexicon, k)?
                .into_iter()
                .map(|(w, v)| {
                    let relevant = truth.contains(w.as_str());
                    (w, v, relevant)
                })
                .collect();
            let caption = pair.text.token_ids[1..].iter().map(|&t| lexicon.word(t as usize)).collect::<Vec<_>>().join(" ");
            out.push(LexiconListing { scene_id: pair.scene.scene_id, concepts: pair.scene.concepts.clone(), caption, top });
        }
    }
    Ok(out)
}

/// Text rendering of a listing; irrelevant words are marked with `*`.
pub fn format_listing(l: &LexiconListing) -> String {
    let words: Vec<String> = l
        .top
        .iter()
        .map(|(w, v, ok)| format!("{w}{}:{v:.3}", if *ok { "" } else { "*" }))
        .collect();
    format!("scene {} | {} | {}", l.scene_id, l.caption, words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_examples() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(similarity_matrix(&eye, &eye).unwrap(), eye);
        assert_eq!(similarity_matrix(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]]).unwrap(), vec![vec![0.0]]);
        let q = vec![vec![1.0, 0.0, 0.0]; 2];
        let c = vec![vec![0.0, 1.0, 0.0]; 4];
        let m = similarity_matrix(&q, &c).unwrap();
        assert_eq!((m.len(), m[0].len()), (2, 4));
        assert!(similarity_matrix(&q, &[vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn fusion_examples() {
        let s = fuse_scores(&vec![vec![0.3]], &vec![vec![0.5]]).unwrap();
        assert!((s[0][0] - 0.8).abs() < 1e-12);
        let a = vec![vec![0.1, -0.4], vec![0.7, 0.2]];
        let z = vec![vec![0.0; 2]; 2];
        assert_eq!(fuse_scores(&a, &z).unwrap(), a);
        let b = vec![vec![0.3, 0.9], vec![-0.2, 0.0]];
        assert_eq!(fuse_scores(&a, &b).unwrap(), fuse_scores(&b, &a).unwrap());
        assert!(fuse_scores(&a, &vec![vec![0.0; 3]; 2]).is_err());
    }

    #[test]
    fn metric_examples() {
        let eye: Matrix = (0..10).map(|i| (0..10).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let r = retrieval_metrics(&eye, &(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!((r.r_at_1, r.median_rank), (100.0, 1));
        // ground truth always scored lowest of 10
        let rev: Matrix = (0..10).map(|i| (0..10).map(|j| if i == j { -1.0 } else { j as f64 }).collect()).collect();
        let r = retrieval_metrics(&rev, &(0..10).collect::<Vec<_>>()).unwrap();
        assert_eq!((r.r_at_1, r.median_rank), (0.0, 10));
        // ranks {1,2,3,4}
        let m: Matrix = (0..4).map(|i| (0..4).map(|j| if j == 0 { 1.0 - 0.1 * i as f64 } else { 0.95 - 0.1 * (j - 1) as f64 }).collect()).collect();
        let r = retrieval_metrics(&m, &[0; 4]).unwrap();
        assert_eq!(r.per_query_ranks, vec![1, 2, 3, 4]);
        assert_eq!((r.r_at_1, r.median_rank), (25.0, 2));
        assert!(matches!(retrieval_metrics(&m, &[0; 3]), Err(Error::MissingGroundTruth(_))));
        assert!(matches!(retrieval_metrics(&m, &[0, 0, 0, 9]), Err(Error::MissingGroundTruth(3))));
    }

    #[test]
    fn ties_break_by_index_and_shift_invariance() {
        let row = vec![0.5, 0.5, 0.5];
        assert_eq!(rank_of(&row, 0), 1);
        assert_eq!(rank_of(&row, 2), 3);
        let m = vec![vec![0.2, 0.9, 0.4], vec![0.3, 0.1, 0.8], vec![0.6, 0.6, 0.1]];
        let shifted: Matrix = m.iter().map(|r| r.iter().map(|v| v + 3.0).collect()).collect();
        let gt = [0, 2, 1];
        assert_eq!(
            retrieval_metrics(&m, &gt).unwrap().per_query_ranks,
            retrieval_metrics(&shifted, &gt).unwrap().per_query_ranks
        );
    }

    #[test]
    fn oracle_grounding_is_perfect() {
        let lex = Lexicon::new(&["the"], &["cat", "dog", "red", "run"]).unwrap();
        let concepts = vec![vec!["cat".to_string(), "red".to_string()], vec!["dog".to_string()]];
        let vectors: Vec<LexiconVector> = concepts
            .iter()
            .map(|c| {
                let mut v = vec![0.0; lex.len()];
                for w in c {
                    v[lex.index_of(w).unwrap()] = 1.0;
                }
                LexiconVector::new(v).unwrap()
            })
            .collect();
        let r = grounding_from_vectors(&vectors, &concepts, &lex, GroundingK::ConceptCount).unwrap();
        assert_eq!((r.mean_precision, r.mean_recall), (1.0, 1.0));
    }
}
